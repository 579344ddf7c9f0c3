"""REINFORCE-with-baseline training over the alignment environment."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .embedding_space import EmbeddingSpace, build_candidates
from .environment import AlignmentEnv, ConfigError, Kind, Rewards, Schedule, StepOutcome
from .kg_store import AlignmentSet, KnowledgeGraph
from .policy_net import Policy, PolicyError, PolicyParams, StateFeatures, accumulate_log_prob_grads

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("episode", "alignment_count", "episode_length", "total_reward", "mean_skip_rate")


@dataclass
class TrainerConfig:
    episodes: int = 500
    step_size: float = 1e-4
    discount: float = 0.9
    k: int = 10
    seed: int = 0
    hidden: int | None = None
    layers: int = 2
    schedule: Schedule = field(default_factory=Schedule)
    penalty: float = -10.0
    return_convention: str = "inclusive"
    disable_mie: bool = False
    random_env: bool = False
    clip_norm: float | None = None
    validate_every: int = 0

    def validate(self) -> "TrainerConfig":
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError("discount must lie in (0, 1]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.return_convention not in ("inclusive", "exclusive"):
            raise ConfigError(f"unknown return convention {self.return_convention!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        self.schedule.validate()
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            d["schedule"] = Schedule(**d["schedule"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpisodeTrace:
    states: list[StateFeatures] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    outcomes: list[StepOutcome] = field(default_factory=list)
    mean_skip_rate: float = 0.0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def alignment_count(self) -> int:
        return sum(o.kind is Kind.TRUE_MATCH for o in self.outcomes)

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


@dataclass(frozen=True)
class EpisodeMetrics:
    episode: int
    alignment_count: int
    episode_length: int
    total_reward: float
    mean_skip_rate: float


def run_episode(env: AlignmentEnv, policy: Policy, rng: np.random.Generator | None = None,
                greedy: bool = False) -> EpisodeTrace:
    """Roll one episode out; ``env`` must already be reset."""
    trace = EpisodeTrace()
    rng = np.random.default_rng() if rng is None else rng
    while True:
        pair = env.pop_state()
        if pair is None:
            break
        state = policy.state(pair.source, pair.target, pair.opponents)
        dist = policy.distribution(state)
        action = dist.greedy() if greedy else int(rng.random() < dist.p_match)
        outcome = env.step(action)
        trace.states.append(state)
        trace.actions.append(action)
        trace.rewards.append(outcome.reward)
        trace.outcomes.append(outcome)
    rates = env.state.skip_rates
    trace.mean_skip_rate = float(np.mean(rates)) if rates else 0.0
    return trace


def returns(rewards: Sequence[float], gamma: float, convention: str = "inclusive") -> list[float]:
    """Discounted returns per step.

    ``inclusive``: G_i = sum_{m>=i} gamma^(m-i) r_m (standard reward-to-go).
    ``exclusive``: G_i = sum_{m>i} gamma^(m-i-1) r_m, i.e. the step's own reward is excluded.
    """
    if convention not in ("inclusive", "exclusive"):
        raise ValueError(f"unknown return convention {convention!r}")
    out = [0.0] * len(rewards)
    g = 0.0
    for i in reversed(range(len(rewards))):
        if convention == "inclusive":
            g = rewards[i] + gamma * g
            out[i] = g
        else:
            out[i] = g
            g = rewards[i] + gamma * g
    return out


@dataclass(frozen=True)
class UpdateStats:
    mean_advantage: float
    grad_norm: float


def reinforce_update(trace: EpisodeTrace, policy: Policy, config: TrainerConfig) -> UpdateStats:
    """Apply theta += alpha * gamma^i * delta_i * grad ln pi(a_i|s_i) for every step.

    Parameters are frozen while the episode runs, so all step gradients share one
    snapshot and their sequential application equals applying their sum.  The value
    head takes one squared-error step per trace step with the same step size.
    """
    if len(trace) == 0:
        raise ValueError("cannot update from an empty trace")
    params = policy.params
    alpha, gamma = config.step_size, config.discount
    g = np.asarray(returns(trace.rewards, gamma, config.return_convention))
    feats = np.stack([np.concatenate([s.gx, s.gy]) for s in trace.states])
    baseline = feats @ params.value_w + params.value_b[0]
    delta = g - baseline
    weights = alpha * gamma ** np.arange(len(trace)) * delta

    grads = accumulate_log_prob_grads(trace.states, trace.actions, weights, params)
    for name, t in grads.named_tensors():
        if not np.all(np.isfinite(t)):
            raise PolicyError(f"non-finite gradient in {name}")
    norm = grads.global_norm()
    if config.clip_norm is not None and norm > config.clip_norm:
        grads = grads.zeros_like().add_(grads, config.clip_norm / norm)
    params.add_(grads)
    params.value_w += alpha * (delta @ feats)
    params.value_b += alpha * float(delta.sum())
    params.check_finite()
    return UpdateStats(float(delta.mean()), norm)


@dataclass
class TrainResult:
    policy: Policy
    log: list[EpisodeMetrics]
    best_valid_hits: float | None = None
    best_episode: int | None = None


def seed_streams(seed: int, n: int = 3) -> list[np.random.Generator]:
    """Independent generators for init / environment / action sampling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def train(config: TrainerConfig, kg1: KnowledgeGraph, kg2: KnowledgeGraph, space: EmbeddingSpace,
          seeds: AlignmentSet, valid: AlignmentSet | None = None,
          params: PolicyParams | None = None) -> TrainResult:
    config.validate()
    if len(seeds) == 0:
        raise ConfigError("no training alignment pairs")
    init_rng, env_rng, act_rng = seed_streams(config.seed)
    if params is None:
        params = PolicyParams.init(space.dim, config.hidden, config.layers, init_rng)
    policy = Policy(params, use_mie=not config.disable_mie).bind(kg1, space.e1, kg2, space.e2)
    table = build_candidates(space, seeds.sources, seeds.targets, config.k)
    env = AlignmentEnv(table, seeds, config.schedule, mode="train", random_order=config.random_env,
                       rewards=Rewards(false_mismatch=config.penalty), seed=env_rng)

    valid_env = None
    if valid is not None and config.validate_every > 0 and len(valid):
        vtable = build_candidates(space, valid.sources, valid.targets, config.k)
        valid_env = AlignmentEnv(vtable, valid, config.schedule, mode="eval")
    best_hits, best_ep, best_params = None, None, None

    history: list[EpisodeMetrics] = []
    for t in range(1, config.episodes + 1):
        env.reset(t)
        policy.refresh()
        trace = run_episode(env, policy, act_rng)
        if len(trace):
            reinforce_update(trace, policy, config)
        m = EpisodeMetrics(t, trace.alignment_count, len(trace), trace.total_reward, trace.mean_skip_rate)
        history.append(m)
        log.debug("episode %d: matches=%d len=%d reward=%.1f", t, m.alignment_count,
                  m.episode_length, m.total_reward)
        if valid_env is not None and t % config.validate_every == 0:
            valid_env.reset(1)
            policy.refresh()
            hits = run_episode(valid_env, policy, greedy=True).alignment_count / len(valid)
            if best_hits is None or hits > best_hits:
                best_hits, best_ep, best_params = hits, t, policy.params.copy()
    if best_params is not None:
        policy.params = best_params
    policy.refresh()
    return TrainResult(policy, history, best_hits, best_ep)


def format_metrics_csv(history: Sequence[EpisodeMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in history:
        w.writerow([m.episode, m.alignment_count, m.episode_length, repr(float(m.total_reward)),
                    repr(float(m.mean_skip_rate))])
    return buf.getvalue()
