"""Sequential alignment environment.

Candidate pairs are served in descending-similarity order.  A match action removes
both entities (and therefore every queued pair that mentions them); during training
each popped pair may be skipped with a difficulty- and episode-dependent rate.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding_space import CandidateTable
from .kg_store import AlignmentSet


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


class Kind(str, enum.Enum):
    TRUE_MATCH = "true-match"
    FALSE_MATCH = "false-match"
    TRUE_MISMATCH = "true-mismatch"
    FALSE_MISMATCH = "false-mismatch"


def outcome_kind(action: int, label: int) -> Kind:
    if action == 1:
        return Kind.TRUE_MATCH if label == 1 else Kind.FALSE_MATCH
    return Kind.FALSE_MISMATCH if label == 1 else Kind.TRUE_MISMATCH


@dataclass(frozen=True)
class Schedule:
    p_s: float = 0.5
    p_s_min: float = 0.05
    eta: float = 0.995
    tau: float = 0.5

    def validate(self) -> "Schedule":
        for name in ("p_s", "p_s_min", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"schedule.{name}={v} outside [0, 1]")
        return self


@dataclass(frozen=True)
class Rewards:
    true_match: float = 1.0
    false_mismatch: float = -10.0

    def __call__(self, kind: Kind | None) -> float:
        if kind is Kind.TRUE_MATCH:
            return self.true_match
        if kind is Kind.FALSE_MISMATCH:
            return self.false_mismatch
        return 0.0


@dataclass
class CandidatePair:
    source: int
    target: int
    similarity: float
    label: int | None = None
    difficulty: float | None = None
    opponents: tuple[int, ...] = ()


@dataclass(frozen=True)
class StepOutcome:
    state: CandidatePair
    action: int
    reward: float
    kind: Kind | None
    step_index: int


@dataclass
class EnvState:
    queue: list[CandidatePair]
    alive_sources: set[int]
    alive_targets: set[int]
    episode_index: int
    step_index: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    cursor: int = 0
    pending: CandidatePair | None = None
    done: bool = False
    matches: list[tuple[int, int]] = field(default_factory=list)
    skip_rates: list[float] = field(default_factory=list)


# -- pure formulas -----------------------------------------------------------

def difficulty(similarity: float, label: int | None, row_max_similarity: float, tau: float) -> float:
    """Label-signed gap to the row head; positives far below the head and negatives
    close to it are hard."""
    if label is None:
        raise ValueError("difficulty requires a known label")
    gap = row_max_similarity - similarity
    return label * gap + (1 - label) * (tau - gap)


def normalize_difficulties(raw: Sequence[float]) -> list[float]:
    """Min-max rescale to [0, 1]; a constant input maps to 0.5 everywhere."""
    if len(raw) == 0:
        raise ValueError("need at least one difficulty")
    arr = np.asarray(raw, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return [0.5] * len(arr)
    return [float(x) for x in (arr - lo) / (hi - lo)]


def skip_rate(schedule: Schedule, t: int, d: float) -> float:
    schedule.validate()
    if t < 1:
        raise ConfigError(f"episode index must be >= 1, got {t}")
    if not 0.0 <= d <= 1.0:
        raise ConfigError(f"normalized difficulty {d} outside [0, 1]")
    return max(schedule.p_s_min, schedule.eta ** (t - 1) * schedule.p_s * d)


def _label_lookup(labels) -> Mapping[int, int] | None:
    if labels is None:
        return None
    if isinstance(labels, AlignmentSet):
        return dict(labels.pairs)
    return dict(labels)


# -- environment -------------------------------------------------------------

class AlignmentEnv:
    """Candidate-pair sequence with dependency exclusion and curriculum skipping.

    ``labels`` maps source id -> true target id.  In ``train`` mode every source in
    the table must be labelled; in ``eval`` mode labels only feed the reward/kind
    bookkeeping and skipping is off.  ``random_order`` shuffles the queue at every
    reset and bypasses the skip machinery entirely.
    """

    MODES = ("train", "eval")

    def __init__(self, table: CandidateTable, labels=None, schedule: Schedule | None = None,
                 mode: str = "train", random_order: bool = False, rewards: Rewards | None = None,
                 seed: int | np.random.Generator | None = 0):
        if mode not in self.MODES:
            raise ConfigError(f"mode must be one of {self.MODES}, got {mode!r}")
        if len(table) == 0:
            raise ValueError("empty candidate table")
        self.table = table
        self.schedule = (schedule or Schedule()).validate()
        self.mode = mode
        self.random_order = random_order
        self.rewards = rewards or Rewards()
        self.rng = np.random.default_rng(seed)
        self.skip_queries = 0
        self.state: EnvState | None = None

        truth = _label_lookup(labels)
        pairs = []
        for s, row in table.rows.items():
            targets = [t for t, _ in row]
            tgt_true = truth.get(s) if truth is not None else None
            for t, sim in row:
                label = None if tgt_true is None else int(tgt_true == t)
                pairs.append(CandidatePair(s, t, sim, label,
                                           opponents=tuple(o for o in targets if o != t)))
        if mode == "train" and not random_order:
            missing = [p.source for p in pairs if p.label is None]
            if missing:
                raise ValueError(f"train mode needs labels for every source (missing e.g. {missing[0]})")
            raw = [difficulty(p.similarity, p.label, table.head_similarity(p.source), self.schedule.tau)
                   for p in pairs]
            for p, d in zip(pairs, normalize_difficulties(raw)):
                p.difficulty = d
        pairs.sort(key=lambda p: (-p.similarity, p.source, p.target))
        self.pairs: tuple[CandidatePair, ...] = tuple(pairs)
        self.sources = frozenset(table.rows)
        self.targets = frozenset(p.target for p in pairs)

    @property
    def skipping(self) -> bool:
        return self.mode == "train" and not self.random_order

    def reset(self, episode_index: int = 1) -> EnvState:
        if episode_index < 1:
            raise ConfigError("episode index is 1-based")
        if self.random_order:
            order = self.rng.permutation(len(self.pairs))
            queue = [self.pairs[i] for i in order]
        else:
            queue = list(self.pairs)
        self.state = EnvState(queue, set(self.sources), set(self.targets), episode_index,
                              schedule=self.schedule)
        return self.state

    def current_skip_rate(self, pair: CandidatePair) -> float:
        if not self.skipping:
            return 0.0
        self.skip_queries += 1
        return skip_rate(self.schedule, self.state.episode_index, pair.difficulty)

    def pop_state(self, rng: np.random.Generator | None = None) -> CandidatePair | None:
        """Next non-skipped live pair, or ``None`` once the episode is over."""
        st = self._require_state()
        if st.pending is not None:
            raise ProtocolError("previous state has not been stepped")
        rng = self.rng if rng is None else rng
        while st.cursor < len(st.queue) and st.alive_sources and st.alive_targets:
            pair = st.queue[st.cursor]
            st.cursor += 1
            if pair.source not in st.alive_sources or pair.target not in st.alive_targets:
                continue
            if self.skipping:
                p = self.current_skip_rate(pair)
                st.skip_rates.append(p)
                if rng.random() < p:
                    continue
            st.pending = pair
            return pair
        st.done = True
        return None

    def step(self, action: int) -> StepOutcome:
        st = self._require_state()
        pair = st.pending
        if pair is None:
            raise ProtocolError("step() without a pending state")
        if action not in (0, 1):
            raise ValueError(f"action must be 0 or 1, got {action!r}")
        st.pending = None
        st.step_index += 1
        if action == 1:
            st.alive_sources.discard(pair.source)
            st.alive_targets.discard(pair.target)
            st.matches.append((pair.source, pair.target))
        kind = None if pair.label is None else outcome_kind(action, pair.label)
        return StepOutcome(pair, action, self.rewards(kind), kind, st.step_index)

    def _require_state(self) -> EnvState:
        if self.state is None:
            raise ProtocolError("reset() must be called first")
        return self.state


def trace_records(outcomes: Iterable[StepOutcome], names1: Sequence[str] | None = None,
                  names2: Sequence[str] | None = None) -> list[dict]:
    out = []
    for o in outcomes:
        s, t = o.state.source, o.state.target
        out.append({
            "source": names1[s] if names1 is not None else s,
            "target": names2[t] if names2 is not None else t,
            "similarity": o.state.similarity, "label": o.state.label, "action": o.action,
            "reward": o.reward, "kind": o.kind.value if o.kind else None, "step_index": o.step_index,
        })
    return out


def write_trace_jsonl(path, outcomes: Iterable[StepOutcome], names1=None, names2=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in trace_records(outcomes, names1, names2):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
