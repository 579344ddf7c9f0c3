import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqalign.environment import AlignmentEnv, ConfigError, Schedule
from seqalign.eval_bench import SyntheticParams, generate_synthetic, mean
from seqalign.policy_net import Policy, PolicyParams
from seqalign.trainer import (EpisodeTrace, TrainerConfig, format_metrics_csv, reinforce_update, returns,
                              run_episode, train)


def brute_returns(rewards, gamma, inclusive):
    start = 0 if inclusive else 1
    return [sum(gamma ** (m - i - start) * rewards[m] for m in range(i + start, len(rewards)))
            for i in range(len(rewards))]


def test_returns_examples():
    assert returns([1.0], 0.9, "inclusive") == [1.0]
    assert returns([1.0], 0.9, "exclusive") == [0.0]
    assert returns([0.0, 1.0, -10.0], 0.5) == [-2.0, -4.0, -10.0]
    assert returns([0.0, 1.0, -10.0], 0.5, "exclusive") == [-4.0, -10.0, 0.0]
    assert returns([0.0] * 4, 0.9) == [0.0] * 4
    assert returns([], 0.9) == []
    with pytest.raises(ValueError):
        returns([1.0], 0.9, "other")


@given(st.lists(st.sampled_from([1.0, -10.0, 0.0]), max_size=30), st.floats(0.01, 1.0),
       st.sampled_from(["inclusive", "exclusive"]))
@settings(max_examples=200, deadline=None)
def test_returns_match_direct_sum(rewards, gamma, conv):
    got = returns(rewards, gamma, conv)
    want = brute_returns(rewards, gamma, conv == "inclusive")
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


def test_returns_gamma_one_is_reward_to_go():
    r = [1.0, 0.0, -10.0, 1.0]
    assert returns(r, 1.0) == [sum(r[i:]) for i in range(len(r))]


def toy_task(seed=0, n=2, dim=8):
    return generate_synthetic(SyntheticParams(n_entities=n, block_size=n, dim=dim), seed)


def bound_policy(task, seed=0, use_mie=True):
    params = PolicyParams.init(task.space.dim, rng=np.random.default_rng(seed))
    return Policy(params, use_mie).bind(task.kg1, task.space.e1, task.kg2, task.space.e2)


def single_step_trace(task, policy, action, reward):
    s, t = task.truth.pairs[0]
    others = [o for o in task.truth.targets if o != t]
    state = policy.state(s, t, others)
    policy.distribution(state)
    return EpisodeTrace(states=[state], actions=[action], rewards=[reward]), state


def test_zero_advantage_leaves_params_unchanged():
    task = toy_task()
    policy = bound_policy(task)
    trace, _ = single_step_trace(task, policy, 1, 1.0)
    policy.params.value_w[:] = 0.0
    policy.params.value_b[:] = 1.0
    before = policy.params.copy()
    reinforce_update(trace, policy, TrainerConfig(step_size=0.1))
    assert policy.params.equals(before)


@pytest.mark.parametrize("action", [0, 1])
def test_positive_advantage_raises_taken_action(action):
    task = toy_task()
    policy = bound_policy(task)
    trace, state = single_step_trace(task, policy, action, 1.0)
    policy.params.value_w[:] = 0.0
    policy.params.value_b[:] = 0.0
    p0 = policy.distribution(state)[action]
    reinforce_update(trace, policy, TrainerConfig(step_size=1e-3))
    policy.refresh()
    s, t = task.truth.pairs[0]
    p1 = policy.distribution(policy.state(s, t, state.opponent_ids))[action]
    assert p1 > p0


def test_value_head_moves_toward_return():
    task = toy_task()
    policy = bound_policy(task)
    trace, state = single_step_trace(task, policy, 1, 1.0)
    v0 = policy.value(state)
    reinforce_update(trace, policy, TrainerConfig(step_size=1e-2))
    assert abs(1.0 - policy.value(state)) < abs(1.0 - v0)


def test_empty_trace_rejected():
    task = toy_task()
    with pytest.raises(ValueError):
        reinforce_update(EpisodeTrace(), bound_policy(task), TrainerConfig())


def test_run_episode_always_match_single_pair():
    task = toy_task()
    s, t = task.truth.pairs[0]
    from seqalign.embedding_space import CandidateTable
    env = AlignmentEnv(CandidateTable(1, {s: ((t, 0.9),)}), {s: t}, mode="eval")
    env.reset(1)
    policy = bound_policy(task)
    policy.params.head_w[:] = 0.0
    policy.params.head_w[1, -1] = 50.0   # p_match ~ 1 whenever the MIE feature is positive
    trace = run_episode(env, policy, np.random.default_rng(0))
    assert len(trace) == 1 and trace.rewards == [1.0]


def test_run_episode_deterministic():
    task = toy_task(n=6)
    table = task.candidate_table(3)
    traces = []
    for _ in range(2):
        env = AlignmentEnv(table, task.truth, mode="train", seed=5)
        env.reset(1)
        traces.append(run_episode(env, bound_policy(task), np.random.default_rng(9)))
    assert traces[0].actions == traces[1].actions and traces[0].rewards == traces[1].rewards


def test_single_episode_logged():
    task = toy_task()
    res = train(TrainerConfig(episodes=1, k=2), task.kg1, task.kg2, task.space, task.truth)
    assert len(res.log) == 1 and res.log[0].episode == 1


@pytest.mark.parametrize("bad", [dict(episodes=0), dict(step_size=0.0), dict(discount=0.0),
                                 dict(discount=1.5), dict(return_convention="x"),
                                 dict(schedule=Schedule(p_s=2.0))])
def test_config_errors_before_training(bad):
    task = toy_task()
    with pytest.raises(ConfigError):
        train(TrainerConfig(**bad), task.kg1, task.kg2, task.space, task.truth)


def test_random_env_never_queries_schedule(monkeypatch):
    import seqalign.environment as envmod
    calls = []
    real = envmod.skip_rate
    monkeypatch.setattr(envmod, "skip_rate", lambda *a: calls.append(a) or real(*a))
    task = toy_task(n=6)
    train(TrainerConfig(episodes=5, k=3, random_env=True), task.kg1, task.kg2, task.space, task.truth)
    assert calls == []
    train(TrainerConfig(episodes=5, k=3), task.kg1, task.kg2, task.space, task.truth)
    assert calls


def test_training_reproducible():
    task = toy_task(n=6)
    cfg = TrainerConfig(episodes=15, k=3, step_size=1e-2, seed=4)
    a = train(cfg, task.kg1, task.kg2, task.space, task.truth)
    b = train(cfg, task.kg1, task.kg2, task.space, task.truth)
    assert format_metrics_csv(a.log) == format_metrics_csv(b.log)
    assert a.policy.params.equals(b.policy.params)


def test_metrics_csv_header():
    task = toy_task()
    res = train(TrainerConfig(episodes=2, k=2), task.kg1, task.kg2, task.space, task.truth)
    lines = format_metrics_csv(res.log).splitlines()
    assert lines[0] == "episode,alignment_count,episode_length,total_reward,mean_skip_rate"
    assert len(lines) == 3


def test_validation_keeps_best():
    task = toy_task(n=6)
    cfg = TrainerConfig(episodes=10, k=3, step_size=1e-2, validate_every=5)
    res = train(cfg, task.kg1, task.kg2, task.space, task.truth, valid=task.truth)
    assert res.best_episode in (5, 10) and 0.0 <= res.best_valid_hits <= 1.0


def test_two_pair_toy_task_improves():
    improved = 0
    for seed in range(5):
        task = toy_task(seed)
        cfg = TrainerConfig(episodes=200, step_size=1e-2, k=2, seed=seed)
        r = [m.total_reward for m in train(cfg, task.kg1, task.kg2, task.space, task.truth).log]
        improved += mean(r[-20:]) > mean(r[:10])
    assert improved >= 4


def test_exclusive_convention_trains():
    task = toy_task()
    cfg = TrainerConfig(episodes=20, step_size=1e-2, k=2, return_convention="exclusive")
    res = train(cfg, task.kg1, task.kg2, task.space, task.truth)
    res.policy.params.check_finite()


def test_config_dict_roundtrip():
    cfg = TrainerConfig(episodes=3, schedule=Schedule(p_s=0.3), disable_mie=True)
    assert TrainerConfig.from_dict(cfg.to_dict()) == cfg


def test_sequential_updates_equal_summed_update():
    """Applying step updates one after another on frozen features equals the summed update."""
    task = toy_task(n=4)
    policy = bound_policy(task)
    table = task.candidate_table(2)
    env = AlignmentEnv(table, task.truth, mode="eval")
    env.reset(1)
    trace = run_episode(env, policy, np.random.default_rng(1))
    cfg = TrainerConfig(step_size=1e-3)
    summed = policy.params.copy()
    p2 = Policy(summed).bind(task.kg1, task.space.e1, task.kg2, task.space.e2)
    reinforce_update(trace, p2, cfg)

    from seqalign.policy_net import log_prob_grad
    g = np.asarray(returns(trace.rewards, cfg.discount))
    feats = [np.concatenate([s.gx, s.gy]) for s in trace.states]
    params = policy.params
    seq = params.copy()
    for i, (state, a) in enumerate(zip(trace.states, trace.actions)):
        delta = g[i] - (feats[i] @ params.value_w + params.value_b[0])
        seq.add_(log_prob_grad(state, a, params), cfg.step_size * cfg.discount ** i * delta)
    for (name, x), (_, y) in zip(seq.named_tensors(), summed.named_tensors()):
        if not name.startswith("value"):
            np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-14, err_msg=name)
    assert len(trace) >= 2
