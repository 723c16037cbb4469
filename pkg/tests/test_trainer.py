from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgdag.autodiff_nn import backward, evaluate_loss, make_store, sgd_step
from pgdag.envs import HyperParams, TransitionBatch, make_env
from pgdag.graph_ir import GraphBuilder, GraphError
from pgdag.reference_graphs import build
from pgdag.trainer import (EnvTask, IncompatibleActionSpace, ModeMismatch, TrainBudget, brute_force_gae, compute_gae,
                           default_budget, evaluate_algorithm, iter_returns_tail, rewards_to_go, train_agent)

BANDIT_BUDGET = TrainBudget(total_steps=500, batch_size=32, warmup_steps=50, eps_decay_steps=250,
                            episodes_per_eval=200)


def _traj(r, d, end=None):
    r = np.asarray(r, dtype=float)
    n = len(r)
    return TransitionBatch(np.zeros((n, 1)), np.zeros((n, 1), dtype=np.int64), r, np.asarray(d, dtype=float),
                           np.zeros((n, 1)), "consecutive-trajectory",
                           None if end is None else np.asarray(end, dtype=float))


def _constant_loss_ddqn():
    gb = GraphBuilder("flat")
    q = gb.op("MaxList", gb.param("theta", "S->ListR", gb.input("s_t")))
    gb.output(gb.op("Multiply", gb.const(0.0), gb.op("MeanBatch", q)))
    return build("ddqn").with_graphs([gb.build("theta")])


# -- advantage estimation -------------------------------------------------------

def test_gae_lambda_zero_is_td_error():
    tr = _traj([1.0, 0.5, 2.0], [0, 0, 1])
    v, v2 = np.array([0.3, -0.2, 0.1]), np.array([-0.2, 0.1, 9.0])
    est = compute_gae(tr, v, v2, HyperParams(gamma=0.9, lam=0.0))
    np.testing.assert_allclose(est.advantages, est.deltas)
    np.testing.assert_allclose(est.deltas, [1.0 + 0.9 * -0.2 - 0.3, 0.5 + 0.09 + 0.2, 2.0 - 0.1])


def test_gae_single_terminal_step():
    est = compute_gae(_traj([1.0], [1]), np.zeros(1), np.zeros(1), HyperParams())
    assert est.advantages.tolist() == [1.0] and est.rewards_to_go.tolist() == [1.0]


def test_gae_lambda_one_gives_return_minus_value():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    v = np.array([0.5, -1.0, 2.0, 0.25])
    v2 = np.append(v[1:], 0.0)
    est = compute_gae(_traj(r, [0, 0, 0, 1]), v, v2, HyperParams(gamma=1.0, lam=1.0))
    np.testing.assert_allclose(est.advantages, est.rewards_to_go - v, atol=1e-12)
    np.testing.assert_allclose(est.rewards_to_go, [10.0, 9.0, 7.0, 4.0])


def test_gae_rejects_replay_batch():
    tr = _traj([1.0], [1])
    tr.mode = "iid-replay"
    with pytest.raises(ModeMismatch):
        compute_gae(tr, np.zeros(1), np.zeros(1), HyperParams())


@settings(max_examples=60)
@given(st.integers(1, 60), st.integers(0, 2**31 - 1), st.floats(0.5, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_brute_force(n, seed, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v, v2 = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
    d = (rng.random(n) < 0.1).astype(float)
    end = np.maximum(d, (rng.random(n) < 0.1).astype(float))
    end[-1] = 1.0
    est = compute_gae(_traj(r, d, end), v, v2, HyperParams(gamma=gamma, lam=lam))
    np.testing.assert_allclose(est.advantages, brute_force_gae(r, d, end, v, v2, gamma, lam), atol=1e-10)


@settings(max_examples=40)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=40), st.integers(1, 39))
def test_episode_segments_are_independent(r, cut):
    # advantages of each episode depend only on that episode's data
    r = np.array(r)
    cut = min(cut, len(r) - 1)
    end = np.zeros(len(r))
    end[cut - 1] = end[-1] = 1.0
    hp = HyperParams(gamma=0.95, lam=0.9)
    v = np.linspace(-1, 1, len(r))
    whole = compute_gae(_traj(r, end, end), v, np.zeros(len(r)), hp).advantages
    head = compute_gae(_traj(r[:cut], end[:cut], end[:cut]), v[:cut], np.zeros(cut), hp).advantages
    tail = compute_gae(_traj(r[cut:], end[cut:], end[cut:]), v[cut:], np.zeros(len(r) - cut), hp).advantages
    np.testing.assert_allclose(whole, np.concatenate([head, tail]), atol=1e-9)


def test_rewards_to_go_resets_at_episode_end():
    np.testing.assert_array_equal(rewards_to_go([1, 1, 1, 1], [0, 1, 0, 1]), [2, 1, 2, 1])
    assert iter_returns_tail([1, 2, 3], 2) == [2, 3]


# -- train_agent ----------------------------------------------------------------

def test_zero_budget_returns_nothing():
    res = train_agent(build("ddqn"), "cartpole", TrainBudget(total_steps=0), 0)
    assert res.returns == [] and not res.failed


def test_incompatible_action_space():
    with pytest.raises(IncompatibleActionSpace):
        train_agent(build("ddpg"), "cartpole", TrainBudget(total_steps=10), 0)


def test_invalid_graph_rejected():
    gb = GraphBuilder("bad")
    gb.output(gb.op("Max", gb.param("theta", "S->ListR", gb.input("s_t"))))
    with pytest.raises(GraphError):
        train_agent(build("ddqn").with_graphs([gb.build("theta")]), "bandit", BANDIT_BUDGET, 0)


def test_training_is_deterministic():
    a = train_agent(build("ddqn"), "bandit", BANDIT_BUDGET, 3)
    b = train_agent(build("ddqn"), "bandit", BANDIT_BUDGET, 3)
    c = train_agent(build("ddqn"), "bandit", BANDIT_BUDGET, 4)
    assert a.returns == b.returns and a.returns != c.returns
    assert len(a.returns) == 500 and a.steps == 500


@pytest.mark.parametrize("name", ["ddpg", "td3", "sac"])
def test_continuous_algorithms_run(name):
    spec = build(name)
    res = train_agent(spec, "pendulum", default_budget(spec, 600, warmup_steps=200, batch_size=16), 0)
    assert not res.failed and len(res.returns) == 3 and all(np.isfinite(res.returns))


@pytest.mark.parametrize("name", ["vpg", "ppo"])
def test_on_policy_runs(name):
    spec = build(name)
    res = train_agent(spec, "cartpole-short", default_budget(spec, 600, steps_per_update=200), 0)
    assert not res.failed and sum(res.lengths) <= 600


def test_metrics_callback():
    rows = []
    train_agent(build("ddqn"), "bandit", BANDIT_BUDGET, 0, metrics=rows.append, log_every=1)
    episodes = [r for r in rows if r["episode"] is not None]
    assert [r["episode"] for r in episodes] == list(range(500))
    assert any(r["loss_name"] == "ddqn" for r in rows)


def test_value_loss_decreases_on_frozen_batch():
    spec = build("vpg")
    env = make_env("cartpole")
    store = make_store(spec.store_kinds, env.descriptor, 0, zero_head=False)
    rng = np.random.default_rng(0)
    n = 64
    end = np.zeros(n)
    end[[20, 45, 63]] = 1.0
    b = _traj(rng.normal(size=n), end, end)
    bindings = b.bindings(spec.hp, gamma=spec.hp.gamma * (1 - end))
    bindings["s_t"] = rng.normal(size=(n, 4))
    graph = spec.graphs[1].graph
    losses = []
    for _ in range(30):
        loss, tape = evaluate_loss(graph, store, bindings, spec.hp)
        losses.append(loss)
        sgd_step(store, backward(tape, {"phi"}), 0.01)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# -- evaluate_algorithm ---------------------------------------------------------

def test_evaluate_skips_incompatible_envs():
    tasks = [EnvTask("bandit", BANDIT_BUDGET), EnvTask("pendulum", TrainBudget(total_steps=200))]
    rep = evaluate_algorithm(build("ddqn"), tasks, 0)
    assert rep.per_env["pendulum"] == 0.0 and rep.total == rep.per_env["bandit"]
    assert any("incompatible" in d for d in rep.diagnostics) and not rep.failed


def test_evaluate_isolates_failures():
    gb = GraphBuilder("overflow")
    q = gb.op("MaxList", gb.param("theta", "S->ListR", gb.input("s_t")))
    gb.output(gb.op("Exp", gb.op("Add", gb.const(1000.0), gb.op("MeanBatch", q))))
    spec = build("ddqn").with_graphs([gb.build("theta")])
    rep = evaluate_algorithm(spec, [EnvTask("bandit", BANDIT_BUDGET)], 0)
    assert rep.failed and rep.total == 0.0 and rep.diagnostics


def test_evaluate_is_sum_and_parallel_matches_serial():
    tasks = [EnvTask("bandit", BANDIT_BUDGET), EnvTask("cartpole-short", replace(BANDIT_BUDGET, episodes_per_eval=5))]
    serial = evaluate_algorithm(build("ddqn"), tasks, 5)
    parallel = evaluate_algorithm(build("ddqn"), tasks, 5, workers=2)
    assert serial.total == parallel.total
    assert serial.total == pytest.approx(sum(serial.per_env.values()))


def test_constant_loss_scores_below_ddqn():
    ddqn = evaluate_algorithm(build("ddqn"), [EnvTask("bandit", BANDIT_BUDGET)], 0).total
    flat = evaluate_algorithm(_constant_loss_ddqn(), [EnvTask("bandit", BANDIT_BUDGET)], 0).total
    assert ddqn > 0.9 and flat < 0.7
