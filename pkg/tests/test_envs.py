import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pgdag import envs
from pgdag.envs import (BufferTooSmall, EmptyReturns, EpisodeTracker, HyperParams, InvalidAction, ReplayBuffer,
                        collect_trajectory, eval_score, make_env)


def _run_episode(env, policy, seed=0):
    obs, total, steps = env.reset(seed), 0.0, 0
    while True:
        obs, r, term, trunc = env.step(policy(obs))
        total += r
        steps += 1
        if term or trunc:
            return total, steps, term


# -- environments ---------------------------------------------------------------

def test_cartpole_falls_under_constant_push():
    total, steps, term = _run_episode(make_env("cartpole"), lambda o: 0)
    assert term and steps < 100 and total == steps


def test_cartpole_balanced_controller_survives_horizon():
    env = make_env("cartpole")
    total, steps, term = _run_episode(env, lambda o: int(o[2] + 0.5 * o[3] + 0.01 * o[0] + 0.1 * o[1] > 0))
    assert total == 500.0 and not term
    assert env.descriptor.r_max == 500.0


def test_cartpole_short_horizon():
    env = make_env("cartpole-short")
    _, steps, term = _run_episode(env, lambda o: int(o[2] + 0.5 * o[3] > 0))
    assert steps == 100 and not term


def test_pendulum_upright_at_rest_costs_nothing():
    env = make_env("pendulum")
    env.reset(0)
    env.state = np.array([0.0, 0.0])
    obs, r, term, trunc = env.step(np.array([0.0]))
    assert r == 0.0 and not term
    np.testing.assert_allclose(obs, [1.0, 0.0, 0.0])


def test_pendulum_runs_fixed_horizon():
    total, steps, term = _run_episode(make_env("pendulum"), lambda o: np.array([0.0]))
    assert steps == 200 and not term and total <= 0.0


def test_invalid_actions():
    env = make_env("cartpole")
    env.reset(0)
    with pytest.raises(InvalidAction):
        env.step(2)
    p = make_env("pendulum")
    p.reset(0)
    with pytest.raises(InvalidAction):
        p.step(np.array([3.0]))
    with pytest.raises(InvalidAction):
        p.step(np.array([0.0, 0.0]))
    with pytest.raises(KeyError):
        make_env("mountaincar")


def test_bandit_payoffs():
    b = make_env("bandit")
    b.reset(0)
    assert b.step(1)[1:3] == (1.0, True)
    b.reset(0)
    assert b.step(0)[1] == 0.0
    c = make_env("bandit-continuous")
    c.reset(0)
    assert c.step(np.array([0.3]))[1] == 1.0
    c.reset(0)
    assert c.step(np.array([-0.3]))[1] == 0.0


def test_reset_is_seeded():
    a, b = make_env("cartpole"), make_env("cartpole")
    np.testing.assert_array_equal(a.reset(7), b.reset(7))
    assert not np.array_equal(a.reset(7), a.reset(8))


def test_angle_normalize():
    assert envs.angle_normalize(2 * math.pi) == pytest.approx(0.0)
    assert -math.pi <= envs.angle_normalize(3.5) < math.pi


# -- scoring --------------------------------------------------------------------

def test_eval_score_fixture_cases():
    assert eval_score([500.0] * 20, 0.0, 500.0) == 1.0
    assert eval_score([0.0] * 20, 0.0, 500.0) == 0.0
    assert eval_score([500.0] * 10 + [0.0] * 10, 0.0, 500.0) == 0.5


def test_eval_score_errors():
    with pytest.raises(EmptyReturns):
        eval_score([], 0.0, 1.0)
    with pytest.raises(ValueError):
        eval_score([1.0], 1.0, 1.0)


@given(st.lists(st.floats(allow_nan=True, allow_infinity=True), min_size=1, max_size=50),
       st.floats(-1e6, 1e6), st.floats(1e-3, 1e6))
def test_eval_score_in_unit_interval(rets, r_min, width):
    s = eval_score(rets, r_min, r_min + width)
    assert 0.0 <= s <= 1.0


def test_episode_log(tmp_path):
    path = tmp_path / "ep.csv"
    envs.write_episode_log(path, [dict(candidate_id=1, env_id="bandit", episode=0, steps=1,
                                       normalized_return=1.0, **{"return": 1.0})])
    assert path.read_text().splitlines()[0] == ",".join(envs.EPISODE_LOG_COLUMNS)


# -- hyperparameters ------------------------------------------------------------

def test_hyperparams_validation():
    assert HyperParams().gamma == 0.99
    for bad in ({"gamma": 0.0}, {"gamma": 1.5}, {"lam": -0.1}, {"eps_ppo": 0.0}, {"lr": float("nan")}):
        with pytest.raises(ValueError):
            HyperParams(**bad)
    with pytest.raises(ValueError):
        HyperParams.from_dict({"momentum": 0.9})
    assert HyperParams.from_dict({"gamma": 0.5}).gamma == 0.5


# -- buffers and trajectories ---------------------------------------------------

def test_replay_ring_overwrites_oldest():
    buf = ReplayBuffer(capacity=3)
    for i in range(5):
        buf.push(np.full(2, i), i % 2, float(i), False, np.full(2, i + 1))
    assert len(buf) == 3
    b = buf.sample(3, np.random.default_rng(0))
    assert set(b.r.tolist()) <= {2.0, 3.0, 4.0}
    assert b.a.dtype == np.int64 and b.a.shape == (3, 1)


def test_replay_too_small():
    buf = ReplayBuffer(10)
    with pytest.raises(BufferTooSmall):
        buf.sample(1, np.random.default_rng(0))
    buf.push(np.zeros(1), 0, 0.0, True, np.zeros(1))
    with pytest.raises(BufferTooSmall):
        buf.sample(2, np.random.default_rng(0))


def test_replay_sampling_deterministic():
    buf = ReplayBuffer(100)
    for i in range(50):
        envs.buffer_push(buf, (np.full(3, i), np.array([0.1 * i]), float(i), i % 7 == 0, np.full(3, i + 1)))
    a = envs.buffer_sample(buf, 16, np.random.default_rng(3))
    b = envs.buffer_sample(buf, 16, np.random.default_rng(3))
    np.testing.assert_array_equal(a.s, b.s)
    assert a.a.dtype == np.float64 and a.mode == "iid-replay"


@pytest.mark.parametrize("horizon", [1, 37, 300])
def test_trajectory_chaining(horizon):
    env = make_env("cartpole-short")
    rng = np.random.default_rng(horizon)
    tracker = EpisodeTracker()
    batch, resume = collect_trajectory(env, lambda o: int(rng.integers(2)), horizon, rng, tracker)
    assert batch.mode == "consecutive-trajectory" and len(batch) == horizon
    assert batch.end[-1] == 1.0
    for t in range(horizon - 1):
        if batch.end[t] == 0.0:
            np.testing.assert_array_equal(batch.s2[t], batch.s[t + 1])
    assert np.all(batch.end >= batch.d)
    assert sum(tracker.lengths) + tracker.steps == horizon
    if tracker.steps:  # episode still running, so we resume from the last next-state
        np.testing.assert_array_equal(resume, batch.s2[-1])


def test_transition_batch_bindings():
    b = envs.TransitionBatch(np.zeros((4, 3)), np.zeros((4, 1)), np.arange(4.0), np.zeros(4), np.ones((4, 3)))
    out = b.bindings(HyperParams(gamma=0.9), make_env("pendulum").descriptor, gamma=np.full(4, 0.9))
    assert out["r_t"].shape == (4, 1) and out["gamma"].shape == (4, 1)
    assert out["a_high"].item() == 2.0
    with pytest.raises(ValueError):
        envs.TransitionBatch(np.zeros((3, 3)), np.zeros((4, 1)), np.arange(4.0), np.zeros(4), np.ones((4, 3)))
