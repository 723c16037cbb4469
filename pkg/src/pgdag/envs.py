"""Desk-scale environments, transition storage and normalized scoring."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable

import numpy as np


class InvalidAction(ValueError):
    pass


class BufferTooSmall(ValueError):
    pass


class EmptyReturns(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 0.99
    lam: float = 0.97
    lr: float = 1e-3
    eps_ppo: float = 0.2
    alpha_sac: float = 0.2
    td3_sigma: float = 0.2
    td3_c: float = 0.5
    tau: float = 0.005
    hurdle_alpha: float = 0.6
    max_grad_norm: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"{f.name} must be finite")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.eps_ppo <= 0:
            raise ValueError("eps_ppo must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown hyperparameters: {sorted(extra)}")
        return cls(**data)


@dataclass(frozen=True)
class EnvDescriptor:
    env_id: str
    state_dim: int
    action_kind: str  # "discrete" | "continuous"
    horizon: int
    r_min: float
    r_max: float
    n_actions: int = 0
    action_dim: int = 0
    a_low: float = -1.0
    a_high: float = 1.0

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ValueError("r_min must be below r_max")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.action_kind == "continuous" and not self.a_low < self.a_high:
            raise ValueError("a_low must be below a_high")

    @property
    def action_width(self) -> int:
        return 1 if self.action_kind == "discrete" else self.action_dim


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

class Env:
    descriptor: EnvDescriptor

    def __init__(self):
        self.rng = np.random.default_rng(0)
        self.state = None
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.state = self._initial_state()
        return self.observe()

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        """Advance one step; returns (next observation, reward, terminated, truncated)."""
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        action = self._check_action(action)
        reward, terminated = self._advance(action)
        self.t += 1
        truncated = not terminated and self.t >= self.descriptor.horizon
        return self.observe(), float(reward), bool(terminated), bool(truncated)

    def _check_action(self, action):
        d = self.descriptor
        if d.action_kind == "discrete":
            a = int(np.asarray(action).reshape(-1)[0])
            if not 0 <= a < d.n_actions or np.asarray(action).reshape(-1)[0] != a:
                raise InvalidAction(f"{d.env_id}: action {action!r} not in 0..{d.n_actions - 1}")
            return a
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (d.action_dim,) or not np.all(np.isfinite(a)):
            raise InvalidAction(f"{d.env_id}: action {action!r} has wrong shape")
        if np.any(a < d.a_low - 1e-9) or np.any(a > d.a_high + 1e-9):
            raise InvalidAction(f"{d.env_id}: action {a} outside [{d.a_low}, {d.a_high}]")
        return np.clip(a, d.a_low, d.a_high)

    def observe(self) -> np.ndarray:
        return np.array(self.state, dtype=np.float64)


class CartPole(Env):
    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_limit = 12 * 2 * math.pi / 360
    x_limit = 2.4

    def __init__(self, horizon: int = 500, env_id: str = "cartpole"):
        super().__init__()
        self.descriptor = EnvDescriptor(env_id, 4, "discrete", horizon, 0.0, float(horizon), n_actions=2)

    def _initial_state(self):
        return self.rng.uniform(-0.05, 0.05, size=4)

    def _advance(self, action):
        x, x_dot, theta, theta_dot = self.state
        total_mass = self.masscart + self.masspole
        polemass_length = self.masspole * self.length
        force = self.force_mag if action == 1 else -self.force_mag
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass))
        x_acc = temp - polemass_length * theta_acc * cos / total_mass
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * x_acc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * theta_acc
        self.state = np.array([x, x_dot, theta, theta_dot])
        terminated = abs(x) > self.x_limit or abs(theta) > self.theta_limit
        return 1.0, terminated


def angle_normalize(x: float) -> float:
    return ((x + math.pi) % (2 * math.pi)) - math.pi


class Pendulum(Env):
    max_speed = 8.0
    max_torque = 2.0
    dt = 0.05
    g = 10.0
    m = 1.0
    l = 1.0

    def __init__(self, horizon: int = 200):
        super().__init__()
        # declared floor, not a strict one (worst case is ~16.3 cost per step); eval_score clamps
        self.descriptor = EnvDescriptor("pendulum", 3, "continuous", horizon, -1700.0 * horizon / 200, 0.0,
                                        action_dim=1, a_low=-self.max_torque, a_high=self.max_torque)

    def _initial_state(self):
        return np.array([self.rng.uniform(-math.pi, math.pi), self.rng.uniform(-1.0, 1.0)])

    def _advance(self, action):
        th, thdot = self.state
        u = float(np.clip(action[0], -self.max_torque, self.max_torque))
        cost = angle_normalize(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2
        newthdot = thdot + (3 * self.g / (2 * self.l) * math.sin(th) + 3.0 / (self.m * self.l**2) * u) * self.dt
        newthdot = float(np.clip(newthdot, -self.max_speed, self.max_speed))
        newth = th + newthdot * self.dt
        self.state = np.array([newth, newthdot])
        return -cost, False

    def observe(self):
        th, thdot = self.state
        return np.array([math.cos(th), math.sin(th), thdot])


class Bandit(Env):
    """One-step two-armed bandit: arm 1 pays 1, arm 0 pays 0.

    The continuous variant pays 1 for a positive action in [-1, 1].
    """

    def __init__(self, continuous: bool = False):
        super().__init__()
        if continuous:
            self.descriptor = EnvDescriptor("bandit-continuous", 1, "continuous", 1, 0.0, 1.0, action_dim=1)
        else:
            self.descriptor = EnvDescriptor("bandit", 1, "discrete", 1, 0.0, 1.0, n_actions=2)

    def _initial_state(self):
        return np.ones(1)

    def _advance(self, action):
        if self.descriptor.action_kind == "discrete":
            return float(action == 1), True
        return float(action[0] > 0.0), True


ENV_FACTORIES: dict[str, Callable[[], Env]] = {
    "cartpole": CartPole,
    "cartpole-short": lambda: CartPole(horizon=100, env_id="cartpole-short"),
    "pendulum": Pendulum,
    "bandit": Bandit,
    "bandit-continuous": lambda: Bandit(continuous=True),
}


def make_env(env_id: str) -> Env:
    try:
        return ENV_FACTORIES[env_id]()
    except KeyError:
        raise KeyError(f"unknown environment {env_id!r}; known: {sorted(ENV_FACTORIES)}") from None


def env_reset(env_id: str, seed: int) -> tuple[Env, np.ndarray]:
    env = make_env(env_id)
    return env, env.reset(seed)


def env_step(env: Env, action):
    return env.step(action)


def hurdle_env(action_kind: str = "discrete") -> EnvDescriptor:
    return (Bandit(continuous=action_kind == "continuous")).descriptor


def hurdle_env_id(action_kind: str) -> str:
    return "bandit-continuous" if action_kind == "continuous" else "bandit"


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def eval_score(returns: Iterable[float], r_min: float, r_max: float) -> float:
    """Mean min-max normalized return, each episode clamped to [0, 1]."""
    rets = np.asarray(list(returns), dtype=np.float64)
    if rets.size == 0:
        raise EmptyReturns("eval_score needs at least one episode return")
    if not r_min < r_max:
        raise ValueError("r_min must be below r_max")
    norm = np.clip((rets - r_min) / (r_max - r_min), 0.0, 1.0)
    norm = np.where(np.isnan(norm), 0.0, norm)
    return float(norm.mean())


EPISODE_LOG_COLUMNS = ("candidate_id", "env_id", "episode", "return", "normalized_return", "steps")


def write_episode_log(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=EPISODE_LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in EPISODE_LOG_COLUMNS})


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------

@dataclass
class TransitionBatch:
    s: np.ndarray  # (B, state_dim)
    a: np.ndarray  # (B, 1) int64 or (B, action_dim)
    r: np.ndarray  # (B,)
    d: np.ndarray  # (B,) terminal flags
    s2: np.ndarray  # (B, state_dim)
    mode: str = "iid-replay"
    end: np.ndarray | None = None  # episode-end flags (terminal, truncated or cut)

    def __post_init__(self):
        n = len(self.r)
        if n < 1:
            raise ValueError("empty batch")
        for name in ("s", "a", "d", "s2"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has length {len(getattr(self, name))}, expected {n}")
        if self.end is None:
            self.end = self.d.copy()

    def __len__(self) -> int:
        return len(self.r)

    def bindings(self, hp: HyperParams, desc: EnvDescriptor | None = None,
                 gamma: np.ndarray | float | None = None) -> dict[str, np.ndarray]:
        col = lambda x: np.asarray(x, dtype=np.float64).reshape(-1, 1)  # noqa: E731
        out = {
            "s_t": np.asarray(self.s, dtype=np.float64),
            "a_t": self.a if self.a.dtype.kind == "i" else np.asarray(self.a, dtype=np.float64),
            "r_t": col(self.r),
            "d_t": col(self.d),
            "s_tp1": np.asarray(self.s2, dtype=np.float64),
            "gamma": np.array([[hp.gamma]]) if gamma is None else np.asarray(gamma, dtype=np.float64).reshape(-1, 1),
            "lambda": np.array([[hp.lam]]),
        }
        if desc is not None and desc.action_kind == "continuous":
            out["a_low"] = np.array([[desc.a_low]])
            out["a_high"] = np.array([[desc.a_high]])
        return out


class ReplayBuffer:
    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self.ptr = 0
        self._data: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.size

    def push(self, s, a, r, d, s2) -> None:
        a = np.asarray(a).reshape(-1)
        if self._data is None:
            s = np.asarray(s)
            adtype = np.int64 if a.dtype.kind in "iu" else np.float64
            self._data = {
                "s": np.zeros((self.capacity, s.size)),
                "a": np.zeros((self.capacity, a.size), dtype=adtype),
                "r": np.zeros(self.capacity),
                "d": np.zeros(self.capacity),
                "s2": np.zeros((self.capacity, s.size)),
            }
        data = self._data
        data["s"][self.ptr] = s
        data["a"][self.ptr] = a
        data["r"][self.ptr] = r
        data["d"][self.ptr] = float(d)
        data["s2"][self.ptr] = s2
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        if self.size < batch_size or self.size == 0:
            raise BufferTooSmall(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        d = self._data
        return TransitionBatch(d["s"][idx], d["a"][idx], d["r"][idx], d["d"][idx], d["s2"][idx], "iid-replay")


def buffer_push(buffer: ReplayBuffer, transition: tuple) -> ReplayBuffer:
    buffer.push(*transition)
    return buffer


def buffer_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
    return buffer.sample(batch_size, rng)


@dataclass
class EpisodeTracker:
    returns: list[float] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)
    current: float = 0.0
    steps: int = 0

    def add(self, reward: float) -> None:
        self.current += reward
        self.steps += 1

    def close(self) -> None:
        self.returns.append(self.current)
        self.lengths.append(self.steps)
        self.current = 0.0
        self.steps = 0


def collect_trajectory(env: Env, policy: Callable[[np.ndarray], object], horizon: int,
                       rng: np.random.Generator, tracker: EpisodeTracker | None = None,
                       start_state: np.ndarray | None = None):
    """Roll ``policy`` for ``horizon`` steps, resetting the env at episode ends.

    Returns the consecutive-trajectory batch and the observation to resume from.
    The last transition is always flagged as an episode end so advantage sums
    never run past the batch.
    """
    obs = start_state if start_state is not None else env.reset(int(rng.integers(2**31)))
    S, A, R, D, S2, E = [], [], [], [], [], []
    for t in range(horizon):
        action = policy(obs)
        nxt, r, term, trunc = env.step(action)
        S.append(obs)
        A.append(np.asarray(action).reshape(-1))
        R.append(r)
        D.append(float(term))
        S2.append(nxt)
        E.append(float(term or trunc or t == horizon - 1))
        if tracker is not None:
            tracker.add(r)
            if term or trunc:
                tracker.close()
        obs = env.reset(int(rng.integers(2**31))) if (term or trunc) else nxt
    a = np.array(A)
    if a.dtype.kind not in "iu":
        a = a.astype(np.float64)
    batch = TransitionBatch(np.array(S), a, np.array(R), np.array(D), np.array(S2),
                            "consecutive-trajectory", np.array(E))
    return batch, obs
