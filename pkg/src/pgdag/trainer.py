"""Inner loop: train one agent with an AlgorithmSpec on one environment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from pgdag import ops
from pgdag.autodiff_nn import (MissingBinding, NonDifferentiablePath, ParameterStore, backward, evaluate_loss,
                               hard_copy, make_store, polyak_update, sgd_step)
from pgdag.graph_ir import GraphError, validate
from pgdag.envs import (Env, EpisodeTracker, ReplayBuffer, TransitionBatch, collect_trajectory, eval_score,
                        make_env)
from pgdag.reference_graphs import AlgorithmSpec

log = logging.getLogger(__name__)


class ModeMismatch(ValueError):
    pass


class IncompatibleActionSpace(ValueError):
    pass


@dataclass(frozen=True)
class TrainBudget:
    total_steps: int = 50_000
    steps_per_update: int = 2048  # on-policy collection length
    update_every: int = 1  # off-policy: env steps between updates
    batch_size: int = 64
    episodes_per_eval: int = 20
    warmup_steps: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 10_000
    explore_noise: float = 0.1  # fraction of the action range
    replay_capacity: int = 100_000

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        for name in ("steps_per_update", "update_every", "batch_size", "episodes_per_eval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class AdvantageEstimate:
    deltas: np.ndarray
    advantages: np.ndarray
    rewards_to_go: np.ndarray


@dataclass
class TrainResult:
    returns: list[float]
    failed: bool = False
    reason: str = ""
    steps: int = 0
    lengths: list[int] = field(default_factory=list)


def rewards_to_go(r: np.ndarray, end: np.ndarray, discount: float = 1.0) -> np.ndarray:
    """Per-episode suffix sums of rewards (undiscounted by default)."""
    return ops.sum_and_discount(np.asarray(r, dtype=np.float64), discount * (1.0 - np.asarray(end, dtype=np.float64)))


def compute_gae(traj: TransitionBatch, values: np.ndarray, next_values: np.ndarray, hp) -> AdvantageEstimate:
    if traj.mode != "consecutive-trajectory":
        raise ModeMismatch("GAE needs a consecutive trajectory")
    r = np.asarray(traj.r, dtype=np.float64)
    d = np.asarray(traj.d, dtype=np.float64)
    end = np.asarray(traj.end, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    v2 = np.asarray(next_values, dtype=np.float64).reshape(-1)
    deltas = r + hp.gamma * (1.0 - d) * v2 - v
    keep = 1.0 - end
    adv = ops.sum_and_discount(deltas, hp.gamma * hp.lam * keep)
    rtg = ops.sum_and_discount(r, hp.gamma * keep)
    return AdvantageEstimate(deltas, adv, rtg)


# ---------------------------------------------------------------------------
# Behaviour policies
# ---------------------------------------------------------------------------

class Behaviour:
    """Maps observations to (stored action, env action) according to the algorithm's policy kind."""

    def __init__(self, spec: AlgorithmSpec, store: ParameterStore, env: Env, budget: TrainBudget,
                 rng: np.random.Generator):
        self.kind = spec.policy.kind
        self.key = spec.policy.store_key
        self.store = store
        self.desc = env.descriptor
        self.budget = budget
        self.rng = rng
        self.step = 0

    def epsilon(self) -> float:
        b = self.budget
        frac = min(1.0, self.step / max(1, b.eps_decay_steps))
        return b.eps_start + frac * (b.eps_end - b.eps_start)

    def __call__(self, obs: np.ndarray):
        s = obs.reshape(1, -1)
        net = self.store[self.key]
        desc, rng = self.desc, self.rng
        lo, hi = desc.a_low, desc.a_high
        if self.kind == "epsilon_greedy":
            if rng.random() < self.epsilon():
                a = int(rng.integers(desc.n_actions))
            else:
                q = net(s)[0]
                best = np.flatnonzero(q == q.max())
                a = int(best[0] if len(best) == 1 else rng.choice(best))
            return np.array([a]), a
        if self.kind == "categorical":
            logits = net(s)[0]
            p = np.exp(logits - logits.max())
            p /= p.sum()
            a = int(rng.choice(len(p), p=p))
            return np.array([a]), a
        if self.kind == "gaussian":
            mean = net(s, port="mean")[0]
            std = np.exp(net(s, port="logstd")[0])
            a = mean + std * rng.standard_normal(mean.shape)
            return a, np.clip(a, lo, hi)
        if self.kind == "deterministic":
            if self.step < self.budget.warmup_steps:
                a = rng.uniform(lo, hi, size=desc.action_dim)
            else:
                a = net(s)[0] + self.budget.explore_noise * (hi - lo) * rng.standard_normal(desc.action_dim)
                a = np.clip(a, lo, hi)
            return a, a
        if self.kind == "squashed":
            if self.step < self.budget.warmup_steps:
                a = rng.uniform(-1.0, 1.0, size=desc.action_dim)
            else:
                mean = net(s, port="mean")[0]
                std = np.exp(net(s, port="logstd")[0])
                a = np.tanh(mean + std * rng.standard_normal(mean.shape))
            return a, np.clip(lo + 0.5 * (a + 1.0) * (hi - lo), lo, hi)
        raise ValueError(f"unknown policy kind {self.kind!r}")


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------

class _Failed(Exception):
    pass


class _Learner:
    def __init__(self, spec: AlgorithmSpec, store: ParameterStore, seed: int,
                 metrics: Callable[[dict], None] | None, log_every: int):
        self.spec = spec
        self.store = store
        self.noise = ops.NoiseStream(seed)
        self.metrics = metrics
        self.log_every = log_every
        self.n_updates = 0
        self.env_step = 0

    def apply_targets(self, when: str, counter: int) -> None:
        for tu in self.spec.target_updates:
            if tu.when != when or counter % tu.period:
                continue
            if tu.rule == "polyak":
                polyak_update(self.store, (tu.target, tu.source), tu.tau)
            else:
                hard_copy(self.store, (tu.target, tu.source))

    def gradient_pass(self, index: int, gu, bindings: dict) -> None:
        hp = self.spec.hp
        try:
            loss, tape = evaluate_loss(gu.graph, self.store, bindings, hp, self.noise, stream_offset=1000 * index)
            self.noise.advance()
            grads = backward(tape, {gu.loss_target})
        except NonDifferentiablePath:
            return
        except (ops.EvaluationError, MissingBinding, FloatingPointError) as exc:
            raise _Failed(f"{gu.graph.name}: {exc}") from exc
        try:
            sgd_step(self.store, grads, gu.lr if gu.lr is not None else hp.lr, hp.max_grad_norm)
        except ops.EvaluationError as exc:
            raise _Failed(f"{gu.graph.name}: {exc}") from exc
        if self.metrics and self.n_updates % self.log_every == 0:
            self.metrics({"step": self.env_step, "episode": None, "return": None,
                          "loss_name": gu.graph.name, "loss_value": loss})

    def update(self, bindings: dict) -> None:
        self.n_updates += 1
        for index, gu in enumerate(self.spec.graphs):
            if self.n_updates % gu.every:
                continue
            for _ in range(gu.iters):
                self.gradient_pass(index, gu, bindings)
        self.apply_targets("update", self.n_updates)


def _episode_hook(tracker: EpisodeTracker, metrics, learner: _Learner):
    def closed():
        if metrics:
            metrics({"step": learner.env_step, "episode": len(tracker.returns) - 1,
                     "return": tracker.returns[-1], "loss_name": None, "loss_value": None})
    return closed


def _run_off_policy(spec, env, budget, rng, store, learner, tracker, on_episode):
    behaviour = Behaviour(spec, store, env, budget, rng)
    buffer = ReplayBuffer(budget.replay_capacity)
    hp = spec.hp
    obs = env.reset(int(rng.integers(2**31)))
    for step in range(budget.total_steps):
        behaviour.step = step
        learner.env_step = step
        a_store, a_env = behaviour(obs)
        nxt, r, term, trunc = env.step(a_env)
        buffer.push(obs, a_store, r, term, nxt)
        tracker.add(r)
        if term or trunc:
            tracker.close()
            on_episode()
            obs = env.reset(int(rng.integers(2**31)))
        else:
            obs = nxt
        n = step + 1
        if n >= budget.warmup_steps and n % budget.update_every == 0 and len(buffer) >= budget.batch_size:
            for _ in range(budget.update_every):
                batch = buffer.sample(budget.batch_size, rng)
                # graphs without an explicit d_t still stop bootstrapping at terminals
                bindings = batch.bindings(hp, env.descriptor, gamma=hp.gamma * (1.0 - batch.d))
                learner.update(bindings)
        learner.apply_targets("step", n)


def _run_on_policy(spec, env, budget, rng, store, learner, tracker, on_episode):
    behaviour = Behaviour(spec, store, env, budget, rng)
    hp = spec.hp
    obs = None
    steps = 0
    n_closed = 0

    def policy(o):
        a_store, a_env = behaviour(o)
        policy.stored.append(a_store)
        return a_env

    while steps < budget.total_steps:
        n = min(budget.steps_per_update, budget.total_steps - steps)
        policy.stored = []
        batch, obs = collect_trajectory(env, policy, n, rng, tracker, start_state=obs)
        batch.a = np.array(policy.stored)
        steps += n
        learner.env_step = steps
        while n_closed < len(tracker.returns):
            n_closed += 1
            on_episode()
        learner.apply_targets("phase", 1)
        if spec.value_key and spec.value_key in store:
            vnet = store[spec.value_key]
            v, v2 = vnet(batch.s)[:, 0], vnet(batch.s2)[:, 0]
        else:
            v = v2 = np.zeros(len(batch))
        est = compute_gae(batch, v, v2, hp)
        adv = est.advantages
        if spec.normalize_advantages and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        # discount is cut at every episode end so inline suffix sums stay within episodes
        bindings = batch.bindings(hp, env.descriptor, gamma=hp.gamma * (1.0 - batch.end))
        bindings["adv"] = adv.reshape(-1, 1)
        bindings["rtg"] = est.rewards_to_go.reshape(-1, 1)
        learner.update(bindings)


def train_agent(spec: AlgorithmSpec, env: Env | str, budget: TrainBudget, seed: int,
                metrics: Callable[[dict], None] | None = None, log_every: int = 100) -> TrainResult:
    env = make_env(env) if isinstance(env, str) else env
    desc = env.descriptor
    if desc.action_kind != spec.action_space:
        raise IncompatibleActionSpace(f"{spec.name} is {spec.action_space}, {desc.env_id} is {desc.action_kind}")
    for up in spec.graphs:
        report = validate(up.graph, action_space=spec.action_space)
        if not report.ok:
            raise GraphError(f"graph {up.graph.name!r} is invalid:\n{report.format()}")
    tracker = EpisodeTracker()
    if budget.total_steps == 0:
        return TrainResult([], steps=0)
    rng = np.random.default_rng([seed, 7])
    store = make_store(spec.store_kinds, desc, seed, spec.target_links)
    learner = _Learner(spec, store, seed, metrics, log_every)
    on_episode = _episode_hook(tracker, metrics, learner)
    run = _run_off_policy if spec.data_mode == "replay" else _run_on_policy
    try:
        with np.errstate(all="ignore"):
            run(spec, env, budget, rng, store, learner, tracker, on_episode)
    except _Failed as exc:
        log.info("training failed: %s", exc)
        return TrainResult(list(tracker.returns), True, str(exc), learner.env_step, list(tracker.lengths))
    return TrainResult(list(tracker.returns), False, "", budget.total_steps, list(tracker.lengths))


def default_budget(spec: AlgorithmSpec, total_steps: int = 50_000, **overrides) -> TrainBudget:
    if spec.data_mode == "trajectory":
        base = TrainBudget(total_steps=total_steps, steps_per_update=2048, warmup_steps=0)
    else:
        base = TrainBudget(total_steps=total_steps, update_every=1, batch_size=64, warmup_steps=1000)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Scoring across environments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvTask:
    env_id: str
    budget: TrainBudget


@dataclass
class ScoreReport:
    total: float
    per_env: dict[str, float]
    diagnostics: list[str]
    failed: bool = False
    returns: dict[str, list[float]] = field(default_factory=dict)


def _score_one(args) -> tuple[str, float, str | None, bool, list[float]]:
    spec, task, seed = args
    env = make_env(task.env_id)
    desc = env.descriptor
    if desc.action_kind != spec.action_space:
        return task.env_id, 0.0, f"{task.env_id}: incompatible action space", False, []
    try:
        res = train_agent(spec, env, task.budget, seed)
    except Exception as exc:  # noqa: BLE001 - one env failing must not sink the others
        return task.env_id, 0.0, f"{task.env_id}: {type(exc).__name__}: {exc}", True, []
    if res.failed:
        return task.env_id, 0.0, f"{task.env_id}: {res.reason}", True, res.returns
    if not res.returns:
        return task.env_id, 0.0, f"{task.env_id}: no completed episodes", False, []
    tail = res.returns[-task.budget.episodes_per_eval:]
    return task.env_id, eval_score(tail, desc.r_min, desc.r_max), None, False, res.returns


def evaluate_algorithm(spec: AlgorithmSpec, env_set: Sequence[EnvTask], seed: int,
                       workers: int = 1) -> ScoreReport:
    """Sum of normalized scores over environments; failures contribute 0."""
    jobs = [(spec, task, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
            for i, task in enumerate(env_set)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_score_one, jobs))
    else:
        results = [_score_one(j) for j in jobs]
    per_env, diags, rets = {}, [], {}
    failed = False
    for env_id, score, diag, fail, returns in results:
        per_env[env_id] = score
        rets[env_id] = returns
        failed |= fail
        if diag:
            diags.append(diag)
    return ScoreReport(float(sum(per_env[t.env_id] for t in env_set)), per_env, diags, failed, rets)


def brute_force_gae(r: Sequence[float], d: Sequence[float], end: Sequence[float], v: Sequence[float],
                    v2: Sequence[float], gamma: float, lam: float) -> np.ndarray:
    """O(T^2) reference: A_t = sum_{l>=0} (gamma*lam)^l delta_{t+l}, truncated at episode ends."""
    T = len(r)
    deltas = [r[t] + gamma * (1 - d[t]) * v2[t] - v[t] for t in range(T)]
    out = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * deltas[k]
            if end[k]:
                break
            w *= gamma * lam
        out[t] = acc
    return out


def iter_returns_tail(returns: Iterable[float], m: int) -> list[float]:
    rets = list(returns)
    return rets[-m:]
