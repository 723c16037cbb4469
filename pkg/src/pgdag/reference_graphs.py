"""Reference loss graphs for DDQN, VPG, PPO, DDPG, TD3 and SAC, plus oracles.

Each builder returns an :class:`AlgorithmSpec`: the loss graphs together
with the training plumbing the graphs leave open (target updates, data mode,
behaviour policy). The oracles evaluate each loss formula in straight-line
numpy, without touching the graph interpreter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from pgdag.envs import HyperParams
from pgdag.graph_ir import Graph, GraphBuilder


class UnknownAlgorithm(KeyError):
    pass


class MissingStub(KeyError):
    pass


@dataclass(frozen=True)
class GraphUpdate:
    graph: Graph
    iters: int = 1  # gradient passes per update phase
    every: int = 1  # run on every k-th update (TD3 policy delay)
    lr: float | None = None

    @property
    def loss_target(self) -> str:
        return self.graph.loss_target


@dataclass(frozen=True)
class TargetUpdate:
    target: str
    source: str
    rule: str  # "polyak" | "hard"
    when: str = "update"  # "update" (after gradient updates) | "step" (env steps) | "phase" (before on-policy updates)
    period: int = 1
    tau: float = 0.005


@dataclass(frozen=True)
class PolicySpec:
    kind: str  # epsilon_greedy | categorical | gaussian | deterministic | squashed
    store_key: str = "theta"


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    graphs: tuple[GraphUpdate, ...]
    store_kinds: Mapping[str, str]
    target_updates: tuple[TargetUpdate, ...]
    data_mode: str  # "replay" | "trajectory"
    policy: PolicySpec
    action_space: str
    twin_q: bool = False
    value_key: str | None = None
    hp: HyperParams = field(default_factory=HyperParams)
    normalize_advantages: bool = True

    @property
    def target_links(self) -> dict[str, str]:
        return {t.target: t.source for t in self.target_updates}

    def with_graphs(self, graphs) -> "AlgorithmSpec":
        ups = tuple(replace(u, graph=gr) for u, gr in zip(self.graphs, graphs))
        return replace(self, graphs=ups)


# Plain SGD on normalized advantages gives small policy gradients and only one
# pass per 2048-step batch, so on-policy policy graphs need a much larger step.
ON_POLICY_POLICY_LR = 3.0
PPO_POLICY_LR = 1.0
ON_POLICY_VALUE_LR = 0.01

ALGORITHMS = ("ddqn", "vpg", "ppo", "ddpg", "td3", "sac")
REFERENCE_GRAPH_NAMES = ("ddqn", "vpg_policy", "vpg_value", "ppo_policy", "ddpg_q", "ddpg_policy",
                         "td3_q", "td3_policy", "sac_q", "sac_policy")


# ---------------------------------------------------------------------------
# Graph builders
# ---------------------------------------------------------------------------

def ddqn_graph() -> Graph:
    b = GraphBuilder("ddqn")
    s, a, r, s2, gamma = b.input("s_t"), b.input("a_t"), b.input("r_t"), b.input("s_tp1"), b.input("gamma")
    q_s = b.param("theta", "S->ListR", s)
    q_sa = b.op("SelectList", q_s, a)
    q_s2 = b.param("theta", "S->ListR", s2)
    a_star = b.op("ArgMaxList", q_s2)
    qt_s2 = b.param("theta_targ", "S->ListR", s2)
    qt = b.op("SelectList", qt_s2, a_star)
    target = b.op("Add", r, b.op("Multiply", gamma, qt))
    b.output(b.op("Square", b.op("Subtract", q_sa, target)))
    return b.build("theta", action_space="discrete", algorithm="ddqn", role="q")


def _log_pi(b: GraphBuilder, key: str, s: int, a: int, action_space: str) -> int:
    """log pi_key(a|s): Log(Prob(...)) for categorical heads, LogProb for Gaussian."""
    if action_space == "discrete":
        logits = b.param(key, "S->ListR", s)
        return b.op("Log", b.op("Prob", logits, a))
    mean = b.param(key, "S->Zmean", s)
    logstd = b.param(key, "S->Zlogstd", s)
    return b.op("LogProb", mean, logstd, a)


def _pi(b: GraphBuilder, key: str, s: int, a: int, action_space: str) -> int:
    if action_space == "discrete":
        return b.op("Prob", b.param(key, "S->ListR", s), a)
    return b.op("Prob", b.param(key, "S->Zmean", s), b.param(key, "S->Zlogstd", s), a)


def _advantage(b: GraphBuilder, inline: bool) -> int:
    if not inline:
        return b.input("adv")
    s, r, s2 = b.input("s_t"), b.input("r_t"), b.input("s_tp1")
    gamma, lam = b.input("gamma"), b.input("lambda")
    v = b.param("phi", "S->R", s)
    v2 = b.param("phi", "S->R", s2)
    delta = b.op("Subtract", b.op("Add", r, b.op("Multiply", gamma, v2)), v)
    return b.op("SumAndDiscount", delta, b.op("Multiply", gamma, lam))


def vpg_policy_graph(action_space: str = "discrete", inline_advantage: bool = False) -> Graph:
    b = GraphBuilder("vpg_policy")
    s, a = b.input("s_t"), b.input("a_t")
    logp = _log_pi(b, "theta", s, a, action_space)
    adv = _advantage(b, inline_advantage)
    mean = b.op("MeanBatch", b.op("Multiply", logp, adv))
    b.output(b.op("Multiply", b.const(-1.0), mean))
    return b.build("theta", action_space=action_space, algorithm="vpg", role="policy")


def value_graph(name: str = "vpg_value", action_space: str = "discrete") -> Graph:
    b = GraphBuilder(name)
    s, r, gamma = b.input("s_t"), b.input("r_t"), b.input("gamma")
    v = b.param("phi", "S->R", s)
    rtg = b.op("SumAndDiscount", r, gamma)
    b.output(b.op("MeanBatch", b.op("Square", b.op("Subtract", v, rtg))))
    return b.build("phi", action_space=action_space, algorithm=name.split("_")[0], role="value")


def ppo_policy_graph(action_space: str = "discrete", hp: HyperParams | None = None,
                     inline_advantage: bool = False) -> Graph:
    hp = hp or HyperParams()
    b = GraphBuilder("ppo_policy")
    s, a = b.input("s_t"), b.input("a_t")
    ratio = b.op("Div", _pi(b, "theta", s, a, action_space), _pi(b, "theta_k", s, a, action_space))
    adv = _advantage(b, inline_advantage)
    clipped = b.op("Clip", ratio, b.const(1.0 - hp.eps_ppo, "1-eps"), b.const(1.0 + hp.eps_ppo, "1+eps"))
    surr = b.op("Min", b.op("Multiply", ratio, adv), b.op("Multiply", clipped, adv))
    b.output(b.op("Multiply", b.const(-1.0), b.op("MeanBatch", surr)))
    return b.build("theta", action_space=action_space, algorithm="ppo", role="policy")


def _not_done_discount(b: GraphBuilder) -> int:
    gamma, d = b.input("gamma"), b.input("d_t")
    return b.op("Multiply", gamma, b.op("Subtract", b.const(1.0), d))


def ddpg_q_graph() -> Graph:
    b = GraphBuilder("ddpg_q")
    s, a, r, s2 = b.input("s_t"), b.input("a_t"), b.input("r_t"), b.input("s_tp1")
    q = b.param("phi", "SxZ->R", s, a)
    mu_t = b.param("theta_targ", "S->Z", s2)
    q_t = b.param("phi_targ", "SxZ->R", s2, mu_t)
    target = b.op("Add", r, b.op("Multiply", _not_done_discount(b), q_t))
    b.output(b.op("Square", b.op("Subtract", q, target)))
    return b.build("phi", action_space="continuous", algorithm="ddpg", role="q")


def deterministic_policy_graph(name: str, q_key: str) -> Graph:
    b = GraphBuilder(name)
    s = b.input("s_t")
    q = b.param(q_key, "SxZ->R", s, b.param("theta", "S->Z", s))
    b.output(b.op("Multiply", b.const(-1.0), q))
    return b.build("theta", action_space="continuous", algorithm=name.split("_")[0], role="policy")


def td3_q_graph(q_key: str = "phi1", hp: HyperParams | None = None) -> Graph:
    hp = hp or HyperParams()
    b = GraphBuilder("td3_q" if q_key == "phi1" else f"td3_q_{q_key}")
    s, a, r, s2 = b.input("s_t"), b.input("a_t"), b.input("r_t"), b.input("s_tp1")
    q = b.param(q_key, "SxZ->R", s, a)
    noise = b.op("Clip", b.input("eps_noise"), b.const(-hp.td3_c, "-c"), b.const(hp.td3_c, "c"))
    a2 = b.op("Clip", b.op("Add", b.param("theta_targ", "S->Z", s2), noise),
              b.const(-1.0, "a_low"), b.const(1.0, "a_high"))
    q_min = b.op("MinPair", b.param("phi1_targ", "SxZ->R", s2, a2), b.param("phi2_targ", "SxZ->R", s2, a2))
    target = b.op("Add", r, b.op("Multiply", _not_done_discount(b), q_min))
    b.output(b.op("Square", b.op("Subtract", q, target)))
    return b.build(q_key, action_space="continuous", algorithm="td3", role="q")


def _squashed_sample(b: GraphBuilder, s: int) -> tuple[int, int]:
    mean = b.param("theta", "S->Zmean", s)
    logstd = b.param("theta", "S->Zlogstd", s)
    a_tilde = b.op("Squashing", mean, logstd, b.input("xi"))
    logp = b.op("LogProbSquashed", mean, logstd, a_tilde)
    return a_tilde, logp


def sac_q_graph(q_key: str = "phi1", hp: HyperParams | None = None) -> Graph:
    hp = hp or HyperParams()
    b = GraphBuilder("sac_q" if q_key == "phi1" else f"sac_q_{q_key}")
    s, a, r, s2 = b.input("s_t"), b.input("a_t"), b.input("r_t"), b.input("s_tp1")
    q = b.param(q_key, "SxZ->R", s, a)
    a2, logp2 = _squashed_sample(b, s2)
    q_min = b.op("MinPair", b.param("phi1_targ", "SxZ->R", s2, a2), b.param("phi2_targ", "SxZ->R", s2, a2))
    soft = b.op("Subtract", q_min, b.op("Multiply", b.const(hp.alpha_sac, "alpha"), logp2))
    target = b.op("Add", r, b.op("Multiply", _not_done_discount(b), soft))
    b.output(b.op("Square", b.op("Subtract", q, target)))
    return b.build(q_key, action_space="continuous", algorithm="sac", role="q")


def sac_policy_graph(hp: HyperParams | None = None) -> Graph:
    hp = hp or HyperParams()
    b = GraphBuilder("sac_policy")
    s = b.input("s_t")
    a_tilde, logp = _squashed_sample(b, s)
    q_min = b.op("MinPair", b.param("phi1", "SxZ->R", s, a_tilde), b.param("phi2", "SxZ->R", s, a_tilde))
    soft = b.op("Subtract", q_min, b.op("Multiply", b.const(hp.alpha_sac, "alpha"), logp))
    b.output(b.op("Multiply", b.const(-1.0), soft))
    return b.build("theta", action_space="continuous", algorithm="sac", role="policy")


def reference_graph(name: str, hp: HyperParams | None = None) -> Graph:
    builders: dict[str, Callable[[], Graph]] = {
        "ddqn": ddqn_graph,
        "vpg_policy": vpg_policy_graph,
        "vpg_value": value_graph,
        "ppo_policy": lambda: ppo_policy_graph(hp=hp),
        "ddpg_q": ddpg_q_graph,
        "ddpg_policy": lambda: deterministic_policy_graph("ddpg_policy", "phi"),
        "td3_q": lambda: td3_q_graph("phi1", hp),
        "td3_policy": lambda: deterministic_policy_graph("td3_policy", "phi1"),
        "sac_q": lambda: sac_q_graph("phi1", hp),
        "sac_policy": lambda: sac_policy_graph(hp),
    }
    if name not in builders:
        raise UnknownAlgorithm(name)
    return builders[name]()


# ---------------------------------------------------------------------------
# Algorithm specs
# ---------------------------------------------------------------------------

def _policy_kinds(action_space: str) -> dict[str, str]:
    return {"theta": "S->ListR" if action_space == "discrete" else "S->Gauss"}


def build(name: str, hp: HyperParams | None = None, action_space: str | None = None,
          inline_advantage: bool = False) -> AlgorithmSpec:
    """Assemble the loss graphs and default training plumbing for one algorithm."""
    hp = hp or HyperParams()
    if name == "ddqn":
        return AlgorithmSpec(
            "ddqn", (GraphUpdate(ddqn_graph()),), {"theta": "S->ListR", "theta_targ": "S->ListR"},
            (TargetUpdate("theta_targ", "theta", "hard", when="step", period=500),),
            "replay", PolicySpec("epsilon_greedy"), "discrete", hp=hp)
    if name in ("vpg", "ppo"):
        space = action_space or "discrete"
        kinds = {**_policy_kinds(space), "phi": "S->R"}
        value = GraphUpdate(value_graph(f"{name}_value", space), iters=80, lr=ON_POLICY_VALUE_LR)
        policy_kind = "categorical" if space == "discrete" else "gaussian"
        if name == "vpg":
            pol = GraphUpdate(vpg_policy_graph(space, inline_advantage), iters=1, lr=ON_POLICY_POLICY_LR)
            return AlgorithmSpec("vpg", (pol, value), kinds, (), "trajectory", PolicySpec(policy_kind),
                                 space, value_key="phi", hp=hp)
        kinds["theta_k"] = kinds["theta"]
        pol = GraphUpdate(ppo_policy_graph(space, hp, inline_advantage), iters=10, lr=PPO_POLICY_LR)
        return AlgorithmSpec("ppo", (pol, value), kinds,
                             (TargetUpdate("theta_k", "theta", "hard", when="phase"),),
                             "trajectory", PolicySpec(policy_kind), space, value_key="phi", hp=hp)
    if name == "ddpg":
        return AlgorithmSpec(
            "ddpg", (GraphUpdate(ddpg_q_graph()), GraphUpdate(deterministic_policy_graph("ddpg_policy", "phi"))),
            {"phi": "SxZ->R", "phi_targ": "SxZ->R", "theta": "S->Z", "theta_targ": "S->Z"},
            (TargetUpdate("phi_targ", "phi", "polyak", tau=hp.tau),
             TargetUpdate("theta_targ", "theta", "polyak", tau=hp.tau)),
            "replay", PolicySpec("deterministic"), "continuous", hp=hp)
    if name == "td3":
        kinds = {k: "SxZ->R" for k in ("phi1", "phi2", "phi1_targ", "phi2_targ")}
        kinds.update(theta="S->Z", theta_targ="S->Z")
        return AlgorithmSpec(
            "td3",
            (GraphUpdate(td3_q_graph("phi1", hp)), GraphUpdate(td3_q_graph("phi2", hp)),
             GraphUpdate(deterministic_policy_graph("td3_policy", "phi1"), every=2)),
            kinds,
            tuple(TargetUpdate(t, s, "polyak", period=2, tau=hp.tau)
                  for t, s in (("phi1_targ", "phi1"), ("phi2_targ", "phi2"), ("theta_targ", "theta"))),
            "replay", PolicySpec("deterministic"), "continuous", twin_q=True, hp=hp)
    if name == "sac":
        kinds = {k: "SxZ->R" for k in ("phi1", "phi2", "phi1_targ", "phi2_targ")}
        kinds["theta"] = "S->Gauss"
        return AlgorithmSpec(
            "sac",
            (GraphUpdate(sac_q_graph("phi1", hp)), GraphUpdate(sac_q_graph("phi2", hp)),
             GraphUpdate(sac_policy_graph(hp))),
            kinds,
            tuple(TargetUpdate(t, s, "polyak", tau=hp.tau) for t, s in (("phi1_targ", "phi1"), ("phi2_targ", "phi2"))),
            "replay", PolicySpec("squashed"), "continuous", twin_q=True, hp=hp)
    raise UnknownAlgorithm(name)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

@dataclass
class StubBindings:
    """Deterministic network functions plus one batch of data and noise draws.

    ``nets[key]`` maps a network input (states, or states||actions) to the raw
    head output, exactly as the matching :class:`StubNet` does.
    """

    nets: Mapping[str, Callable[[np.ndarray], np.ndarray]]
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    d: np.ndarray
    s2: np.ndarray
    hp: HyperParams = field(default_factory=HyperParams)
    adv: np.ndarray | None = None
    xi: np.ndarray | None = None
    eps_noise: np.ndarray | None = None
    a_low: float = -1.0
    a_high: float = 1.0

    def net(self, key):
        if key not in self.nets:
            raise MissingStub(key)
        return self.nets[key]

    def q(self, key, s, a):
        return self.net(key)(np.concatenate([s, a], axis=1))[:, 0]

    def bindings(self) -> dict[str, np.ndarray]:
        out = {
            "s_t": self.s, "a_t": self.a, "r_t": self.r.reshape(-1, 1), "d_t": self.d.reshape(-1, 1),
            "s_tp1": self.s2, "gamma": np.array([[self.hp.gamma]]), "lambda": np.array([[self.hp.lam]]),
            "a_low": np.array([[self.a_low]]), "a_high": np.array([[self.a_high]]),
        }
        for k in ("adv", "xi", "eps_noise"):
            if getattr(self, k) is not None:
                v = getattr(self, k)
                out[k] = v.reshape(-1, 1) if v.ndim == 1 else v
        return out


def _log_softmax(x):
    m = np.max(x, axis=1, keepdims=True)
    return x - m - np.log(np.sum(np.exp(x - m), axis=1, keepdims=True))


def _squashed_terms(st: StubBindings, states):
    """Sample a~ = tanh(u) and its log-density, computed from u directly."""
    head = st.net("theta")(states)
    da = st.xi.shape[1]
    mu, logstd = head[:, :da], head[:, da:]
    std = np.exp(logstd)
    u = mu + std * st.xi
    log_normal = -0.5 * st.xi**2 - logstd - 0.5 * math.log(2 * math.pi)
    log_jac = np.log(1.0 - np.tanh(u) ** 2)
    return np.tanh(u), (log_normal - log_jac).sum(axis=1)


def _discounted_suffix(v: np.ndarray, b: float) -> np.ndarray:
    n = len(v)
    out = np.zeros(n)
    for i in range(n):
        for k in range(i, n):
            out[i] += v[k] * b ** (k - i)
    return out


def oracle_loss(name: str, st: StubBindings) -> float:
    """Loss formula for reference graph ``name`` evaluated directly on the stubs."""
    hp = st.hp
    idx = np.arange(len(st.r))
    r, d = st.r, st.d
    if name == "ddqn":
        q = st.net("theta")(st.s)[idx, st.a[:, 0]]
        a_star = np.argmax(st.net("theta")(st.s2), axis=1)
        q_t = st.net("theta_targ")(st.s2)[idx, a_star]
        return float(np.mean((q - (r + hp.gamma * q_t)) ** 2))
    if name == "vpg_policy":
        logp = _log_softmax(st.net("theta")(st.s))[idx, st.a[:, 0]]
        return float(-np.mean(logp * st.adv))
    if name == "vpg_value":
        rtg = _discounted_suffix(r, hp.gamma)
        return float(np.mean((st.net("phi")(st.s)[:, 0] - rtg) ** 2))
    if name == "ppo_policy":
        p = np.exp(_log_softmax(st.net("theta")(st.s))[idx, st.a[:, 0]])
        p_k = np.exp(_log_softmax(st.net("theta_k")(st.s))[idx, st.a[:, 0]])
        ratio = p / p_k
        clipped = np.minimum(np.maximum(ratio, 1 - hp.eps_ppo), 1 + hp.eps_ppo)
        return float(-np.mean(np.minimum(ratio * st.adv, clipped * st.adv)))
    if name == "ddpg_q":
        q = st.q("phi", st.s, st.a)
        q_t = st.q("phi_targ", st.s2, st.net("theta_targ")(st.s2))
        return float(np.mean((q - (r + hp.gamma * (1 - d) * q_t)) ** 2))
    if name in ("ddpg_policy", "td3_policy"):
        key = "phi" if name == "ddpg_policy" else "phi1"
        return float(-np.mean(st.q(key, st.s, st.net("theta")(st.s))))
    if name == "td3_q":
        noise = np.minimum(np.maximum(st.eps_noise, -hp.td3_c), hp.td3_c)
        a2 = np.minimum(np.maximum(st.net("theta_targ")(st.s2) + noise, st.a_low), st.a_high)
        q_min = np.minimum(st.q("phi1_targ", st.s2, a2), st.q("phi2_targ", st.s2, a2))
        return float(np.mean((st.q("phi1", st.s, st.a) - (r + hp.gamma * (1 - d) * q_min)) ** 2))
    if name == "sac_q":
        a2, logp2 = _squashed_terms(st, st.s2)
        q_min = np.minimum(st.q("phi1_targ", st.s2, a2), st.q("phi2_targ", st.s2, a2))
        target = r + hp.gamma * (1 - d) * (q_min - hp.alpha_sac * logp2)
        return float(np.mean((st.q("phi1", st.s, st.a) - target) ** 2))
    if name == "sac_policy":
        a1, logp = _squashed_terms(st, st.s)
        q_min = np.minimum(st.q("phi1", st.s, a1), st.q("phi2", st.s, a1))
        return float(-np.mean(q_min - hp.alpha_sac * logp))
    raise UnknownAlgorithm(name)


def random_stubs(name: str, seed: int, batch: int, state_dim: int = 3, n_actions: int = 3,
                 action_dim: int = 2, hp: HyperParams | None = None):
    """Random fixed-function stubs and a batch matching graph ``name``.

    Returns ``(StubBindings, {store_key: StubNet})``.
    """
    from pgdag.autodiff_nn import StubNet

    rng = np.random.default_rng(seed)
    hp = hp or HyperParams(gamma=float(rng.uniform(0.8, 0.999)), lam=float(rng.uniform(0.8, 1.0)),
                           eps_ppo=float(rng.uniform(0.1, 0.3)), alpha_sac=float(rng.uniform(0.05, 0.5)),
                           td3_sigma=0.2, td3_c=float(rng.uniform(0.2, 0.6)))
    g = reference_graph(name, hp)
    continuous = g.action_space == "continuous"
    in_s = state_dim
    kinds = {n.store_key: n.signature for n in g.nodes if n.kind == "parameter"}

    def make_fn(kind):
        if kind == "S->ListR":
            W, c = rng.normal(size=(in_s, n_actions)), rng.normal(size=n_actions)
            return lambda x: 2.0 * np.tanh(x @ W + c)
        if kind == "S->R":
            W, c = rng.normal(size=(in_s, 1)), rng.normal(size=1)
            return lambda x: 3.0 * np.tanh(x @ W + c)
        if kind == "SxZ->R":
            W, c = rng.normal(size=(in_s + action_dim, 1)), rng.normal(size=1)
            return lambda x: 5.0 * np.sin(x @ W + c)
        if kind == "S->Z":
            W, c = rng.normal(size=(in_s, action_dim)), rng.normal(size=action_dim)
            return lambda x: np.tanh(x @ W + c)
        W, c = rng.normal(size=(in_s, 2 * action_dim)), rng.normal(size=2 * action_dim)
        return lambda x: np.concatenate([np.tanh(x @ W[:, :action_dim] + c[:action_dim]),
                                         -0.5 + 0.5 * np.tanh(x @ W[:, action_dim:] + c[action_dim:])], axis=1)

    nets, stubs = {}, {}
    for key, sig in sorted(kinds.items()):
        kind = {"S->Zmean": "S->Gauss", "S->Zlogstd": "S->Gauss"}.get(sig, sig)
        fn = make_fn(kind)
        nets[key] = fn
        stubs[key] = StubNet(kind, fn, action_dim=action_dim)
    s = rng.normal(size=(batch, state_dim))
    s2 = rng.normal(size=(batch, state_dim))
    if continuous:
        a = rng.uniform(-1, 1, size=(batch, action_dim))
    else:
        a = rng.integers(0, n_actions, size=(batch, 1))
    st = StubBindings(
        nets, s, a, rng.normal(size=batch), (rng.random(batch) < 0.2).astype(float), s2, hp,
        adv=rng.normal(size=batch),
        xi=rng.normal(size=(batch, action_dim)) if continuous else None,
        eps_noise=hp.td3_sigma * rng.normal(size=(batch, action_dim)) if continuous else None,
    )
    return st, stubs
