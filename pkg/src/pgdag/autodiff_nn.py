"""Reverse-mode evaluation of loss graphs and the networks behind Parameter nodes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from pgdag import ops
from pgdag.envs import EnvDescriptor, HyperParams
from pgdag.graph_ir import NOISE_SYMBOLS, PARAM_SIGNATURES, Graph, topo_order


class MissingBinding(KeyError):
    pass


class NonFiniteLoss(ops.EvaluationError):
    pass


class NonDifferentiablePath(ops.EvaluationError):
    pass


class UnknownSignature(ValueError):
    pass


NET_KINDS = ("S->R", "S->ListR", "SxZ->R", "S->Z", "S->Gauss")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class Network:
    """Common head handling; subclasses provide ``_body`` and ``_body_backward``."""

    kind: str
    params: dict[str, np.ndarray]
    bounds: tuple[float, float] = (-1.0, 1.0)
    action_dim: int = 1

    def forward(self, s: np.ndarray, a: np.ndarray | None = None, port: str | None = None):
        if self.kind == "SxZ->R":
            rows = max(s.shape[0], a.shape[0])
            x = np.concatenate([np.broadcast_to(s, (rows, s.shape[1])),
                                np.broadcast_to(a, (rows, a.shape[1]))], axis=1)
        else:
            x = s
        z, body_cache = self._body(x)
        if self.kind == "S->Z":
            lo, hi = self.bounds
            t = np.tanh(z)
            out = lo + 0.5 * (t + 1.0) * (hi - lo)
        elif self.kind == "S->Gauss":
            d = self.action_dim
            if port == "mean":
                out = z[:, :d]
            elif port == "logstd":
                out = np.clip(z[:, d:], ops.LOGSTD_MIN, ops.LOGSTD_MAX)
            else:
                raise ValueError("Gaussian head needs port 'mean' or 'logstd'")
        else:
            out = z
        return out, (body_cache, z, port, s.shape, None if a is None else a.shape)

    def backward(self, cache, gout: np.ndarray):
        body_cache, z, port, s_shape, a_shape = cache
        if self.kind == "S->Z":
            lo, hi = self.bounds
            t = np.tanh(z)
            gz = gout * 0.5 * (hi - lo) * (1.0 - t * t)
        elif self.kind == "S->Gauss":
            d = self.action_dim
            gz = np.zeros_like(z)
            if port == "mean":
                gz[:, :d] = gout
            else:
                raw = z[:, d:]
                inside = (raw > ops.LOGSTD_MIN) & (raw < ops.LOGSTD_MAX)
                gz[:, d:] = np.where(inside, gout, 0.0)
        else:
            gz = gout
        grads, gx = self._body_backward(body_cache, gz)
        if self.kind == "SxZ->R":
            ds = s_shape[1]
            gs = ops.unbroadcast(gx[:, :ds], s_shape)
            ga = ops.unbroadcast(gx[:, ds:], a_shape)
            return grads, gs, ga
        return grads, gx, None

    def __call__(self, s, a=None, port=None):
        return self.forward(np.atleast_2d(s), None if a is None else np.atleast_2d(a), port)[0]

    def copy(self) -> "Network":
        raise NotImplementedError


class MLP(Network):
    def __init__(self, kind: str, in_dim: int, out_dim: int, hidden: tuple[int, ...] = (64, 64),
                 rng: np.random.Generator | None = None, bounds=(-1.0, 1.0), action_dim: int = 1,
                 zero_head: bool = True):
        if kind not in NET_KINDS:
            raise UnknownSignature(kind)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        self.bounds = (float(bounds[0]), float(bounds[1]))
        self.action_dim = action_dim
        self.sizes = (in_dim, *hidden, out_dim)
        self.params = {}
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            lim = 1.0 / math.sqrt(fan_in)
            if zero_head and i == n_layers - 1:
                self.params[f"W{i}"] = np.zeros((fan_in, fan_out))
                self.params[f"b{i}"] = np.zeros(fan_out)
            else:
                self.params[f"W{i}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
                self.params[f"b{i}"] = rng.uniform(-lim, lim, size=fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def _body(self, x):
        hs = [x]
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < last:
                h = np.tanh(h)
            hs.append(h)
        return h, hs

    def _body_backward(self, hs, gz):
        grads = {}
        g = gz
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (1.0 - hs[i + 1] ** 2)
            grads[f"W{i}"] = hs[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        return grads, g

    def copy(self) -> "MLP":
        new = object.__new__(MLP)
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new


class StubNet(Network):
    """Fixed function standing in for a network (no weights), used by oracle checks.

    ``fn`` maps the network input (state, or state||action) to the raw head
    output; it is used verbatim, without bounding or logstd clamping.
    """

    def __init__(self, kind: str, fn: Callable, action_dim: int = 1):
        if kind not in NET_KINDS:
            raise UnknownSignature(kind)
        self.kind = kind
        self.fn = fn
        self.params = {}
        self.action_dim = action_dim

    def forward(self, s, a=None, port=None):
        x = s
        if self.kind == "SxZ->R":
            rows = max(s.shape[0], a.shape[0])
            x = np.concatenate([np.broadcast_to(s, (rows, s.shape[1])),
                                np.broadcast_to(a, (rows, a.shape[1]))], axis=1)
        out = np.asarray(self.fn(x), dtype=np.float64)
        if self.kind == "S->Gauss":
            d = self.action_dim
            out = out[:, :d] if port == "mean" else out[:, d:]
        return out, (s.shape, None if a is None else a.shape)

    def backward(self, cache, gout):
        s_shape, a_shape = cache
        return {}, np.zeros(s_shape), None if a_shape is None else np.zeros(a_shape)

    def copy(self) -> "StubNet":
        return self


def constant_stub(kind: str, value, action_dim: int = 1) -> StubNet:
    val = np.atleast_1d(np.asarray(value, dtype=np.float64))
    return StubNet(kind, lambda x: np.broadcast_to(val, (x.shape[0], val.size)).copy(), action_dim=action_dim)


def net_dims(kind: str, desc: EnvDescriptor) -> tuple[int, int]:
    ds, da = desc.state_dim, desc.action_width
    return {
        "S->R": (ds, 1),
        "S->ListR": (ds, desc.n_actions),
        "SxZ->R": (ds + da, 1),
        "S->Z": (ds, da),
        "S->Gauss": (ds, 2 * da),
    }[kind]


def mlp_init(seed: int, kind: str, desc: EnvDescriptor, hidden=(64, 64), zero_head: bool = True) -> MLP:
    if kind not in NET_KINDS:
        raise UnknownSignature(kind)
    if kind == "S->ListR" and desc.action_kind != "discrete":
        raise UnknownSignature(f"{kind} needs a discrete action space")
    if kind in ("SxZ->R", "S->Z", "S->Gauss") and desc.action_kind != "continuous":
        raise UnknownSignature(f"{kind} needs a continuous action space")
    in_dim, out_dim = net_dims(kind, desc)
    return MLP(kind, in_dim, out_dim, hidden, np.random.default_rng(seed),
               bounds=(desc.a_low, desc.a_high), action_dim=desc.action_width, zero_head=zero_head)


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

@dataclass
class ParameterStore:
    entries: dict[str, Network] = field(default_factory=dict)
    target_links: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Network:
        return self.entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def keys(self):
        return self.entries.keys()

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.entries.items()}, dict(self.target_links))

    def flat(self, key: str) -> np.ndarray:
        net = self.entries[key]
        return np.concatenate([net.params[n].ravel() for n in sorted(net.params)]) if net.params else np.zeros(0)


def make_store(store_kinds: Mapping[str, str], desc: EnvDescriptor, seed: int,
               target_links: Mapping[str, str] | None = None, zero_head: bool = True) -> ParameterStore:
    """Create one MLP per store key; targets start as exact copies of their sources."""
    target_links = dict(target_links or {})
    store = ParameterStore(target_links=target_links)
    for i, key in enumerate(sorted(store_kinds)):
        if key in target_links:
            continue
        store.entries[key] = mlp_init(seed * 1009 + i, store_kinds[key], desc, zero_head=zero_head)
    for tgt, src in target_links.items():
        if src not in store.entries:
            store.entries[src] = mlp_init(seed * 1009 + 977, store_kinds[src], desc, zero_head=zero_head)
        store.entries[tgt] = store.entries[src].copy()
    return store


def sgd_step(store: ParameterStore, grads: Mapping[str, Mapping[str, np.ndarray]], lr: float,
             max_norm: float | None = 10.0) -> ParameterStore:
    """In-place w <- w - lr * grad, after optional global-norm clipping."""
    sq = 0.0
    for g in grads.values():
        for name, arr in g.items():
            sq += float(np.sum(arr * arr))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise NonFiniteLoss("non-finite gradient")
    scale = lr
    if max_norm is not None and norm > max_norm:
        scale = lr * max_norm / norm
    for key, g in grads.items():
        params = store.entries[key].params
        for name, arr in g.items():
            if params[name].shape != arr.shape:
                raise ops.ShapeMismatch(f"{key}.{name}: gradient {arr.shape} vs weight {params[name].shape}")
            params[name] -= scale * arr
    return store


def polyak_update(store: ParameterStore, pair: tuple[str, str], tau: float) -> ParameterStore:
    """target <- tau * online + (1 - tau) * target for pair = (target, online)."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    tgt, src = pair
    tp, sp = store.entries[tgt].params, store.entries[src].params
    for name in sp:
        if tp[name].shape != sp[name].shape:
            raise ops.ShapeMismatch(f"{tgt}.{name} vs {src}.{name}")
        tp[name] *= 1.0 - tau
        tp[name] += tau * sp[name]
    return store


def hard_copy(store: ParameterStore, pair: tuple[str, str]) -> ParameterStore:
    tgt, src = pair
    tp, sp = store.entries[tgt].params, store.entries[src].params
    for name in sp:
        if tp[name].shape != sp[name].shape:
            raise ops.ShapeMismatch(f"{tgt}.{name} vs {src}.{name}")
        tp[name][...] = sp[name]
    return store


# Checkpoint format: JSON object
#   {"format": "pgdag-weights", "version": 1, "target_links": {...},
#    "entries": {key: {"kind", "sizes", "bounds", "action_dim",
#                      "params": {name: {"shape": [...], "data": [row-major floats]}}}}}

def save_checkpoint(store: ParameterStore, path) -> None:
    entries = {}
    for key, net in store.entries.items():
        if not isinstance(net, MLP):
            raise TypeError(f"{key}: only MLP entries can be checkpointed")
        entries[key] = {
            "kind": net.kind,
            "sizes": list(net.sizes),
            "bounds": list(net.bounds),
            "action_dim": net.action_dim,
            "params": {n: {"shape": list(a.shape), "data": a.ravel().tolist()} for n, a in net.params.items()},
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"format": "pgdag-weights", "version": 1, "target_links": store.target_links,
                   "entries": entries}, fh)


def load_checkpoint(path) -> ParameterStore:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format") != "pgdag-weights":
        raise ValueError("not a pgdag weight checkpoint")
    store = ParameterStore(target_links=dict(data.get("target_links", {})))
    for key, e in data["entries"].items():
        sizes = e["sizes"]
        net = MLP(e["kind"], sizes[0], sizes[-1], tuple(sizes[1:-1]), bounds=tuple(e["bounds"]),
                  action_dim=e["action_dim"])
        for n, rec in e["params"].items():
            net.params[n] = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        store.entries[key] = net
    return store


# ---------------------------------------------------------------------------
# Interpretation
# ---------------------------------------------------------------------------

def _hp_labels(hp: HyperParams) -> dict[str, float]:
    return {
        "1+eps": 1.0 + hp.eps_ppo,
        "1-eps": 1.0 - hp.eps_ppo,
        "alpha": hp.alpha_sac,
        "c": hp.td3_c,
        "-c": -hp.td3_c,
        "sigma": hp.td3_sigma,
        "gamma": hp.gamma,
        "lambda": hp.lam,
    }


def resolve_constant(node, hp: HyperParams, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    if node.label:
        if node.label in bindings:
            return np.asarray(bindings[node.label], dtype=np.float64).reshape(-1, 1)
        labels = _hp_labels(hp)
        if node.label in labels:
            return np.array([[labels[node.label]]])
    return np.array([[float(node.value)]])


@dataclass
class Tape:
    graph: Graph
    order: list[int]
    values: dict[int, np.ndarray]
    caches: dict[int, tuple]
    store: ParameterStore
    loss: float
    stream_offset: int = 0


def _noise_shape(bindings: Mapping[str, np.ndarray]) -> tuple[int, int]:
    rows = max((np.shape(bindings[k])[0] for k in ("s_t", "s_tp1", "r_t") if k in bindings), default=1)
    if "a_t" in bindings:
        width = np.shape(bindings["a_t"])[1]
    elif "action_dim" in bindings:
        width = int(np.asarray(bindings["action_dim"]).reshape(-1)[0])
    else:
        width = 1
    return rows, width


def evaluate_loss(g: Graph, store: ParameterStore, batch, hp: HyperParams | None = None,
                  noise: ops.NoiseStream | None = None, stream_offset: int = 0) -> tuple[float, Tape]:
    """Interpret ``g`` on a batch (TransitionBatch or symbol->array mapping).

    The Output value is mean-reduced over the batch axis. Noise inputs not
    present in the bindings are drawn from ``noise`` (one draw per node).
    """
    hp = hp or HyperParams()
    bindings = batch.bindings(hp) if hasattr(batch, "bindings") else dict(batch)
    noise = noise or ops.NoiseStream(0)
    order = topo_order(g)
    values: dict[int, np.ndarray] = {}
    caches: dict[int, tuple] = {}
    with np.errstate(all="ignore"):
        for nid in order:
            node = g.nodes[nid]
            if node.kind == "input":
                sym = node.symbol
                if sym in bindings:
                    val = np.asarray(bindings[sym])
                    if val.ndim < 2:
                        val = val.reshape(-1, 1)
                elif sym in NOISE_SYMBOLS:
                    sigma = hp.td3_sigma if sym == "eps_noise" else 1.0
                    val = noise.draw(ops.NoiseSpec(sigma=sigma, stream=stream_offset + nid), _noise_shape(bindings))
                elif sym == "gamma":
                    val = np.array([[hp.gamma]])
                elif sym == "lambda":
                    val = np.array([[hp.lam]])
                else:
                    raise MissingBinding(sym)
                values[nid] = val
            elif node.kind == "constant":
                values[nid] = resolve_constant(node, hp, bindings)
            elif node.kind == "parameter":
                if node.store_key not in store:
                    raise MissingBinding(node.store_key)
                net = store[node.store_key]
                sig = PARAM_SIGNATURES[node.signature]
                if net.kind != sig.net_kind:
                    raise ops.ShapeMismatch(f"store {node.store_key} is {net.kind}, node wants {sig.net_kind}")
                port = {"S->Zmean": "mean", "S->Zlogstd": "logstd"}.get(node.signature)
                ins = [values[i] for i in node.inputs]
                out, cache = net.forward(ins[0], ins[1] if len(ins) > 1 else None, port)
                values[nid] = out
                caches[nid] = cache
            elif node.kind == "operation":
                ins = [values[i] for i in node.inputs]
                values[nid] = ops.forward_kernel(node.op, ins)
            else:
                values[nid] = values[node.inputs[0]]
        out = values[g.output_id]
        loss = float(np.mean(out))
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"{g.name}: loss is {loss}")
    return loss, Tape(g, order, values, caches, store, loss, stream_offset)


def _requires_grad(g: Graph, order: list[int], targets: set[str]) -> dict[int, bool]:
    req: dict[int, bool] = {}
    for nid in order:
        node = g.nodes[nid]
        if node.kind in ("input", "constant"):
            req[nid] = False
        elif node.kind == "parameter":
            req[nid] = node.store_key in targets or any(req[i] for i in node.inputs)
        elif node.kind == "operation":
            req[nid] = node.op not in ops.INTEGER_OUTPUT_OPS and any(req[i] for i in node.inputs)
        else:
            req[nid] = req[node.inputs[0]]
    return req


def backward(tape: Tape, targets: Iterable[str]) -> dict[str, dict[str, np.ndarray]]:
    """Exact gradients of the tape's loss for the weights of each target store.

    Stores outside ``targets`` are constants: activations still flow through
    them (e.g. Q(s, mu(s))) but their weights receive nothing.
    """
    g = tape.graph
    targets = set(targets)
    for key in sorted(targets):
        if not _requires_grad(g, tape.order, {key})[g.output_id]:
            raise NonDifferentiablePath(f"{g.name}: no differentiable path from Output to {key}")
    req = _requires_grad(g, tape.order, targets)
    out_id = g.output_id
    src = g.nodes[out_id].inputs[0]
    out_val = tape.values[src]
    cot: dict[int, np.ndarray] = {src: np.full(out_val.shape, 1.0 / out_val.size)}
    grads: dict[str, dict[str, np.ndarray]] = {}
    with np.errstate(all="ignore"):
        for nid in reversed(tape.order):
            if nid not in cot or not req[nid]:
                continue
            node = g.nodes[nid]
            gout = cot.pop(nid)
            if node.kind == "parameter":
                net = tape.store[node.store_key]
                pgrads, gs, ga = net.backward(tape.caches[nid], gout)
                if node.store_key in targets:
                    acc = grads.setdefault(node.store_key, {})
                    for name, arr in pgrads.items():
                        acc[name] = acc[name] + arr if name in acc else arr
                in_grads = [gs, ga][: len(node.inputs)]
            elif node.kind == "operation":
                ins = [tape.values[i] for i in node.inputs]
                in_grads = ops.vjp_kernel(node.op, ins, tape.values[nid], gout)
            else:
                continue
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or not req[i]:
                    continue
                cot[i] = cot[i] + gi if i in cot else gi
    return grads


def loss_and_grads(g: Graph, store: ParameterStore, batch, hp: HyperParams | None = None,
                   noise: ops.NoiseStream | None = None, targets: Iterable[str] | None = None):
    loss, tape = evaluate_loss(g, store, batch, hp, noise)
    return loss, backward(tape, targets if targets is not None else {g.loss_target})
