"""Operator semantics: forward kernels, vector-Jacobian products and signatures.

Every payload is a 2-D float64 array ``(rows, width)``: ``rows`` is the batch
length B for batched values and 1 otherwise, so numpy broadcasting implements
the "repeat the unbatched operand" rule. Widths: R -> 1, ListR -> |A|,
S -> state width, Z -> 1 (discrete index, int64) or action width (continuous).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.signal import lfilter

from pgdag.graph_ir import DType

DIV_EPS = 1e-8
LOG_EPS = 1e-8
LOGSTD_MIN, LOGSTD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class EvaluationError(Exception):
    pass


class ShapeMismatch(EvaluationError):
    pass


class InvalidBounds(EvaluationError):
    pass


class NonDifferentiable(EvaluationError):
    pass


class UnsupportedHead(EvaluationError):
    pass


@dataclass(frozen=True)
class Value:
    dtype: DType
    data: np.ndarray
    batched: bool = False

    @property
    def batch(self) -> int | None:
        return self.data.shape[0] if self.batched else None

    @classmethod
    def scalar(cls, x: float) -> "Value":
        return cls(DType.R, np.array([[float(x)]]))

    @classmethod
    def batch_of(cls, dtype: DType, data) -> "Value":
        arr = np.asarray(data)
        if arr.ndim == 1:
            arr = arr[:, None]
        return cls(dtype, arr, True)


@dataclass(frozen=True)
class Overload:
    inputs: tuple[DType, ...]
    output: DType
    ctx: str = "any"


@dataclass(frozen=True)
class OpSignature:
    op_id: str
    overloads: tuple[Overload, ...]
    forward: Callable
    vjp: Callable
    differentiable: bool = True

    @property
    def arities(self) -> set[int]:
        return {len(o.inputs) for o in self.overloads}

    def resolve(self, inputs: tuple[DType, ...], ctx: str) -> DType | None:
        for o in self.overloads:
            if o.inputs == inputs and (o.ctx == "any" or o.ctx == ctx):
                return o.output
        return None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(ax for ax, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def _guard_den(b):
    return np.where(b >= 0, np.maximum(b, DIV_EPS), np.minimum(b, -DIV_EPS))


def _div_vjp(ins, out, g):
    a, b = ins
    den = _guard_den(b)
    ga = g / den
    gb = np.where(np.abs(b) >= DIV_EPS, -g * a / (den * den), 0.0)
    return [unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)]


def _binary(fwd, da, db):
    def vjp(ins, out, g):
        a, b = ins
        return [unbroadcast(g * da(a, b, out), a.shape), unbroadcast(g * db(a, b, out), b.shape)]

    return fwd, vjp


def _min_vjp(ins, out, g):
    a, b = ins
    to_a = a <= b  # ties go to the first operand
    return [unbroadcast(np.where(to_a, g, 0.0), a.shape), unbroadcast(np.where(to_a, 0.0, g), b.shape)]


def _max_vjp(ins, out, g):
    a, b = ins
    to_a = a >= b
    return [unbroadcast(np.where(to_a, g, 0.0), a.shape), unbroadcast(np.where(to_a, 0.0, g), b.shape)]


def _unary(fwd, deriv):
    return fwd, lambda ins, out, g: [g * deriv(ins[0], out)]


def _mean_batch(ins):
    return ins[0].mean(axis=0, keepdims=True)


def _mean_batch_vjp(ins, out, g):
    x = ins[0]
    return [np.broadcast_to(g / x.shape[0], x.shape).copy()]


def _select_list(ins):
    lst, idx = ins
    rows = max(lst.shape[0], idx.shape[0])
    lst = np.broadcast_to(lst, (rows, lst.shape[1]))
    idx = np.broadcast_to(idx, (rows, 1)).astype(np.int64)
    return np.take_along_axis(lst, idx, axis=1)


def _select_list_vjp(ins, out, g):
    lst, idx = ins
    rows = max(lst.shape[0], idx.shape[0])
    idx = np.broadcast_to(idx, (rows, 1)).astype(np.int64)
    full = np.zeros((rows, lst.shape[1]))
    np.put_along_axis(full, idx, np.broadcast_to(g, (rows, 1)), axis=1)
    return [unbroadcast(full, lst.shape), None]


def _max_list_vjp(ins, out, g):
    x = ins[0]
    full = np.zeros_like(x)
    np.put_along_axis(full, x.argmax(axis=1)[:, None], g, axis=1)
    return [full]


def _argmax_list(ins):
    return ins[0].argmax(axis=1)[:, None].astype(np.int64)


def _no_grad(ins, out, g):
    return [None for _ in ins]


def _dot(ins):
    a, b = ins
    return (a * b).sum(axis=1, keepdims=True)


def _dot_vjp(ins, out, g):
    a, b = ins
    return [unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)]


def _softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_vjp(ins, out, g):
    return [out * (g - (g * out).sum(axis=1, keepdims=True))]


def _logsumexp_rows(x):
    m = x.max(axis=1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))


# SumAndDiscount ------------------------------------------------------------

def sum_and_discount(v: np.ndarray, b) -> np.ndarray:
    """Discounted suffix sums along axis 0: out[i] = sum_k>=i v[k] * b**(k-i).

    ``b`` may be a scalar or a per-position array; the per-position form
    evaluates out[i] = v[i] + b[i] * out[i+1], so a zero in ``b`` cuts the sum
    (used for episode boundaries).
    """
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    b = np.asarray(b, dtype=np.float64)
    if b.size == 1:
        out = lfilter([1.0], [1.0, -float(b.reshape(-1)[0])], v[::-1], axis=0)[::-1]
    else:
        b = np.broadcast_to(b.reshape(-1, 1), (v.shape[0], 1))
        out = np.empty_like(v)
        acc = np.zeros(v.shape[1])
        for i in range(v.shape[0] - 1, -1, -1):
            acc = v[i] + b[i] * acc
            out[i] = acc
    out = np.ascontiguousarray(out)
    return out[:, 0] if squeeze else out


def _sad_forward(ins):
    v, b = ins
    rows = max(v.shape[0], b.shape[0])
    v = np.broadcast_to(v, (rows, v.shape[1]))
    return sum_and_discount(v, b)


def _sad_vjp(ins, out, g):
    v, b = ins
    rows = out.shape[0]
    bb = np.broadcast_to(b, (rows, 1))[:, 0]
    # c[k] = g[k] + b[k-1] * c[k-1]: total cotangent of each suffix sum
    if b.shape[0] == 1:
        c = lfilter([1.0], [1.0, -float(bb[0])], g, axis=0)
    else:
        c = np.empty_like(g)
        acc = np.zeros(g.shape[1])
        for k in range(rows):
            acc = g[k] + (bb[k - 1] * acc if k > 0 else 0.0)
            c[k] = acc
    nxt = np.zeros_like(out)
    nxt[:-1] = out[1:]
    gb = c * nxt
    return [unbroadcast(c, v.shape), unbroadcast(gb, b.shape)]


# Clip -----------------------------------------------------------------------

def clip(x, lo, hi):
    x, lo, hi = (np.asarray(t, dtype=np.float64) for t in (x, lo, hi))
    if np.any(lo > hi):
        raise InvalidBounds(f"clip lower bound exceeds upper bound")
    return np.minimum(np.maximum(x, lo), hi)


def _clip_forward(ins):
    return clip(*ins)


def _clip_vjp(ins, out, g):
    x, lo, hi = ins
    inside = (x > lo) & (x < hi)
    at_lo = (x <= lo)
    at_hi = (x >= hi) & ~at_lo
    return [unbroadcast(np.where(inside, g, 0.0), x.shape),
            unbroadcast(np.where(at_lo, g, 0.0), lo.shape),
            unbroadcast(np.where(at_hi, g, 0.0), hi.shape)]


# Squashing ------------------------------------------------------------------

def squashing(mu, logstd, xi):
    """Reparameterized squashed Gaussian sample tanh(mu + exp(logstd) * xi)."""
    return np.tanh(np.asarray(mu) + np.exp(logstd) * np.asarray(xi))


def _squash_forward(ins):
    return squashing(*ins)


def _squash_vjp(ins, out, g):
    mu, logstd, xi = ins
    gu = g * (1.0 - out * out)
    std = np.exp(logstd)
    return [unbroadcast(gu, mu.shape), unbroadcast(gu * std * xi, logstd.shape),
            unbroadcast(gu * std, xi.shape)]


# Probability heads ----------------------------------------------------------

def categorical_prob(logits, action, log: bool = False):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    action = np.asarray(action).reshape(-1, 1).astype(np.int64)
    rows = max(logits.shape[0], action.shape[0])
    logits = np.broadcast_to(logits, (rows, logits.shape[1]))
    action = np.broadcast_to(action, (rows, 1))
    logp = np.take_along_axis(logits, action, axis=1) - _logsumexp_rows(logits)
    return logp if log else np.exp(logp)


def _cat_vjp(log: bool):
    def vjp(ins, out, g):
        logits, action = ins
        rows = out.shape[0]
        p = _softmax_rows(np.broadcast_to(logits, (rows, logits.shape[1])))
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.broadcast_to(action, (rows, 1)).astype(np.int64), 1.0, axis=1)
        dlogp = onehot - p
        scale = g if log else g * out
        return [unbroadcast(scale * dlogp, logits.shape), None]

    return vjp


def gaussian_logprob(mean, logstd, action):
    mean, logstd, action = (np.asarray(t, dtype=np.float64) for t in (mean, logstd, action))
    z = (action - mean) * np.exp(-logstd)
    return (-0.5 * z * z - logstd - _HALF_LOG_2PI).sum(axis=-1, keepdims=True)


def _gauss_vjp(log: bool):
    def vjp(ins, out, g):
        mean, logstd, action = ins
        inv_var = np.exp(-2.0 * logstd)
        diff = action - mean
        scale = g if log else g * out
        return [unbroadcast(scale * diff * inv_var, mean.shape),
                unbroadcast(scale * (diff * diff * inv_var - 1.0), logstd.shape),
                unbroadcast(-scale * diff * inv_var, action.shape)]

    return vjp


_ATANH_LIMIT = 1.0 - 1e-15


def _log1m_tanh2(u):
    # log(1 - tanh(u)^2) in the overflow-free form 2*(log 2 - u - softplus(-2u))
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_logprob(mean, logstd, squashed_action):
    """Log-density of tanh(u), u ~ N(mean, exp(logstd)^2), evaluated at a squashed action."""
    a = np.clip(np.asarray(squashed_action, dtype=np.float64), -_ATANH_LIMIT, _ATANH_LIMIT)
    u = np.arctanh(a)
    return gaussian_logprob(mean, logstd, u) - _log1m_tanh2(u).sum(axis=-1, keepdims=True)


def _squashed_vjp(log: bool):
    def vjp(ins, out, g):
        mean, logstd, a = ins
        ac = np.clip(a, -_ATANH_LIMIT, _ATANH_LIMIT)
        u = np.arctanh(ac)
        inv_var = np.exp(-2.0 * logstd)
        diff = u - mean
        scale = g if log else g * out
        dlogp_du = -diff * inv_var + 2.0 * np.tanh(u)
        inside = np.abs(a) < _ATANH_LIMIT
        ga = np.where(inside, scale * dlogp_du / (1.0 - ac * ac), 0.0)
        return [unbroadcast(scale * diff * inv_var, mean.shape),
                unbroadcast(scale * (diff * diff * inv_var - 1.0), logstd.shape),
                unbroadcast(ga, a.shape)]

    return vjp


def prob(head: str, *args, mode: str = "density"):
    """Probability (or log-probability) of an action under a policy head.

    ``head`` is ``"categorical"`` (logits, action), ``"gaussian"`` or
    ``"squashed"`` (mean, logstd, action).
    """
    log = mode == "log-density"
    if mode not in ("density", "log-density"):
        raise ValueError(f"unknown mode {mode!r}")
    if head == "categorical":
        return categorical_prob(*args, log=log)
    if head == "gaussian":
        lp = gaussian_logprob(*args)
    elif head == "squashed":
        lp = squashed_logprob(*args)
    else:
        raise UnsupportedHead(head)
    return lp if log else np.exp(lp)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

R, Z, S, LR = DType.R, DType.Z, DType.S, DType.ListR

_ELEMENTWISE_BINARY = (
    Overload((R, R), R),
    Overload((LR, LR), LR, "discrete"),
    Overload((R, LR), LR, "discrete"),
    Overload((LR, R), LR, "discrete"),
    Overload((Z, Z), Z, "continuous"),
    Overload((R, Z), Z, "continuous"),
    Overload((Z, R), Z, "continuous"),
)
_ELEMENTWISE_UNARY = (
    Overload((R,), R),
    Overload((LR,), LR, "discrete"),
    Overload((Z,), Z, "continuous"),
)
_CONT3 = (Overload((Z, Z, Z), R, "continuous"),)

REGISTRY: dict[str, OpSignature] = {}


def register(sig: OpSignature) -> OpSignature:
    REGISTRY[sig.op_id] = sig
    return sig


def _reg(op_id, overloads, pair, differentiable=True):
    fwd, vjp = pair
    register(OpSignature(op_id, tuple(overloads), fwd, vjp, differentiable))


_reg("Add", _ELEMENTWISE_BINARY,
     _binary(lambda i: i[0] + i[1], lambda a, b, o: 1.0, lambda a, b, o: 1.0))
_reg("Subtract", _ELEMENTWISE_BINARY,
     _binary(lambda i: i[0] - i[1], lambda a, b, o: 1.0, lambda a, b, o: -1.0))
_reg("Multiply", _ELEMENTWISE_BINARY,
     _binary(lambda i: i[0] * i[1], lambda a, b, o: b, lambda a, b, o: a))
_reg("Div", _ELEMENTWISE_BINARY, (lambda i: i[0] / _guard_den(i[1]), _div_vjp))
_reg("Min", _ELEMENTWISE_BINARY, (lambda i: np.minimum(i[0], i[1]), _min_vjp))
_reg("Max", _ELEMENTWISE_BINARY, (lambda i: np.maximum(i[0], i[1]), _max_vjp))
_reg("MinPair", (Overload((R, R), R),), (lambda i: np.minimum(i[0], i[1]), _min_vjp))
_reg("Neg", _ELEMENTWISE_UNARY, _unary(lambda i: -i[0], lambda x, o: -1.0))
_reg("Square", _ELEMENTWISE_UNARY, _unary(lambda i: i[0] * i[0], lambda x, o: 2.0 * x))
_reg("Log", _ELEMENTWISE_UNARY,
     _unary(lambda i: np.log(np.maximum(i[0], LOG_EPS)),
            lambda x, o: np.where(x > LOG_EPS, 1.0 / np.maximum(x, LOG_EPS), 0.0)))
_reg("Exp", _ELEMENTWISE_UNARY, _unary(lambda i: np.exp(i[0]), lambda x, o: o))
_reg("Abs", _ELEMENTWISE_UNARY, _unary(lambda i: np.abs(i[0]), lambda x, o: np.sign(x)))
_reg("MeanBatch", _ELEMENTWISE_UNARY, (_mean_batch, _mean_batch_vjp))
_reg("SelectList", (Overload((LR, Z), R, "discrete"),), (_select_list, _select_list_vjp))
_reg("MaxList", (Overload((LR,), R, "discrete"),),
     (lambda i: i[0].max(axis=1, keepdims=True), _max_list_vjp))
_reg("ArgMaxList", (Overload((LR,), Z, "discrete"),), (_argmax_list, _no_grad), differentiable=False)
_reg("DotProduct", (Overload((LR, LR), R, "discrete"),), (_dot, _dot_vjp))
_reg("Softmax", (Overload((LR,), LR, "discrete"),), (lambda i: _softmax_rows(i[0]), _softmax_vjp))
_reg("SumAndDiscount", (Overload((R, R), R),), (_sad_forward, _sad_vjp))
_reg("Clip", (Overload((R, R, R), R), Overload((LR, R, R), LR, "discrete"),
              Overload((Z, R, R), Z, "continuous")), (_clip_forward, _clip_vjp))
_reg("Squashing", (Overload((Z, Z, Z), Z, "continuous"),), (_squash_forward, _squash_vjp))
_reg("Prob", (Overload((LR, Z), R, "discrete"),) + _CONT3,
     (lambda i: categorical_prob(*i) if len(i) == 2 else np.exp(gaussian_logprob(*i)),
      lambda ins, out, g: (_cat_vjp(False) if len(ins) == 2 else _gauss_vjp(False))(ins, out, g)))
_reg("LogProb", (Overload((LR, Z), R, "discrete"),) + _CONT3,
     (lambda i: categorical_prob(*i, log=True) if len(i) == 2 else gaussian_logprob(*i),
      lambda ins, out, g: (_cat_vjp(True) if len(ins) == 2 else _gauss_vjp(True))(ins, out, g)))
_reg("ProbSquashed", _CONT3, (lambda i: np.exp(squashed_logprob(*i)), _squashed_vjp(False)))
_reg("LogProbSquashed", _CONT3, (lambda i: squashed_logprob(*i), _squashed_vjp(True)))

# Input ports that carry discrete indices never receive cotangents.
INTEGER_OUTPUT_OPS = frozenset({"ArgMaxList"})


def forward_kernel(op_id: str, arrays: Sequence[np.ndarray]) -> np.ndarray:
    return REGISTRY[op_id].forward(list(arrays))


def vjp_kernel(op_id: str, arrays: Sequence[np.ndarray], out: np.ndarray, cot: np.ndarray):
    sig = REGISTRY[op_id]
    if not sig.differentiable:
        raise NonDifferentiable(op_id)
    return sig.vjp(list(arrays), out, cot)


# ---------------------------------------------------------------------------
# Value-level API
# ---------------------------------------------------------------------------

def _check_batches(values: Sequence[Value]) -> None:
    sizes = {v.data.shape[0] for v in values if v.batched}
    if len(sizes) > 1:
        raise ShapeMismatch(f"batched operands disagree on length: {sorted(sizes)}")


def eval_primitive(op_id: str, inputs: Sequence[Value], ctx: str | None = None) -> Value:
    sig = REGISTRY[op_id]
    types = tuple(v.dtype for v in inputs)
    ctxs = [ctx] if ctx else ["discrete", "continuous"]
    out_t = next((t for c in ctxs if (t := sig.resolve(types, c)) is not None), None)
    if out_t is None:
        raise TypeError(f"{op_id} does not accept {types}")
    _check_batches(inputs)
    out = sig.forward([v.data for v in inputs])
    batched = any(v.batched for v in inputs) and op_id != "MeanBatch"
    return Value(out_t, out, batched)


def vjp(op_id: str, inputs: Sequence[Value], cotangent) -> list:
    arrays = [v.data for v in inputs]
    out = REGISTRY[op_id].forward(arrays)
    g = np.broadcast_to(np.asarray(cotangent, dtype=np.float64), out.shape).astype(np.float64)
    return vjp_kernel(op_id, arrays, out, g)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian-iid"
    sigma: float = 1.0
    stream: int = 0


class NoiseStream:
    """Counter-based Gaussian draws keyed by (run seed, stream id, step)."""

    def __init__(self, seed: int = 0, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)

    def draw(self, spec: NoiseSpec, shape: tuple[int, ...]) -> np.ndarray:
        if spec.kind != "gaussian-iid":
            raise ValueError(f"unsupported noise kind {spec.kind!r}")
        rng = np.random.default_rng([self.seed, spec.stream, self.step])
        return spec.sigma * rng.standard_normal(shape)

    def advance(self) -> None:
        self.step += 1
