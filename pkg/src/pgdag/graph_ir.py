"""Typed DAG representation of RL loss functions.

A graph is a flat tuple of :class:`Node` records whose ids equal their
position. Edges live on the consumer (``Node.inputs``) and their order is
significant. Graphs are immutable; every editing helper returns a new graph.
"""
from __future__ import annotations

import enum
import heapq
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

SCHEMA_VERSION = 1

NODE_KINDS = ("input", "constant", "parameter", "operation", "output")


class DType(str, enum.Enum):
    S = "S"
    Z = "Z"
    R = "R"
    ListR = "ListR"
    ListS = "ListS"

    def __str__(self) -> str:
        return self.value


# Symbols an Input node may carry. Noise symbols are sampled per evaluation.
INPUT_TYPES: dict[str, DType] = {
    "s_t": DType.S,
    "a_t": DType.Z,
    "r_t": DType.R,
    "d_t": DType.R,
    "s_tp1": DType.S,
    "gamma": DType.R,
    "lambda": DType.R,
    "adv": DType.R,
    "rtg": DType.R,
    "xi": DType.Z,
    "eps_noise": DType.Z,
}
NOISE_SYMBOLS = frozenset({"xi", "eps_noise"})
CONTINUOUS_ONLY_SYMBOLS = NOISE_SYMBOLS


@dataclass(frozen=True)
class ParamSignature:
    inputs: tuple[DType, ...]
    output: DType
    ctx: str  # "any" | "discrete" | "continuous"
    net_kind: str


# Node signature -> (input types, output type, action context, store network kind).
# The Gaussian head is one network exposed through two single-output ports.
PARAM_SIGNATURES: dict[str, ParamSignature] = {
    "S->R": ParamSignature((DType.S,), DType.R, "any", "S->R"),
    "S->ListR": ParamSignature((DType.S,), DType.ListR, "discrete", "S->ListR"),
    "SxZ->R": ParamSignature((DType.S, DType.Z), DType.R, "continuous", "SxZ->R"),
    "S->Z": ParamSignature((DType.S,), DType.Z, "continuous", "S->Z"),
    "S->Zmean": ParamSignature((DType.S,), DType.Z, "continuous", "S->Gauss"),
    "S->Zlogstd": ParamSignature((DType.S,), DType.Z, "continuous", "S->Gauss"),
}


class GraphError(Exception):
    pass


class CycleDetected(GraphError):
    def __init__(self, nodes: Iterable[int]):
        self.nodes = sorted(set(nodes))
        super().__init__(f"cycle through nodes {self.nodes}")


class TypeMismatch(GraphError):
    def __init__(self, node_id: int, message: str):
        self.node_id = node_id
        super().__init__(f"node {node_id}: {message}")


class ParseError(GraphError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class SchemaVersionMismatch(ParseError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...] = ()
    symbol: str | None = None
    value: float | None = None
    label: str | None = None
    op: str | None = None
    store_key: str | None = None
    signature: str | None = None

    def describe(self) -> str:
        if self.kind == "input":
            return f"Input {self.symbol}"
        if self.kind == "constant":
            return f"Const {self.label}" if self.label else f"Const {self.value:g}"
        if self.kind == "parameter":
            return f"{self.store_key} [{self.signature}]"
        if self.kind == "operation":
            return str(self.op)
        return "Output"


@dataclass(frozen=True)
class Graph:
    name: str
    nodes: tuple[Node, ...]
    loss_target: str
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> Node:
        return self.nodes[node_id]

    @property
    def action_space(self) -> str | None:
        return self.metadata.get("action_space")

    @property
    def output_id(self) -> int:
        outs = [n.id for n in self.nodes if n.kind == "output"]
        if len(outs) != 1:
            raise GraphError(f"expected one Output node, found {len(outs)}")
        return outs[0]

    def consumers(self) -> dict[int, list[int]]:
        users: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                if i in users:
                    users[i].append(n.id)
        return users

    def store_keys(self) -> set[str]:
        return {n.store_key for n in self.nodes if n.kind == "parameter"}


@dataclass
class ValidationReport:
    ok: bool
    diagnostics: list[tuple[int, str, str]]
    inferred_types: dict[int, DType]

    @property
    def errors(self) -> list[tuple[int, str, str]]:
        return [d for d in self.diagnostics if d[1] == "error"]

    def format(self) -> str:
        return "\n".join(f"node {nid}: {sev}: {msg}" for nid, sev, msg in self.diagnostics)


class GraphBuilder:
    """Incremental construction helper used by the reference builders and tests."""

    def __init__(self, name: str):
        self.name = name
        self._nodes: list[Node] = []

    def _add(self, **kw) -> int:
        nid = len(self._nodes)
        kw["inputs"] = tuple(kw.get("inputs", ()))
        self._nodes.append(Node(id=nid, **kw))
        return nid

    def input(self, symbol: str) -> int:
        return self._add(kind="input", symbol=symbol)

    def const(self, value: float, label: str | None = None) -> int:
        return self._add(kind="constant", value=float(value), label=label)

    def param(self, store_key: str, signature: str, *inputs: int) -> int:
        return self._add(kind="parameter", store_key=store_key, signature=signature, inputs=inputs)

    def op(self, op: str, *inputs: int) -> int:
        return self._add(kind="operation", op=op, inputs=inputs)

    def output(self, src: int) -> int:
        return self._add(kind="output", inputs=(src,))

    def build(self, loss_target: str, **metadata: str) -> Graph:
        return Graph(self.name, tuple(self._nodes), loss_target, metadata)


def _default_registry():
    from pgdag.ops import REGISTRY

    return REGISTRY


# ---------------------------------------------------------------------------
# Ordering
# ---------------------------------------------------------------------------

def topo_order(g: Graph) -> list[int]:
    """Kahn's algorithm with a min-heap so ties resolve to the smallest id."""
    n = len(g.nodes)
    indeg = [0] * n
    users: list[list[int]] = [[] for _ in range(n)]
    for node in g.nodes:
        for i in node.inputs:
            if not 0 <= i < n:
                raise GraphError(f"node {node.id} references missing node {i}")
            indeg[node.id] += 1
            users[i].append(node.id)
    heap = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        i = heapq.heappop(heap)
        order.append(i)
        for u in users[i]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(heap, u)
    if len(order) != n:
        raise CycleDetected(i for i in range(n) if indeg[i] > 0)
    return order


def ancestors(g: Graph, node_id: int) -> set[int]:
    seen: set[int] = set()
    stack = [node_id]
    while stack:
        for i in g.nodes[stack.pop()].inputs:
            if i not in seen:
                seen.add(i)
                stack.append(i)
    return seen


def descendants(g: Graph, node_id: int) -> set[int]:
    users = g.consumers()
    seen: set[int] = set()
    stack = [node_id]
    while stack:
        for u in users[stack.pop()]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return seen


def live_nodes(g: Graph) -> set[int]:
    out = g.output_id
    return ancestors(g, out) | {out}


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

def _contexts(g: Graph, action_space: str | None) -> list[str]:
    ctx = action_space or g.action_space
    if ctx in ("discrete", "continuous"):
        return [ctx]
    return ["discrete", "continuous"]


def _ctx_ok(rule_ctx: str, ctx: str) -> bool:
    return rule_ctx == "any" or rule_ctx == ctx


def _infer_in_ctx(g: Graph, registry, ctx: str) -> dict[int, DType]:
    types: dict[int, DType] = {}
    for nid in topo_order(g):
        node = g.nodes[nid]
        ins = tuple(types[i] for i in node.inputs)
        if node.kind == "input":
            if node.symbol not in INPUT_TYPES:
                raise TypeMismatch(nid, f"unknown input symbol {node.symbol!r}")
            if node.symbol in CONTINUOUS_ONLY_SYMBOLS and ctx != "continuous":
                raise TypeMismatch(nid, f"input {node.symbol} needs a continuous action space")
            types[nid] = INPUT_TYPES[node.symbol]
        elif node.kind == "constant":
            types[nid] = DType.R
        elif node.kind == "parameter":
            sig = PARAM_SIGNATURES.get(node.signature or "")
            if sig is None:
                raise TypeMismatch(nid, f"unknown parameter signature {node.signature!r}")
            if not _ctx_ok(sig.ctx, ctx):
                raise TypeMismatch(nid, f"signature {node.signature} unavailable for {ctx} actions")
            if ins != sig.inputs:
                raise TypeMismatch(nid, f"{node.signature} applied to {_fmt(ins)}")
            types[nid] = sig.output
        elif node.kind == "operation":
            opdef = registry.get(node.op)
            if opdef is None:
                raise TypeMismatch(nid, f"unknown operator {node.op!r}")
            out = opdef.resolve(ins, ctx)
            if out is None:
                raise TypeMismatch(nid, f"no {node.op} signature accepts {_fmt(ins)} ({ctx} actions)")
            types[nid] = out
        elif node.kind == "output":
            if ins != (DType.R,):
                raise TypeMismatch(nid, f"Output expects R, got {_fmt(ins)}")
            types[nid] = DType.R
        else:
            raise TypeMismatch(nid, f"unknown node kind {node.kind!r}")
    return types


def _fmt(types: tuple[DType, ...]) -> str:
    return "(" + ", ".join(str(t) for t in types) + ")"


def infer_types(g: Graph, registry=None, action_space: str | None = None) -> dict[int, DType]:
    """Infer every node's output type.

    Without an ``action_space`` (argument or graph metadata) the graph must
    type-check under at least one of the discrete/continuous contexts.
    """
    registry = registry if registry is not None else _default_registry()
    first_error: TypeMismatch | None = None
    for ctx in _contexts(g, action_space):
        try:
            return _infer_in_ctx(g, registry, ctx)
        except TypeMismatch as exc:
            first_error = first_error or exc
    assert first_error is not None
    raise first_error


def resolved_action_space(g: Graph, registry=None) -> str:
    registry = registry if registry is not None else _default_registry()
    for ctx in _contexts(g, None):
        try:
            _infer_in_ctx(g, registry, ctx)
            return ctx
        except TypeMismatch:
            pass
    raise TypeMismatch(g.output_id, "graph does not type-check in any action context")


def _arities(node: Node, registry) -> set[int] | None:
    if node.kind in ("input", "constant"):
        return {0}
    if node.kind == "output":
        return {1}
    if node.kind == "parameter":
        sig = PARAM_SIGNATURES.get(node.signature or "")
        return {len(sig.inputs)} if sig else None
    opdef = registry.get(node.op)
    return opdef.arities if opdef else None


def validate(g: Graph, registry=None, action_space: str | None = None) -> ValidationReport:
    registry = registry if registry is not None else _default_registry()
    diags: list[tuple[int, str, str]] = []

    def err(nid, msg):
        diags.append((nid, "error", msg))

    n = len(g.nodes)
    for pos, node in enumerate(g.nodes):
        if node.id != pos:
            err(pos, f"node id {node.id} does not match position {pos}")
        if node.kind not in NODE_KINDS:
            err(pos, f"unknown node kind {node.kind!r}")
            continue
        for i in node.inputs:
            if not 0 <= i < n:
                err(pos, f"input edge to missing node {i}")
        if node.kind == "operation" and node.op not in registry:
            err(pos, f"unknown operator {node.op!r}")
        if node.kind == "input" and node.symbol not in INPUT_TYPES:
            err(pos, f"unknown input symbol {node.symbol!r}")
        if node.kind == "constant" and (node.value is None and node.label is None):
            err(pos, "constant without value")
        arities = _arities(node, registry)
        if arities is None:
            if node.kind == "parameter":
                err(pos, f"unknown parameter signature {node.signature!r}")
        elif len(node.inputs) not in arities:
            err(pos, f"arity {len(node.inputs)} not in {sorted(arities)} for {node.describe()}")
    outs = [node.id for node in g.nodes if node.kind == "output"]
    if len(outs) != 1:
        err(-1, f"graph must have exactly one Output node, found {len(outs)}")
    if diags:
        return ValidationReport(False, diags, {})

    try:
        topo_order(g)
    except CycleDetected as exc:
        err(exc.nodes[0], f"cycle through nodes {exc.nodes}")
        return ValidationReport(False, diags, {})

    kinds: dict[str, str] = {}
    for node in g.nodes:
        if node.kind == "parameter":
            net_kind = PARAM_SIGNATURES[node.signature].net_kind
            prev = kinds.setdefault(node.store_key, net_kind)
            if prev != net_kind:
                err(node.id, f"store key {node.store_key} used as {prev} and {net_kind}")

    types: dict[int, DType] = {}
    try:
        types = infer_types(g, registry, action_space)
    except TypeMismatch as exc:
        err(exc.node_id, f"type mismatch: {exc}")

    live = live_nodes(g)
    for node in g.nodes:
        if node.id not in live:
            diags.append((node.id, "warning", f"unused node {node.describe()}"))
    if g.loss_target not in {g.nodes[i].store_key for i in live if g.nodes[i].kind == "parameter"}:
        diags.append((g.output_id, "warning", f"loss target {g.loss_target} not referenced"))

    ok = not any(sev == "error" for _, sev, _ in diags)
    return ValidationReport(ok, diags, types)


def free_symbols(g: Graph) -> set[str]:
    """Input symbols, store keys and symbolic constant labels reachable from Output."""
    out = set()
    for i in live_nodes(g):
        node = g.nodes[i]
        if node.kind == "input":
            out.add(node.symbol)
        elif node.kind == "parameter":
            out.add(node.store_key)
        elif node.kind == "constant" and node.label:
            out.add(node.label)
    return out


# ---------------------------------------------------------------------------
# Editing helpers (all return new graphs)
# ---------------------------------------------------------------------------

def with_nodes(g: Graph, nodes: Iterable[Node]) -> Graph:
    return Graph(g.name, tuple(nodes), g.loss_target, g.metadata)


def prune_dead(g: Graph) -> Graph:
    """Drop nodes not reachable from Output and renumber densely in id order."""
    live = sorted(live_nodes(g))
    remap = {old: new for new, old in enumerate(live)}
    nodes = [
        replace(g.nodes[old], id=remap[old], inputs=tuple(remap[i] for i in g.nodes[old].inputs))
        for old in live
    ]
    return with_nodes(g, nodes)


def canonicalize(g: Graph) -> Graph:
    """Renumber nodes in topological order (Output ends up last)."""
    order = topo_order(g)
    remap = {old: new for new, old in enumerate(order)}
    nodes = [
        replace(g.nodes[old], id=remap[old], inputs=tuple(remap[i] for i in g.nodes[old].inputs))
        for old in order
    ]
    return with_nodes(g, nodes)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_KIND_FIELDS = {
    "input": ("symbol",),
    "constant": ("value", "label"),
    "parameter": ("store_key", "signature"),
    "operation": ("op",),
    "output": (),
}


def graph_to_dict(g: Graph) -> dict:
    nodes = []
    for node in g.nodes:
        rec: dict = {"id": node.id, "kind": node.kind}
        for f in _KIND_FIELDS[node.kind]:
            v = getattr(node, f)
            if v is not None:
                rec[f] = v
        rec["inputs"] = list(node.inputs)
        nodes.append(rec)
    return {
        "schema_version": SCHEMA_VERSION,
        "name": g.name,
        "loss_target": g.loss_target,
        "nodes": nodes,
        "metadata": dict(g.metadata),
    }


def serialize_graph(g: Graph) -> str:
    return json.dumps(graph_to_dict(g), indent=1) + "\n"


def _line_of_node(text: str, node_id) -> int:
    m = re.search(r'"id"\s*:\s*%s\b' % re.escape(str(node_id)), text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def graph_from_dict(data: dict, text: str = "") -> Graph:
    if not isinstance(data, dict):
        raise ParseError(1, "top level must be an object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(1, f"schema_version {version!r}, expected {SCHEMA_VERSION}")
    for key in ("name", "loss_target", "nodes"):
        if key not in data:
            raise ParseError(1, f"missing field {key!r}")
    raw = data["nodes"]
    if not isinstance(raw, list):
        raise ParseError(1, "nodes must be a list")
    remap: dict[int, int] = {}
    for pos, rec in enumerate(raw):
        if not isinstance(rec, dict) or "id" not in rec:
            raise ParseError(0, f"node #{pos} lacks an id")
        rid = rec["id"]
        if not isinstance(rid, int) or isinstance(rid, bool) or rid < 0:
            raise ParseError(_line_of_node(text, rid), f"node id {rid!r} is not a non-negative integer")
        if rid in remap:
            raise ParseError(_line_of_node(text, rid), f"duplicate node id {rid}")
        remap[rid] = pos
    nodes = []
    for pos, rec in enumerate(raw):
        line = _line_of_node(text, rec["id"])
        kind = rec.get("kind")
        if kind not in _KIND_FIELDS:
            raise ParseError(line, f"unknown node kind {kind!r}")
        fields = {f: rec.get(f) for f in _KIND_FIELDS[kind]}
        if kind == "constant":
            if fields["value"] is None:
                raise ParseError(line, "constant node needs a value")
            fields["value"] = float(fields["value"])
        else:
            missing = [f for f, v in fields.items() if v is None]
            if missing:
                raise ParseError(line, f"{kind} node missing {', '.join(missing)}")
        try:
            inputs = tuple(remap[i] for i in rec.get("inputs", []))
        except (KeyError, TypeError):
            raise ParseError(line, f"node {rec['id']} references an unknown node") from None
        nodes.append(Node(id=pos, kind=kind, inputs=inputs, **fields))
    if sum(n.kind == "output" for n in nodes) != 1:
        raise ParseError(0, "graph must contain exactly one Output node")
    meta = data.get("metadata") or {}
    if not isinstance(meta, dict):
        raise ParseError(1, "metadata must be an object")
    return Graph(str(data["name"]), tuple(nodes), str(data["loss_target"]),
                 {str(k): str(v) for k, v in meta.items()})


def parse_graph(text: str) -> Graph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    return graph_from_dict(data, text)


def load_graph(path) -> Graph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def save_graph(g: Graph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_graph(g))


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------

def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


_SHAPES = {"input": "box", "constant": "box", "parameter": "hexagon", "operation": "ellipse",
           "output": "doubleoctagon"}


def to_dot(g: Graph, registry=None) -> str:
    try:
        types = infer_types(g, registry)
    except (TypeMismatch, GraphError):
        types = {}
    live = live_nodes(g)
    lines = [f'digraph "{_dot_escape(g.name)}" {{', "  rankdir=BT;", "  node [fontname=Helvetica];"]
    for node in g.nodes:
        t = types.get(node.id)
        parts = [node.describe()] + ([str(t)] if t is not None else [])
        label = "\\n".join(_dot_escape(p) for p in parts)
        attrs = [f'label="{label}"', f"shape={_SHAPES[node.kind]}"]
        if node.id not in live:
            attrs.append("style=dashed")
        lines.append(f"  n{node.id} [{', '.join(attrs)}];")
    for node in g.nodes:
        for port, i in enumerate(node.inputs):
            lines.append(f'  n{i} -> n{node.id} [label="{port}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
