"""Outer loop: regularized evolution over loss graphs.

Each iteration samples a tournament, mutates the winner's graph set, gates the
child on a cheap bandit hurdle, scores it on the training environments, inserts
it and retires the oldest member so the population size stays fixed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from pgdag import graph_ir as gi
from pgdag.autodiff_nn import _hp_labels
from pgdag.envs import HyperParams, hurdle_env_id
from pgdag.graph_ir import DType, Graph, Node, PARAM_SIGNATURES
from pgdag.ops import REGISTRY
from pgdag.reference_graphs import AlgorithmSpec, build
from pgdag.trainer import EnvTask, TrainBudget, evaluate_algorithm

log = logging.getLogger(__name__)

MUTATION_KINDS = ("replace", "rewire", "insert", "delete", "perturb")
MAX_RANDOM_NODES = 20
MAX_RANDOM_DEPTH = 10
MAX_CHILD_NODES = 60  # keeps repeated insertions from bloating graphs
HURDLE_STEPS = 500
HURDLE_WINDOW = 200


class InvalidWarmStart(ValueError):
    pass


class MutationExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class EvolutionConfig:
    N: int = 10
    T: int = 3
    C: int = 20
    hurdle_alpha: float = 0.6
    K: int = 100
    warm_starts: tuple[str, ...] = ("ddqn",)
    seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "warm_starts", tuple(self.warm_starts))
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not 1 <= self.T <= self.N:
            raise ValueError("T must satisfy 1 <= T <= N")
        if self.C < 0:
            raise ValueError("C must be non-negative")
        if not 0.0 <= self.hurdle_alpha <= 1.0:
            raise ValueError("hurdle_alpha must lie in [0, 1]")
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if len(self.warm_starts) > self.N:
            raise ValueError("more warm starts than population slots")

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvolutionConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown EvolutionConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Individual:
    id: int
    spec: AlgorithmSpec
    birth: int
    parent: int | None = None
    score: float | None = None
    status: str = "scored"  # scored | failed-hurdle | failed-eval
    mutation: dict | None = None

    @property
    def rank_score(self) -> float:
        return self.score if self.score is not None else -1.0


# ---------------------------------------------------------------------------
# Typed graph construction helpers
# ---------------------------------------------------------------------------

def _ctx_ok(rule_ctx: str, ctx: str) -> bool:
    return rule_ctx in ("any", ctx)


def _symbols(ctx: str, dtype: DType) -> list[str]:
    return [s for s, t in gi.INPUT_TYPES.items()
            if t == dtype and (ctx == "continuous" or s not in gi.CONTINUOUS_ONLY_SYMBOLS)]


def _signatures_for(net_kind: str, ctx: str) -> list[str]:
    return [name for name, sig in PARAM_SIGNATURES.items() if sig.net_kind == net_kind and _ctx_ok(sig.ctx, ctx)]


def _overloads(ctx: str):
    """(op_id, overload) pairs usable in ``ctx``; ArgMaxList only feeds discrete selections."""
    out = []
    for op_id in sorted(REGISTRY):
        for ov in REGISTRY[op_id].overloads:
            if _ctx_ok(ov.ctx, ctx):
                out.append((op_id, ov))
    return out


_DEFAULT_LABELS = _hp_labels(HyperParams())
_RANDOM_CONSTANTS = tuple((lab, _DEFAULT_LABELS[lab]) for lab in ("gamma", "lambda", "1+eps", "1-eps")) + (
    (None, 1.0), (None, 0.5), (None, 2.0), (None, -1.0), (None, 0.1))


class _Draft:
    """Mutable node list used while generating a random graph."""

    def __init__(self, ctx: str):
        self.ctx = ctx
        self.nodes: list[Node] = []
        self.types: list[DType] = []
        self.depth: list[int] = []

    def add(self, dtype: DType, **kw) -> int:
        nid = len(self.nodes)
        ins = kw.get("inputs", ())
        self.nodes.append(Node(nid, **kw))
        self.types.append(dtype)
        self.depth.append(1 + max((self.depth[i] for i in ins), default=0))
        return nid

    def of_type(self, dtype: DType, max_depth: int) -> list[int]:
        return [i for i, t in enumerate(self.types) if t == dtype and self.depth[i] < max_depth
                and self.nodes[i].kind != "output"]

    def leaf(self, dtype: DType, rng: np.random.Generator) -> int | None:
        """Fresh Input or Constant of ``dtype``, if one exists."""
        syms = _symbols(self.ctx, dtype)
        if dtype == DType.R and (not syms or rng.random() < 0.4):
            label, value = _RANDOM_CONSTANTS[rng.integers(len(_RANDOM_CONSTANTS))]
            return self.add(DType.R, kind="constant", label=label, value=value)
        if not syms:
            return None
        return self.add(dtype, kind="input", symbol=syms[rng.integers(len(syms))])

    def source(self, dtype: DType, rng: np.random.Generator, max_depth: int) -> int | None:
        pool = self.of_type(dtype, max_depth)
        if pool and rng.random() < 0.7:
            return int(pool[rng.integers(len(pool))])
        fresh = self.leaf(dtype, rng)
        if fresh is None and pool:
            return int(pool[rng.integers(len(pool))])
        return fresh


def random_graph(rng: np.random.Generator, store_kinds: Mapping[str, str], action_space: str,
                 loss_target: str, name: str = "random", max_nodes: int = MAX_RANDOM_NODES,
                 max_depth: int = MAX_RANDOM_DEPTH, max_tries: int = 1000) -> Graph:
    """Random type-valid graph with at most ``max_nodes`` nodes and depth ``max_depth``.

    The graph always reaches a Parameter node of ``loss_target`` and at least
    one Input, so it never degenerates into a constant loss.
    """
    ctx = action_space
    overloads = _overloads(ctx)
    keys = [k for k in sorted(store_kinds) if _signatures_for(store_kinds[k], ctx)]
    if loss_target not in keys:
        raise ValueError(f"loss target {loss_target!r} has no signature usable with {ctx} actions")
    for _ in range(max_tries):
        d = _Draft(ctx)
        target_params: list[int] = []

        def add_param(key: str) -> int | None:
            sig_name = _signatures_for(store_kinds[key], ctx)[rng.integers(len(_signatures_for(store_kinds[key], ctx)))]
            sig = PARAM_SIGNATURES[sig_name]
            ins = []
            for t in sig.inputs:
                src = d.source(t, rng, max_depth)
                if src is None:
                    return None
                ins.append(src)
            nid = d.add(sig.output, kind="parameter", store_key=key, signature=sig_name, inputs=tuple(ins))
            if key == loss_target:
                target_params.append(nid)
            return nid

        if add_param(loss_target) is None:
            continue
        n_ops = int(rng.integers(1, 9))
        for _ in range(n_ops):
            if rng.random() < 0.2:
                add_param(keys[rng.integers(len(keys))])
                continue
            op_id, ov = overloads[rng.integers(len(overloads))]
            ins = []
            for t in ov.inputs:
                src = d.source(t, rng, max_depth)
                if src is None:
                    break
                ins.append(src)
            if len(ins) != len(ov.inputs):
                continue
            d.add(ov.output, kind="operation", op=op_id, inputs=tuple(ins))
        reach = [i for i, t in enumerate(d.types) if t == DType.R and d.depth[i] < max_depth
                 and any(p == i or p in gi.ancestors(_as_graph(d, loss_target), i) for p in target_params)]
        if not reach:
            continue
        # prefer the deepest candidates so most of the draft survives pruning
        top = max(d.depth[i] for i in reach)
        deepest = [i for i in reach if d.depth[i] == top]
        d.add(DType.R, kind="output", inputs=(int(deepest[rng.integers(len(deepest))]),))
        g = gi.canonicalize(gi.prune_dead(_as_graph(d, loss_target, name)))
        if len(g) > max_nodes or _depth(g) > max_depth:
            continue
        kinds = {n.kind for n in g.nodes}
        if "parameter" not in kinds or "input" not in kinds:
            continue
        if gi.validate(g).ok:
            return g
    raise RuntimeError("could not generate a valid random graph")


def _as_graph(d: _Draft, loss_target: str, name: str = "draft") -> Graph:
    return Graph(name, tuple(d.nodes), loss_target, {"action_space": d.ctx})


def _depth(g: Graph) -> int:
    depth: dict[int, int] = {}
    for nid in gi.topo_order(g):
        depth[nid] = 1 + max((depth[i] for i in g.nodes[nid].inputs), default=0)
    return max(depth.values())


# ---------------------------------------------------------------------------
# Mutation
# ---------------------------------------------------------------------------

def _perturbable_value(node: Node, hp: HyperParams) -> float | None:
    if node.label:
        return _hp_labels(hp).get(node.label)
    return node.value


def _pick(rng: np.random.Generator, seq):
    return seq[rng.integers(len(seq))] if len(seq) else None


def _set_inputs(nodes: list[Node], nid: int, port: int, src: int) -> None:
    ins = list(nodes[nid].inputs)
    ins[port] = src
    nodes[nid] = replace(nodes[nid], inputs=tuple(ins))


def _mutate_once(g: Graph, rng: np.random.Generator, kind: str, store_kinds: Mapping[str, str],
                 hp: HyperParams) -> tuple[Graph, dict] | None:
    ctx = gi.resolved_action_space(g)
    types = gi.infer_types(g, action_space=ctx)
    nodes = list(g.nodes)
    info: dict = {"kind": kind}

    if kind == "replace":
        cands = [n for n in nodes if n.kind in ("operation", "input", "parameter")]
        n = _pick(rng, cands)
        if n is None:
            return None
        in_types = tuple(types[i] for i in n.inputs)
        if n.kind == "operation":
            opts = [op for op, ov in _overloads(ctx) if op != n.op and ov.inputs == in_types
                    and ov.output == types[n.id]]
            opts = sorted(set(opts))
            if not opts:
                return None
            new = opts[rng.integers(len(opts))]
            info.update(node=n.id, before=n.op, after=new)
            nodes[n.id] = replace(n, op=new)
        elif n.kind == "input":
            opts = [s for s in _symbols(ctx, types[n.id]) if s != n.symbol]
            if not opts:
                return None
            new = opts[rng.integers(len(opts))]
            info.update(node=n.id, before=n.symbol, after=new)
            nodes[n.id] = replace(n, symbol=new)
        else:
            sig = PARAM_SIGNATURES[n.signature]
            opts = [k for k in sorted(store_kinds) if k != n.store_key and store_kinds[k] == sig.net_kind]
            if not opts:
                return None
            new = opts[rng.integers(len(opts))]
            info.update(node=n.id, before=n.store_key, after=new)
            nodes[n.id] = replace(n, store_key=new)

    elif kind == "rewire":
        cands = [n for n in nodes if n.inputs]
        n = _pick(rng, cands)
        if n is None:
            return None
        port = int(rng.integers(len(n.inputs)))
        want = types[n.inputs[port]]
        banned = gi.descendants(g, n.id) | {n.id, n.inputs[port]}
        opts = [m.id for m in nodes if m.kind != "output" and types[m.id] == want and m.id not in banned]
        if not opts:
            return None
        src = int(opts[rng.integers(len(opts))])
        info.update(node=n.id, port=port, before=n.inputs[port], after=src)
        _set_inputs(nodes, n.id, port, src)

    elif kind == "insert":
        edges = [(n.id, p, src) for n in nodes for p, src in enumerate(n.inputs)]
        if not edges:
            return None
        v, port, u = _pick(rng, edges)
        t = types[u]
        opts = [(op, ov) for op, ov in _overloads(ctx) if ov.output == t and t in ov.inputs]
        if not opts:
            return None
        op, ov = opts[rng.integers(len(opts))]
        slots = [i for i, it in enumerate(ov.inputs) if it == t]
        slot = slots[rng.integers(len(slots))]
        banned = gi.descendants(g, v) | {v}
        ins = []
        for i, it in enumerate(ov.inputs):
            if i == slot:
                ins.append(u)
                continue
            pool = [m.id for m in nodes if m.kind != "output" and types[m.id] == it and m.id not in banned]
            if it == DType.R and (not pool or rng.random() < 0.3):
                label, value = _RANDOM_CONSTANTS[rng.integers(len(_RANDOM_CONSTANTS))]
                nodes.append(Node(len(nodes), "constant", label=label, value=value))
                types[len(nodes) - 1] = DType.R
                ins.append(len(nodes) - 1)
            elif pool:
                ins.append(int(pool[rng.integers(len(pool))]))
            else:
                return None
        nodes.append(Node(len(nodes), "operation", tuple(ins), op=op))
        _set_inputs(nodes, v, port, len(nodes) - 1)
        info.update(node=len(nodes) - 1, op=op, edge=[u, v, port])

    elif kind == "delete":
        cands = [n for n in nodes if n.kind != "output"]
        n = _pick(rng, cands)
        if n is None:
            return None
        t = types[n.id]
        users = g.consumers()[n.id]
        own = [i for i in n.inputs if types[i] == t]
        for user in users:
            banned = gi.descendants(g, user) | {user, n.id}
            opts = [i for i in own if i not in banned] or [
                m.id for m in nodes if m.kind != "output" and types[m.id] == t and m.id not in banned]
            if not opts:
                return None
            src = int(opts[rng.integers(len(opts))])
            for port, i in enumerate(nodes[user].inputs):
                if i == n.id:
                    _set_inputs(nodes, user, port, src)
        info.update(node=n.id, deleted=n.describe())

    elif kind == "perturb":
        cands = [n for n in nodes if n.kind == "constant" and _perturbable_value(n, hp) is not None]
        if not cands:
            return None
        n = _pick(rng, cands)
        if n is None:
            return None
        old = _perturbable_value(n, hp)
        new = float(old * rng.uniform(0.5, 2.0))
        info.update(node=n.id, before=n.label or old, after=new)
        nodes[n.id] = Node(n.id, "constant", value=new)
    else:
        raise ValueError(f"unknown mutation kind {kind!r}")

    child = gi.prune_dead(gi.with_nodes(g, nodes))
    return child, info


def _structure(g: Graph) -> str:
    return gi.serialize_graph(gi.canonicalize(g))


def mutate(graphs: Sequence[Graph], rng: np.random.Generator, K: int = 100,
           store_kinds: Mapping[str, str] | None = None, hp: HyperParams | None = None
           ) -> tuple[tuple[Graph, ...], dict]:
    """Apply one random mutation to one graph of the set; retry until the child validates.

    Returns the child graph set and a descriptor of the applied mutation.
    """
    hp = hp or HyperParams()
    graphs = tuple(graphs)
    if store_kinds is None:
        store_kinds = {}
        for g in graphs:
            for n in g.nodes:
                if n.kind == "parameter":
                    store_kinds[n.store_key] = PARAM_SIGNATURES[n.signature].net_kind
    for attempt in range(1, K + 1):
        idx = int(rng.integers(len(graphs)))
        kind = MUTATION_KINDS[rng.integers(len(MUTATION_KINDS))]
        parent = graphs[idx]
        try:
            out = _mutate_once(parent, rng, kind, store_kinds, hp)
        except gi.GraphError:
            continue
        if out is None:
            continue
        child, info = out
        if len(child) > MAX_CHILD_NODES or not gi.validate(child, action_space=parent.action_space).ok:
            continue
        if _structure(child) == _structure(parent):
            continue
        info.update(graph=parent.name, attempts=attempt)
        return graphs[:idx] + (child,) + graphs[idx + 1:], info
    raise MutationExhausted(f"no valid mutation after {K} attempts")


# ---------------------------------------------------------------------------
# Hurdle, population, loop
# ---------------------------------------------------------------------------

def hurdle_budget(spec: AlgorithmSpec, steps: int = HURDLE_STEPS) -> TrainBudget:
    # Bandit episodes last one step, so a wide window is free and keeps a
    # coin-flip policy from clearing the threshold by luck.
    window = HURDLE_WINDOW
    if spec.data_mode == "trajectory":
        return TrainBudget(total_steps=steps, steps_per_update=50, warmup_steps=0, episodes_per_eval=window)
    return TrainBudget(total_steps=steps, batch_size=32, warmup_steps=50, eps_decay_steps=steps // 2,
                       episodes_per_eval=window)


def hurdle_check(spec: AlgorithmSpec, budget: TrainBudget | None = None, hurdle_alpha: float = 0.6,
                 seed: int = 0) -> bool:
    """True when the candidate scores at least ``hurdle_alpha`` on the bandit after a short run."""
    if hurdle_alpha <= 0.0:
        return True
    budget = budget or hurdle_budget(spec)
    task = EnvTask(hurdle_env_id(spec.action_space), budget)
    try:
        report = evaluate_algorithm(spec, [task], seed)
    except Exception as exc:  # noqa: BLE001 - any training fault fails the hurdle
        log.info("hurdle evaluation raised %s", exc)
        return False
    return not report.failed and report.total >= hurdle_alpha


def default_env_set() -> list[EnvTask]:
    """Bandit plus the 100-step CartPole, budgets sized for desk-scale searches."""
    return [
        EnvTask("bandit", TrainBudget(total_steps=500, batch_size=32, warmup_steps=50, eps_decay_steps=250)),
        EnvTask("cartpole-short", TrainBudget(total_steps=2000, batch_size=32, warmup_steps=200,
                                              eps_decay_steps=1000)),
    ]


def _shell(cfg: EvolutionConfig, hp: HyperParams) -> AlgorithmSpec:
    return build(cfg.warm_starts[0] if cfg.warm_starts else "ddqn", hp)


def _candidate_seed(cfg: EvolutionConfig, ind_id: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, 1, ind_id]).generate_state(1)[0])


def score_individual(ind: Individual, env_set: Sequence[EnvTask], cfg: EvolutionConfig, workers: int = 1) -> Individual:
    report = evaluate_algorithm(ind.spec, env_set, _candidate_seed(cfg, ind.id), workers)
    compatible = [t for t in env_set if not any(d.startswith(f"{t.env_id}: incompatible") for d in report.diagnostics)]
    if report.failed and all(report.per_env[t.env_id] == 0.0 for t in compatible):
        ind.status, ind.score = "failed-eval", None
    else:
        ind.status, ind.score = "scored", report.total
    return ind


def init_population(cfg: EvolutionConfig, env_set: Sequence[EnvTask] = (), hp: HyperParams | None = None,
                    score: bool = True, workers: int = 1) -> list[Individual]:
    hp = hp or HyperParams()
    rng = np.random.default_rng([cfg.seed, 0])
    pop = []
    for name in cfg.warm_starts:
        try:
            spec = build(name, hp)
        except KeyError as exc:
            raise InvalidWarmStart(f"unknown warm start {name!r}") from exc
        for gu in spec.graphs:
            if not gi.validate(gu.graph).ok:
                raise InvalidWarmStart(f"warm start {name} graph {gu.graph.name} does not validate")
        pop.append(Individual(len(pop), spec, 0))
    shell = _shell(cfg, hp)
    while len(pop) < cfg.N:
        graphs = [random_graph(rng, shell.store_kinds, shell.action_space, gu.loss_target, f"random{len(pop)}_{k}")
                  for k, gu in enumerate(shell.graphs)]
        pop.append(Individual(len(pop), shell.with_graphs(graphs), 0))
    if score:
        for ind in pop:
            score_individual(ind, env_set, cfg, workers)
    return pop


def tournament_select(population: Sequence[Individual], T: int, rng: np.random.Generator) -> Individual:
    if not population:
        raise ValueError("empty population")
    if not 1 <= T <= len(population):
        raise ValueError("tournament size out of range")
    picks = rng.choice(len(population), size=T, replace=False)
    sample = [population[i] for i in picks]
    return max(sample, key=lambda ind: (ind.rank_score, ind.birth, -ind.id))


def remove_oldest(population: list[Individual]) -> Individual:
    oldest = min(population, key=lambda ind: (ind.birth, ind.id))
    population.remove(oldest)
    return oldest


@dataclass
class RunRecord:
    initial: list[Individual]
    population: list[Individual]
    best: Individual
    history: list[dict] = field(default_factory=list)


def _better(a: Individual, b: Individual | None) -> bool:
    return b is None or a.rank_score > b.rank_score


def _save_individual(ind: Individual, path: Path) -> None:
    graphs = [gu.graph for gu in ind.spec.graphs]
    gi.save_graph(graphs[0], path)
    for k, g in enumerate(graphs[1:], start=1):
        gi.save_graph(g, path.with_name(path.name.replace(".graph.json", f".{k}.graph.json")))


def _checkpoint(pop: list[Individual], out: Path, it: int) -> None:
    d = out / "population" / f"iter_{it:05d}"
    d.mkdir(parents=True, exist_ok=True)
    for ind in pop:
        _save_individual(ind, d / f"ind_{ind.id:05d}.graph.json")


def evolve(cfg: EvolutionConfig, env_set: Sequence[EnvTask], hp: HyperParams | None = None,
           out_dir: str | Path | None = None, workers: int = 1, hurdle: TrainBudget | None = None) -> RunRecord:
    hp = hp or HyperParams()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(
            {"evolution": asdict(cfg), "hp": asdict(hp),
             "envs": [{"env_id": t.env_id, "budget": asdict(t.budget)} for t in env_set]}, indent=2))
        (out / "history.jsonl").write_text("")
    pop = init_population(cfg, env_set, hp, workers=workers)
    initial = [replace(ind) for ind in pop]
    best = None
    for ind in pop:
        if _better(ind, best):
            best = ind
    rng = np.random.default_rng([cfg.seed, 2])
    next_id = len(pop)
    history: list[dict] = []
    for it in range(1, cfg.C + 1):
        parent = tournament_select(pop, cfg.T, rng)
        rec: dict = {"iteration": it, "parent": parent.id, "child": None, "mutation": None, "hurdle": None,
                     "score": None, "status": None, "removed": None}
        try:
            graphs, info = mutate([gu.graph for gu in parent.spec.graphs], rng, cfg.K, parent.spec.store_kinds, hp)
            rec["mutation"] = info
        except MutationExhausted as exc:
            log.info("iteration %d: %s", it, exc)
            rec["status"] = "mutation-exhausted"
            graphs = None
        if graphs is not None:
            child = Individual(next_id, parent.spec.with_graphs(graphs), it, parent.id, mutation=rec["mutation"])
            next_id += 1
            rec["child"] = child.id
            passed = hurdle_check(child.spec, hurdle, cfg.hurdle_alpha, _candidate_seed(cfg, child.id))
            rec["hurdle"] = passed
            if not passed:
                child.status = "failed-hurdle"
            else:
                score_individual(child, env_set, cfg, workers)
                rec["score"] = child.score
                if child.status == "scored":
                    pop.append(child)
                    rec["removed"] = remove_oldest(pop).id
                    if _better(child, best):
                        best = child
            rec["status"] = child.status
        rec["population"] = sorted(ind.id for ind in pop)
        rec["best_id"] = best.id
        rec["best_score"] = best.score
        history.append(rec)
        if out is not None:
            with open(out / "history.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if it % cfg.checkpoint_every == 0:
                _checkpoint(pop, out, it)
    if out is not None:
        _save_individual(best, out / "best.graph.json")
        _checkpoint(pop, out, cfg.C)
    return RunRecord(initial, pop, best, history)

