"""Command-line entry point: ``pgdag {validate,render,eval-loss,train,evolve}``.

Settings resolve as flags > --config JSON > built-in defaults. Every command
ends with one ``key=value`` summary line on stdout.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from pgdag import graph_ir as gi
from pgdag.autodiff_nn import constant_stub, evaluate_loss, ParameterStore
from pgdag.envs import ENV_FACTORIES, HyperParams
from pgdag.evolution import EvolutionConfig, default_env_set, evolve
from pgdag.ops import NoiseStream
from pgdag.reference_graphs import ALGORITHMS, build
from pgdag.trainer import EnvTask, IncompatibleActionSpace, TrainBudget, default_budget, train_agent

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UserError(Exception):
    """Reported as a one-line message with exit code 2."""


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: str | None = None
    hp: HyperParams = field(default_factory=HyperParams)
    budget: TrainBudget | None = None
    evolution: EvolutionConfig | None = None
    envs: list[EnvTask] = field(default_factory=list)
    options: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "out": self.out,
            "hp": asdict(self.hp),
            "budget": asdict(self.budget) if self.budget else None,
            "evolution": asdict(self.evolution) if self.evolution else None,
            "envs": [{"env_id": t.env_id, "budget": asdict(t.budget)} for t in self.envs],
            **self.options,
        }


def summary(**kv) -> str:
    parts = []
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.10g}"
        parts.append(f"{k}={v}")
    return " ".join(parts)


def _load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UserError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc})") from None


def _merge(cls, defaults, config: Mapping | None, flags: Mapping[str, Any]):
    """Dataclass instance with ``config`` then non-None ``flags`` layered over ``defaults``."""
    known = {f.name for f in fields(cls)}
    data = asdict(defaults)
    extra = set(config or {}) - known
    if extra:
        raise UserError(f"unknown {cls.__name__} fields in config: {sorted(extra)}")
    data.update(config or {})
    data.update({k: v for k, v in flags.items() if v is not None and k in known})
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid {cls.__name__}: {exc}") from None


def _load_graph(path: str) -> gi.Graph:
    try:
        return gi.load_graph(path)
    except FileNotFoundError:
        raise UserError(f"file not found: {path}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    try:
        g = gi.load_graph(args.path)
    except FileNotFoundError:
        print(f"error: file not found: {args.path}", file=sys.stderr)
        print(summary(status="error", path=args.path))
        return EXIT_USAGE
    except (gi.ParseError, gi.GraphError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        print(summary(status="parse-error", path=args.path))
        return EXIT_USAGE
    report = gi.validate(g, action_space=args.action_space)
    for nid, sev, msg in report.diagnostics:
        print(f"{sev}: node {nid}: {msg}", file=sys.stderr)
    errors = sum(1 for _, sev, _ in report.diagnostics if sev == "error")
    warnings = len(report.diagnostics) - errors
    print(summary(status="ok" if report.ok else "invalid", nodes=len(g), errors=errors, warnings=warnings))
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_render(args) -> int:
    g = _load_graph(args.path)
    dot = gi.to_dot(g)
    out = args.out or str(Path(args.path).with_suffix("").with_suffix(".dot"))
    Path(out).write_text(dot)
    print(summary(out=out, nodes=len(g)))
    return EXIT_OK


def _fixture_store(fixture: Mapping) -> ParameterStore:
    entries = {}
    for key, stub in fixture.get("stubs", {}).items():
        entries[key] = constant_stub(stub["kind"], stub["value"], stub.get("action_dim", 1))
    return ParameterStore(entries)


def _fixture_bindings(fixture: Mapping) -> dict[str, np.ndarray]:
    out = {}
    for sym, val in fixture.get("bindings", {}).items():
        arr = np.asarray(val)
        out[sym] = arr.astype(np.int64) if arr.dtype.kind in "iu" else arr.astype(np.float64)
    return out


def cmd_eval_loss(args) -> int:
    g = _load_graph(args.path)
    report = gi.validate(g)
    if not report.ok:
        raise UserError(f"{args.path} does not validate: {report.errors[0][2]}")
    fixture = _load_json(args.batch)
    hp = _merge(HyperParams, HyperParams(), fixture.get("hp"), {})
    try:
        loss, _ = evaluate_loss(g, _fixture_store(fixture), _fixture_bindings(fixture), hp, NoiseStream(args.seed))
    except (KeyError, ValueError) as exc:
        raise UserError(f"evaluation failed: {exc}") from None
    print(summary(graph=g.name, loss=loss))
    return EXIT_OK


def _spec_from_arg(name: str, shell: str | None, hp: HyperParams, env_id: str):
    space = ENV_FACTORIES[env_id]().descriptor.action_kind
    if name in ALGORITHMS:
        return build(name, hp, action_space=space if name in ("vpg", "ppo") else None)
    g = _load_graph(name)
    report = gi.validate(g)
    if not report.ok:
        raise UserError(f"{name} does not validate: {report.errors[0][2]}")
    base = build(shell or "ddqn", hp, action_space=space if shell in ("vpg", "ppo") else None)
    return base.with_graphs([g] + [gu.graph for gu in base.graphs[1:]])


def cmd_train(args) -> int:
    config = _load_json(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    env_id = args.env or config.get("env", "cartpole")
    if env_id not in ENV_FACTORIES:
        raise UserError(f"unknown environment {env_id!r}; known: {sorted(ENV_FACTORIES)}")
    algo = args.spec or config.get("algorithm")
    if not algo:
        raise UserError("no algorithm or graph given")
    hp = _merge(HyperParams, HyperParams(), config.get("hp"), {"lr": args.lr})
    spec = _spec_from_arg(algo, args.shell or config.get("shell"), hp, env_id)
    budget = _merge(TrainBudget, default_budget(spec), config.get("budget"),
                    {"total_steps": args.steps, "batch_size": args.batch_size})
    out = Path(args.out or config.get("out") or f"runs/train_{spec.name}_{env_id}_s{seed}")
    out.mkdir(parents=True, exist_ok=True)
    run = RunConfig("train", seed, str(out), hp, budget, options={"algorithm": algo, "env": env_id,
                                                                   "shell": args.shell or config.get("shell")})
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2))

    records: list[dict] = []
    result = train_agent(spec, env_id, budget, seed, metrics=records.append, log_every=args.log_every)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "return", "length"])
        eps = [r for r in records if r["episode"] is not None]
        for rec, length in zip(eps, result.lengths):
            w.writerow([rec["episode"], rec["step"], rec["return"], length])
    tail = result.returns[-budget.episodes_per_eval:]
    print(summary(algorithm=spec.name, env=env_id, seed=seed, episodes=len(result.returns),
                  mean_last=float(np.mean(tail)) if tail else float("nan"), failed=result.failed, out=out))
    return EXIT_INVALID if result.failed else EXIT_OK


def _env_tasks(entries) -> list[EnvTask]:
    tasks = []
    for entry in entries:
        env_id = entry["env_id"]
        if env_id not in ENV_FACTORIES:
            raise UserError(f"unknown environment {env_id!r}")
        tasks.append(EnvTask(env_id, _merge(TrainBudget, TrainBudget(), entry.get("budget"), {})))
    return tasks


def cmd_evolve(args) -> int:
    config = _load_json(args.config) if args.config else {}
    evo_flags = {"seed": args.seed, "N": args.N, "T": args.T, "C": args.C}
    evo = _merge(EvolutionConfig, EvolutionConfig(), config.get("evolution"), evo_flags)
    hp = _merge(HyperParams, HyperParams(), config.get("hp"), {})
    envs = _env_tasks(config["envs"]) if config.get("envs") else default_env_set()
    out = Path(args.out or config.get("out") or f"runs/evolve_s{evo.seed}")
    workers = args.workers if args.workers is not None else config.get("workers", 1)
    record = evolve(evo, envs, hp, out_dir=out, workers=workers)
    run = RunConfig("evolve", evo.seed, str(out), hp, None, evo, envs, {"workers": workers})
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2))
    print(summary(iterations=len(record.history), population=len(record.population), best_id=record.best.id,
                  best_score=record.best.score if record.best.score is not None else float("nan"), out=out))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgdag", description="Typed loss-graph toolkit for RL algorithms.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="type-check a graph file")
    v.add_argument("path")
    v.add_argument("--action-space", choices=("discrete", "continuous"))
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("render", help="write a Graphviz DOT rendering")
    r.add_argument("path")
    r.add_argument("--out")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval-loss", help="evaluate a graph on a stub batch fixture")
    e.add_argument("path")
    e.add_argument("--batch", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval_loss)

    t = sub.add_parser("train", help="train one agent and write metrics")
    t.add_argument("spec", nargs="?", help=f"algorithm name ({', '.join(ALGORITHMS)}) or graph file")
    t.add_argument("--env")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--config")
    t.add_argument("--shell", choices=ALGORITHMS, help="training plumbing for a graph file (default ddqn)")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    ev = sub.add_parser("evolve", help="run the evolutionary search")
    ev.add_argument("--config")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out")
    ev.add_argument("--workers", type=int)
    ev.add_argument("--N", type=int)
    ev.add_argument("--T", type=int)
    ev.add_argument("--C", type=int)
    ev.set_defaults(func=cmd_evolve)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(summary(status="error"))
        return EXIT_USAGE
    except (gi.ParseError, gi.GraphError, IncompatibleActionSpace, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(summary(status="error"))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
