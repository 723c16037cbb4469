"""Run an evolutionary search from a config file and summarize the history.

    python3 scripts/run_evolution.py configs/evolve_default.json --out runs/evolve_default
"""
from __future__ import annotations

import argparse
import collections
import json
from pathlib import Path

from pgdag import cli
from pgdag.graph_ir import load_graph


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    code = cli.main(["evolve", "--config", args.config, "--out", args.out, "--workers", str(args.workers)])
    if code:
        raise SystemExit(code)
    out = Path(args.out)
    history = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    status = collections.Counter(h["status"] for h in history)
    kinds = collections.Counter(h["mutation"]["kind"] for h in history if h["mutation"])
    print("outcomes:", dict(status))
    print("mutations:", dict(kinds))
    best = load_graph(out / "best.graph.json")
    print(f"best individual {history[-1]['best_id']} score={history[-1]['best_score']}:")
    for node in best.nodes:
        print(f"  {node.id}: {node.describe()} <- {list(node.inputs)}")


if __name__ == "__main__":
    main()
