"""Write the reference graphs, their DOT renderings and the CLI fixtures.

    python3 scripts/export_reference_graphs.py [--root .]
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from pgdag import graph_ir as gi
from pgdag.reference_graphs import REFERENCE_GRAPH_NAMES, reference_graph


def ddqn_stub_fixture() -> dict:
    # Q_theta = 2 everywhere, Q_theta' = 1.5, r = 1, gamma = 0.9, not done:
    # (2 - (1 + 0.9 * 1.5))^2 = 0.1225
    return {
        "format": "pgdag-batch",
        "bindings": {
            "s_t": [[0.0, 0.0, 0.0, 0.0]],
            "a_t": [[0]],
            "r_t": [[1.0]],
            "d_t": [[0.0]],
            "s_tp1": [[0.0, 0.0, 0.0, 0.0]],
            "gamma": [[0.9]],
        },
        "stubs": {
            "theta": {"kind": "S->ListR", "value": [2.0, 2.0]},
            "theta_targ": {"kind": "S->ListR", "value": [1.5, 1.5]},
        },
        "hp": {"gamma": 0.9},
    }


def cyclic_fixture() -> dict:
    return {
        "schema_version": 1,
        "name": "cyclic",
        "loss_target": "theta",
        "metadata": {"action_space": "discrete"},
        "nodes": [
            {"id": 0, "kind": "input", "symbol": "r_t"},
            {"id": 1, "kind": "operation", "op": "Add", "inputs": [0, 2]},
            {"id": 2, "kind": "operation", "op": "Square", "inputs": [1]},
            {"id": 3, "kind": "output", "inputs": [2]},
        ],
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default=Path(__file__).resolve().parents[1], type=Path)
    args = ap.parse_args()
    graphs, figs, fixtures = args.root / "graphs", args.root / "docs" / "figures", args.root / "fixtures"
    for d in (graphs, figs, fixtures):
        d.mkdir(parents=True, exist_ok=True)
    for name in REFERENCE_GRAPH_NAMES:
        g = reference_graph(name)
        gi.save_graph(g, graphs / f"{name}.graph.json")
        (figs / f"{name}.dot").write_text(gi.to_dot(g))
    (fixtures / "ddqn_stub.json").write_text(json.dumps(ddqn_stub_fixture(), indent=2) + "\n")
    (fixtures / "cyclic.graph.json").write_text(json.dumps(cyclic_fixture(), indent=2) + "\n")
    print(f"wrote {len(REFERENCE_GRAPH_NAMES)} graphs to {graphs}")


if __name__ == "__main__":
    main()
