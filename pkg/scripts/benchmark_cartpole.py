"""Train reference algorithms on CartPole over several seeds and report the final-20 mean return.

    python3 scripts/benchmark_cartpole.py --algorithms ddqn vpg --seeds 0 1 2 3 4 --steps 50000
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from pgdag.reference_graphs import build
from pgdag.trainer import default_budget, train_agent


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--algorithms", nargs="+", default=["ddqn", "vpg"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--env", default="cartpole")
    args = p.parse_args()
    for algo in args.algorithms:
        spec = build(algo)
        for seed in args.seeds:
            t0 = time.perf_counter()
            res = train_agent(spec, args.env, default_budget(spec, args.steps), seed)
            tail = res.returns[-20:]
            print(f"algorithm={algo} seed={seed} episodes={len(res.returns)} "
                  f"mean_last20={np.mean(tail) if tail else float('nan'):.1f} failed={res.failed} "
                  f"seconds={time.perf_counter() - t0:.1f}", flush=True)


if __name__ == "__main__":
    main()
