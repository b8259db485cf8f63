"""Run one config over several seeds and print oracle ratios per seed.

    python3 scripts/run_experiment.py configs/fruit_tree.yaml --seeds 10 11 12
"""

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from cmorl.config import load_config
from cmorl.driver import run_cmorl


def run_seeds(config, seeds, overrides=(), out="runs"):
    """Yield ``(seed, RunResult, seconds)`` for each seed."""
    for seed in seeds:
        cfg = load_config(config, [*overrides, f"seed={seed}"])
        start = time.perf_counter()
        res = run_cmorl(cfg, Path(out) / f"{cfg.name}_seed{seed}")
        yield seed, res, time.perf_counter() - start


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--seeds", type=int, nargs="+", default=[10, 11, 12])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default="runs")
    p.add_argument("--csv", help="also write the per-seed table here")
    args = p.parse_args(argv)

    rows = []
    for seed, res, secs in run_seeds(args.config, args.seeds, args.set, args.out):
        row = {"seed": seed, "hypervolume": res.metrics["hypervolume"],
               "expected_utility": res.metrics["expected_utility"],
               "front_size": res.metrics["front_size"], "seconds": round(secs, 1)}
        for key in ("hv_ratio", "eu_ratio", "front_coverage"):
            row[key] = (res.compare or {}).get(key, float("nan"))
        rows.append(row)
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in row.items()), flush=True)
    for key in ("hv_ratio", "eu_ratio"):
        vals = np.array([r[key] for r in rows])
        print(f"mean {key}: {vals.mean():.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
