"""Hypervolume against the threshold relaxation beta, paired over seeds.

    python3 scripts/beta_sweep.py --betas 0.5 0.7 0.9 --seeds 10 11 12 13 14
"""

import argparse
import math
import sys

import numpy as np

from run_experiment import run_seeds


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/grid_tradeoff.yaml")
    p.add_argument("--betas", type=float, nargs="+", default=[0.5, 0.7, 0.9])
    p.add_argument("--seeds", type=int, nargs="+", default=[10, 11, 12, 13, 14])
    p.add_argument("--out", default="runs/beta_sweep")
    args = p.parse_args(argv)

    print(f"{'beta':>6}{'mean HV':>14}{'stderr':>12}")
    for beta in args.betas:
        hv = np.array([res.compare["run_hypervolume"] if res.compare else res.metrics["hypervolume"]
                       for _, res, _ in run_seeds(args.config, args.seeds, [f"extension.beta={beta}"],
                                                  f"{args.out}/beta{beta}")])
        se = hv.std(ddof=1) / math.sqrt(len(hv)) if len(hv) > 1 else float("nan")
        print(f"{beta:>6g}{hv.mean():>14.6g}{se:>12.3g}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
