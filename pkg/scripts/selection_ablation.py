"""Crowd-distance versus random extension selection on paired seeds.

    python3 scripts/selection_ablation.py --config configs/fruit_tree.yaml
"""

import argparse
import math
import sys

import numpy as np

from run_experiment import run_seeds


def hypervolumes(config, seeds, method, out):
    return np.array([res.compare["run_hypervolume"] if res.compare else res.metrics["hypervolume"]
                     for _, res, _ in run_seeds(config, seeds, [f"extension.selection={method}"],
                                                f"{out}/{method}")])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/fruit_tree.yaml")
    p.add_argument("--seeds", type=int, nargs="+", default=[10, 11, 12, 13, 14])
    p.add_argument("--out", default="runs/selection")
    args = p.parse_args(argv)

    crowd = hypervolumes(args.config, args.seeds, "crowd", args.out)
    rand = hypervolumes(args.config, args.seeds, "random", args.out)
    diff = crowd - rand
    print("seed  crowd  random")
    for s, a, b in zip(args.seeds, crowd, rand):
        print(f"{s:>4} {a:.6g} {b:.6g}")
    se = diff.std(ddof=1) / math.sqrt(len(diff)) if len(diff) > 1 else float("nan")
    print(f"paired difference {diff.mean():.6g} (stderr {se:.3g})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
