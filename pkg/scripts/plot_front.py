"""Export a run's archive and front as whitespace-separated columns for plotting.

Writes ``archive.dat`` and ``front.dat`` next to the CSVs (gnuplot/pgfplots ready).
With ``--png`` and two objectives, also draws a scatter with matplotlib.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from cmorl.driver import read_front_csv


def export(csv_path: Path) -> Path:
    sols = read_front_csv(csv_path)
    out = csv_path.with_suffix(".dat")
    P = np.stack([s.returns for s in sols]) if sols else np.zeros((0, 0))
    header = " ".join(f"g{i + 1}" for i in range(P.shape[1])) if len(P) else ""
    np.savetxt(out, P, fmt="%.10g", header=header, comments="# ")
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dir")
    p.add_argument("--png", action="store_true")
    args = p.parse_args(argv)
    run = Path(args.run_dir)
    for name in ("archive.csv", "front.csv"):
        print(export(run / name))
    if args.png:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        A = np.loadtxt(run / "archive.dat", ndmin=2)
        F = np.loadtxt(run / "front.dat", ndmin=2)
        if A.shape[1] != 2:
            print("scatter needs two objectives", file=sys.stderr)
            return 1
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(A[:, 0], A[:, 1], s=8, c="0.7", label="archive")
        ax.scatter(F[:, 0], F[:, 1], s=16, c="C3", label="front")
        ax.set_xlabel("objective 1")
        ax.set_ylabel("objective 2")
        ax.legend()
        fig.tight_layout()
        fig.savefig(run / "front.png", dpi=150)
        print(run / "front.png")
    return 0


if __name__ == "__main__":
    sys.exit(main())
