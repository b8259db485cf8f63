"""``cmorl`` command line: run, metrics, oracle, compare, assign, grid.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
Run directories default to ``$CMORL_OUTPUT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .envs import ConfigError, make_env
from .oracle import EnumerationRefused, cached_oracle, exact_pareto_front, extract_model, oracle_record


def _out_root() -> Path:
    return Path(os.environ.get("CMORL_OUTPUT", "runs"))


def _print_json(obj) -> None:
    from .driver import _jsonable
    print(json.dumps(_jsonable(obj), indent=2, sort_keys=True))


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as comma-separated numbers") from None


def cmd_run(args) -> int:
    from .driver import run_cmorl
    cfg = load_config(args.config, args.set)
    run_dir = Path(args.out) if args.out else _out_root() / f"{cfg.name}_seed{cfg.seed}"
    res = run_cmorl(cfg, run_dir)
    m = res.metrics
    print(f"run directory: {res.run_dir}")
    print(f"{'env':<16}{'HV':>14}{'EU':>14}{'SP':>14}{'front':>8}")
    print(f"{cfg.env.id:<16}{m['hypervolume']:>14.6g}{m['expected_utility']:>14.6g}"
          f"{m['sparsity']:>14.6g}{m['front_size']:>8d}")
    if res.compare:
        print("oracle: " + ", ".join(f"{k}={res.compare[k]:.4f}"
                                     for k in ("hv_ratio", "eu_ratio", "front_coverage")))
    return 0


def cmd_metrics(args) -> int:
    from .driver import compute_metrics, read_front_csv
    front = read_front_csv(args.front)
    if not front:
        raise ConfigError(f"{args.front} holds no solutions")
    P = np.stack([s.returns for s in front])
    if args.ref is not None:
        ref = _parse_vector(args.ref)
    else:
        stored = Path(args.front).with_name("metrics.json")
        if not stored.exists():
            raise ConfigError("pass --ref (no metrics.json next to the front file)")
        ref = np.array(json.loads(stored.read_text())["reference_point"])
    _print_json(compute_metrics(P, ref, args.delta))
    return 0


def _env_from_args(args):
    params = {}
    for key in ("depth", "seed", "size", "nS", "nA", "n", "horizon"):
        v = getattr(args, key, None)
        if v is not None:
            params[key] = v
    return make_env(args.env, **params)


def cmd_oracle(args) -> int:
    env = _env_from_args(args)
    record = oracle_record(env, exact_pareto_front(extract_model(env), args.max_nodes))
    out = Path(args.out)
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{out}: {len(record['front'])} front points, hypervolume {record['hypervolume']:.10g}")
    return 0


def cmd_compare(args) -> int:
    from .config import load_config as _load
    from .driver import dump_json, oracle_comparison, read_front_csv
    run_dir = Path(args.run_dir)
    cfg = _load(run_dir / "config.yaml")
    env = make_env(cfg.env.id, **cfg.env.params)
    oracle = cached_oracle(env, max_nodes=args.max_nodes)
    front = read_front_csv(run_dir / "front.csv")
    P = np.stack([s.returns for s in front]) if front else np.zeros((0, env.spec.n_objectives))
    report = oracle_comparison(P, oracle, cfg.metrics.delta)
    dump_json(run_dir / "compare.json", report)
    _print_json(report)
    return 0


def cmd_assign(args) -> int:
    from .driver import assign
    w = _parse_vector(args.w)
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigError("weights must be nonnegative with a positive sum")
    if abs(w.sum() - 1.0) > 1e-6:
        print(f"warning: weights sum to {w.sum():g}; normalizing", file=sys.stderr)
        w = w / w.sum()
    sol, ckpt = assign(args.run_dir, w)
    print(f"solution: {sol.policy_id}")
    print(f"checkpoint: {ckpt}")
    print("returns: " + ",".join(format(float(v), ".17g") for v in sol.returns))
    print(f"utility: {float(w @ sol.returns):.17g}")
    return 0


def cmd_grid(args) -> int:
    from .pareto import preference_grid
    for w in preference_grid(args.n, args.d):
        print(" ".join(format(float(v), "g") for v in w))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmorl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train a policy set")
    r.add_argument("--config", required=True)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out", help="run directory (default: $CMORL_OUTPUT/<name>_seed<seed>)")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("metrics", help="recompute metrics from a front CSV")
    m.add_argument("front")
    m.add_argument("--ref", help="reference point, comma separated")
    m.add_argument("--delta", type=float, default=0.5)
    m.set_defaults(func=cmd_metrics)

    o = sub.add_parser("oracle", help="exact Pareto front by enumeration")
    o.add_argument("--env", required=True)
    for key in ("depth", "seed", "size", "nS", "nA", "n", "horizon"):
        o.add_argument(f"--{key}", type=int)
    o.add_argument("--max-nodes", type=float, default=1e7)
    o.add_argument("--out", default="oracle.json")
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("compare", help="compare a run against the oracle front")
    c.add_argument("run_dir")
    c.add_argument("--max-nodes", type=float, default=1e7)
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("assign", help="pick the front policy for a preference")
    a.add_argument("run_dir")
    a.add_argument("--w", required=True, help="comma-separated weights")
    a.set_defaults(func=cmd_assign)

    g = sub.add_parser("grid", help="print a preference grid")
    g.add_argument("-n", type=int, required=True)
    g.add_argument("-d", type=float, required=True)
    g.set_defaults(func=cmd_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except EnumerationRefused as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
