"""Two-stage orchestration: Pareto initialization, Pareto extension, assignment.

A run directory contains::

    config.yaml      resolved configuration
    events.jsonl     one JSON record per training task / constrained update
    checkpoints/     one JSON policy checkpoint per final front member
    archive.csv      every archived solution (append order)
    front.csv        the final non-dominated subset
    metrics.json     hypervolume, expected utility, sparsity, reference point
    summary.json     budget accounting and wall-clock timings
    oracle.json, compare.json   when the oracle comparison is requested
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import qmc

from .config import RunConfig
from .constrained import (ConstraintSpec, DualState, cpo_update, ipo_update,
                          lagrangian_solver, proposition1_spec, resolve_thresholds)
from .envs import make_env
from .policy import (NumericalError, PPOConfig, TrainState, collect_batch, evaluate_with_stderr,
                     make_policy, save_checkpoint, scalarized_pg_step)
from .pareto import (Archive, Solution, crowd_distance, expected_utility, hypervolume,
                     preference_grid, proposition1_thresholds,
                     reference_point, select_policies, smp_assign, sparsity)


# --------------------------------------------------------------------------
# helpers


def ppo_config(cfg: RunConfig, lr: float | None = None) -> PPOConfig:
    t = cfg.train
    return PPOConfig(steps_per_batch=t.steps_per_batch, epochs=t.epochs, minibatches=t.minibatches,
                     clip=t.clip, gae_lambda=t.gae_lambda, lr=lr or t.lr,
                     value_coef=t.value_coef, max_grad_norm=t.max_grad_norm,
                     entropy_coef=t.entropy_coef, normalize_advantages=t.normalize_advantages)


def build_env(cfg: RunConfig):
    return make_env(cfg.env.id, **cfg.env.params)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def evaluate_solution(env, policy, cfg: RunConfig, seed: int):
    """Returns used for archiving; deterministic env + greedy policy needs one episode."""
    m = cfg.metrics
    episodes = 1 if (env.deterministic and m.eval_mode == "greedy") else m.eval_episodes
    mean, _ = evaluate_with_stderr(env, policy, episodes, seed, m.eval_mode)
    return mean, episodes


def initialization_preferences(n: int, M: int, seed: int = 0) -> list[np.ndarray]:
    """One-hot vectors first, then scrambled-Halton points mapped onto the simplex."""
    if M < n:
        warnings.warn(f"M={M} < n={n}: only the first {M} one-hot preferences are used")
        return [np.eye(n)[i] for i in range(M)]
    prefs = [np.eye(n)[i] for i in range(n)]
    if M > n:
        u = qmc.Halton(d=n - 1, scramble=True, seed=seed).random(M - n)
        # sorted uniforms -> spacings are uniform on the simplex
        cuts = np.sort(u, axis=1)
        pts = np.diff(np.hstack([np.zeros((len(u), 1)), cuts, np.ones((len(u), 1))]), axis=1)
        prefs += list(pts)
    return prefs


# --------------------------------------------------------------------------
# stage 1


@dataclass
class InitTaskResult:
    index: int
    preference: np.ndarray
    snapshots: list  # (label, TrainState, returns, episodes)
    env_steps: int
    events: list
    failed: str | None = None


def _init_task(cfg: RunConfig, index: int, preference, seed: int) -> InitTaskResult:
    env = build_env(cfg)
    pcfg = ppo_config(cfg)
    policy, value = make_policy(cfg.train.policy, env, seed, tuple(cfg.train.hidden))
    state = TrainState.fresh(policy, value, pcfg)
    rng = np.random.default_rng(seed)
    iters = cfg.train.init_steps // cfg.train.steps_per_batch
    every = max(1, int(round(cfg.train.buffer_fraction * iters)))
    marks = {k for k in range(every, iters, every)}
    snaps, events, steps = [], [], 0
    eval_seed = seed + 7919

    def snap(label):
        G, eps = evaluate_solution(env, state.policy, cfg, eval_seed)
        snaps.append((label, state.clone(), G, eps))

    try:
        for it in range(1, iters + 1):
            batch = collect_batch(env, state.policy, state.value, cfg.train.steps_per_batch, rng,
                                  cfg.train.gae_lambda)
            if hasattr(state.policy, "norm"):
                state.policy.norm.update(batch.observations)
            steps += len(batch)
            state, diag = scalarized_pg_step(state, batch, preference, pcfg, rng)
            events.append({"stage": "init", "task": index, "iteration": it, **diag})
            if it in marks:
                snap(f"b{it}")
        snap("final")
    except NumericalError as exc:
        return InitTaskResult(index, preference, snaps, steps, events, failed=str(exc))
    return InitTaskResult(index, preference, snaps, steps, events)


def _init_task_star(args):
    return _init_task(*args)


def _run_tasks(fn, argsets, workers: int):
    if workers <= 1 or len(argsets) <= 1:
        return [fn(a) for a in argsets]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, argsets))


def _task_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


@dataclass
class RunState:
    """Everything the extension stage needs: archive, live policies, logs."""

    archive: Archive
    states: dict = field(default_factory=dict)
    preferences: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    env_steps: int = 0
    init_steps: int = 0
    updates: int = 0
    failures: list = field(default_factory=list)


def pareto_initialization(cfg: RunConfig, preferences=None) -> RunState:
    env = build_env(cfg)
    n = env.spec.n_objectives
    prefs = preferences if preferences is not None else initialization_preferences(
        n, cfg.train.M, cfg.seed)
    argsets = [(cfg, m, np.asarray(w), _task_seed(cfg.seed, 1, m)) for m, w in enumerate(prefs)]
    results = _run_tasks(_init_task_star, argsets, cfg.workers)
    run = RunState(Archive())
    for res in results:
        run.events.extend(res.events)
        run.env_steps += res.env_steps
        if res.failed:
            run.failures.append({"stage": "init", "task": res.index, "error": res.failed})
            run.events.append({"stage": "init", "task": res.index, "failed": res.failed})
        for label, state, G, eps in res.snapshots:
            pid = f"init{res.index:02d}" if label == "final" else f"init{res.index:02d}_{label}"
            prov = "init" if label == "final" else "buffer"
            _archive(run, Solution(pid, G, prov), state, res.preference, eps)
    run.init_steps = run.env_steps
    return run


def _archive(run: RunState, sol: Solution, state: TrainState, preference, episodes) -> bool:
    entered = run.archive.add(sol)
    run.states[sol.policy_id] = state
    run.preferences[sol.policy_id] = preference
    run.events.append({"stage": "archive", "solution": sol.policy_id, "provenance": sol.provenance,
                       "returns": sol.returns, "episodes": episodes, "front": entered})
    return entered


# --------------------------------------------------------------------------
# stage 2


@dataclass
class DirectionResult:
    parent: str
    l: int
    candidates: list  # (step, TrainState, returns, episodes, thresholds)
    events: list
    env_steps: int
    updates: int
    terminated: str | None = None


def _direction_task(args) -> DirectionResult:
    cfg, state, parent, parent_returns, l, round_idx, seed, prop1_d = args
    env = build_env(cfg)
    x = cfg.extension
    pcfg = ppo_config(cfg, x.lr)
    rng = np.random.default_rng(seed)
    state = TrainState.fresh(state.policy.clone(), state.value.clone(), pcfg)
    base_spec = ConstraintSpec(l, x.beta, x.t, x.delta)
    dual = DualState(np.zeros(env.spec.n_objectives))
    cands, events, steps, updates = [], [], 0, 0
    for k in range(x.K_prime):
        batch = collect_batch(env, state.policy, state.value, pcfg.steps_per_batch, rng,
                              pcfg.gae_lambda)
        steps += len(batch)
        updates += 1
        base = None
        if x.fresh_eval:
            base, _ = evaluate_with_stderr(env, state.policy, x.fresh_episodes,
                                           _task_seed(seed, k, 0), "stochastic")
        G_r = batch.mean_return() if base is None else base
        if prop1_d is None:
            spec = resolve_thresholds(base_spec, G_r)
        else:
            if k == 0:
                # keep the parent's greedy margins, measured on the stochastic estimate;
                # the greedy gate at insertion is what enforces the guarantee
                shifted = G_r - (np.asarray(parent_returns, dtype=np.float64) - prop1_d)
            spec = proposition1_spec(base_spec, shifted)
        ev = {"stage": "extension", "round": round_idx, "parent": parent, "l": l, "step": k,
              "thresholds": spec.d, "base_returns": G_r}
        try:
            if x.solver == "ipo":
                new, diag = ipo_update(state, batch, spec, pcfg, rng, base_returns=base,
                                       slack=x.slack)
            elif x.solver == "cpo":
                new, diag = cpo_update(state, batch, spec, pcfg, rng, base_returns=base)
            else:
                new, lam, hist = lagrangian_solver(state, spec, dual, 1, env=env, cfg=pcfg, rng=rng)
                dual.lam = lam
                diag = {"solver": "lagrangian", "accepted": True, "lam": lam,
                        "diverged": hist["diverged"]}
                steps += pcfg.steps_per_batch  # the solver draws its own batch
        except NumericalError as exc:
            events.append({**ev, "accepted": False, "error": str(exc)})
            return DirectionResult(parent, l, cands, events, steps, updates, f"numerical: {exc}")
        ev.update(diag)
        if x.fresh_eval and diag.get("accepted"):
            after, err = evaluate_with_stderr(env, new.policy, x.fresh_episodes,
                                              _task_seed(seed, k, 1), "stochastic")
            ev.update(fresh_after=after, fresh_stderr=err)
        events.append(ev)
        if not diag.get("accepted"):
            reason = diag.get("reason", "rejected")
            return DirectionResult(parent, l, cands, events, steps, updates, reason)
        state = new
        G, eps = evaluate_solution(env, state.policy, cfg, _task_seed(seed, k, 2))
        cands.append((k, state.clone(), G, eps, spec.d))
    return DirectionResult(parent, l, cands, events, steps, updates)


def proposition1_gate(front: list[Solution], parent: Solution, G, l: int, floor) -> bool:
    """True when ``G`` provably cannot be dominated by ``front``: the parent is on
    the front, ``G`` beats the parent on ``l`` and clears every threshold."""
    if not any(s.policy_id == parent.policy_id for s in front):
        return False
    d = proposition1_thresholds(front, parent, l, floor)
    others = [i for i in range(len(G)) if i != l]
    return bool(G[l] > parent.returns[l] and all(G[i] > d[i] for i in others))


def pareto_extension(run: RunState, cfg: RunConfig) -> RunState:
    x = cfg.extension
    env = build_env(cfg)
    n = env.spec.n_objectives
    if x.solver == "cpo" and n != 2:
        raise ValueError("the cpo solver supports two objectives only")
    rounds = x.K // x.K_prime if x.K else 0
    sel_rng = np.random.default_rng(_task_seed(cfg.seed, 2))
    for r in range(rounds):
        selected = select_policies(run.archive.solutions, x.N, method=x.selection, rng=sel_rng)
        floor = reference_point(run.archive.returns())
        front = run.archive.front()
        argsets = []
        for j, sol in enumerate(selected):
            for l in range(n):
                d = (proposition1_thresholds(front, sol, l, floor)
                     if x.threshold_mode == "proposition1" else None)
                argsets.append((cfg, run.states[sol.policy_id], sol.policy_id, sol.returns, l, r,
                                _task_seed(cfg.seed, 3, r, j, l), d))
        results = _run_tasks(_direction_task, argsets, cfg.workers)
        run.events.append({"stage": "select", "round": r,
                           "selected": [s.policy_id for s in selected],
                           "crowd_distance": crowd_distance(front) if front else []})
        parents = {s.policy_id: s for s in selected}
        for res in results:
            run.events.extend(res.events)
            run.env_steps += res.env_steps
            run.updates += res.updates
            if res.terminated:
                run.failures.append({"stage": "extension", "round": r, "parent": res.parent,
                                     "l": res.l, "reason": res.terminated})
            for k, state, G, eps, d in res.candidates:
                pid = f"ext_r{r}_{res.parent}_l{res.l}_k{k}"
                sol = Solution(pid, G, f"extension(step={r * x.K_prime + k},l={res.l})")
                if x.threshold_mode == "proposition1":
                    cur_floor = reference_point(np.vstack([run.archive.returns(), G]))
                    if not proposition1_gate(run.archive.front(), parents[res.parent], G,
                                             res.l, cur_floor):
                        run.events.append({"stage": "gate", "solution": pid, "returns": G,
                                           "archived": False})
                        continue
                _archive(run, sol, state, run.preferences[res.parent], eps)
        keep = {run.archive[j].policy_id for j in run.archive.front_indices}
        run.states = {k: v for k, v in run.states.items() if k in keep}
    return run


# --------------------------------------------------------------------------
# metrics and persistence


def compute_metrics(front_points, reference, delta: float) -> dict:
    P = np.atleast_2d(np.asarray(front_points, dtype=np.float64))
    n = P.shape[1]
    return {
        "hypervolume": hypervolume(P, reference),
        "expected_utility": expected_utility(P, preference_grid(n, delta)),
        "sparsity": sparsity(P),
        "reference_point": [float(v) for v in reference],
        "delta": delta,
        "front_size": int(len(P)),
    }


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_solutions_csv(path, solutions, n: int, extra=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["solution_id", "provenance"] + [f"g_{i + 1}" for i in range(n)]
                   + (list(extra) if extra else []))
        for k, s in enumerate(solutions):
            row = [s.policy_id, s.provenance] + [format(float(v), ".17g") for v in s.returns]
            if extra:
                row += [extra[c][k] for c in extra]
            w.writerow(row)


def read_front_csv(path) -> list[Solution]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return []
    gcols = sorted((c for c in rows[0] if c.startswith("g_")), key=lambda c: int(c[2:]))
    return [Solution(r["solution_id"], np.array([float(r[c]) for c in gcols]), r["provenance"])
            for r in rows]


def oracle_comparison(front_points, oracle: dict, delta: float) -> dict:
    """Run-versus-oracle ratios measured with the oracle's reference point."""
    ref = np.asarray(oracle["reference_point"], dtype=np.float64)
    O = np.asarray(oracle["front"], dtype=np.float64)
    P = np.asarray(front_points, dtype=np.float64).reshape(-1, O.shape[1])
    hv = hypervolume(np.maximum(P, ref), ref) if len(P) else 0.0
    grid = preference_grid(O.shape[1], delta)
    eu_o = expected_utility(O, grid)
    eu = expected_utility(P, grid) if len(P) else 0.0
    covered = sum(bool(len(P)) and bool(np.any(np.all(P >= o - 1e-6, axis=1))) for o in O)
    return {"hv_ratio": hv / oracle["hypervolume"], "eu_ratio": eu / eu_o if eu_o else float("nan"),
            "front_coverage": covered / len(O), "run_hypervolume": hv,
            "oracle_hypervolume": oracle["hypervolume"], "reference_point": ref.tolist()}


@dataclass
class RunResult:
    archive: Archive
    front: list
    metrics: dict
    run_dir: Path
    timings: dict
    env_steps: int
    failures: list
    compare: dict | None = None


def run_cmorl(cfg: RunConfig, run_dir, preferences=None, initial: RunState | None = None) -> RunResult:
    """Full pipeline; ``initial`` reuses a finished initialization stage."""
    import copy

    cfg.validate()
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    env = build_env(cfg)
    n = env.spec.n_objectives
    timings = {}

    t0 = time.perf_counter()
    run = copy.deepcopy(initial) if initial is not None else pareto_initialization(cfg, preferences)
    timings["initialization"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    try:
        run = pareto_extension(run, cfg)
    finally:
        timings["extension"] = time.perf_counter() - t0
        _persist(run, cfg, run_dir, n)

    front = run.archive.front()
    P = np.stack([s.returns for s in front])
    ref = reference_point(run.archive.returns())
    metrics = compute_metrics(P, ref, cfg.metrics.delta)
    dump_json(run_dir / "metrics.json", metrics)
    compare = None
    if cfg.metrics.oracle:
        from .oracle import cached_oracle
        oracle = cached_oracle(env)
        dump_json(run_dir / "oracle.json", oracle)
        compare = oracle_comparison(P, oracle, cfg.metrics.delta)
        dump_json(run_dir / "compare.json", compare)
    dump_json(run_dir / "summary.json", {
        "env_steps": run.env_steps, "init_env_steps": run.init_steps,
        "constrained_updates": run.updates, "failures": run.failures, "timings": timings,
        "archive_size": len(run.archive), "front_size": len(front)})
    return RunResult(run.archive, front, metrics, run_dir, timings, run.env_steps, run.failures,
                     compare)


def _persist(run: RunState, cfg: RunConfig, run_dir: Path, n: int) -> None:
    with open(run_dir / "events.jsonl", "w", encoding="utf-8") as fh:
        for ev in run.events:
            fh.write(json.dumps(_jsonable(ev), sort_keys=True) + "\n")
    for pid, state in run.states.items():
        save_checkpoint(run_dir / "checkpoints" / f"{pid}.json", state.policy, state.value,
                        run.preferences.get(pid))
    sols = run.archive.solutions
    front_ids = set(run.archive.front_indices)
    write_solutions_csv(run_dir / "archive.csv", sols, n,
                        {"in_front": [int(k in front_ids) for k in range(len(sols))]})
    write_solutions_csv(run_dir / "front.csv", run.archive.front(), n)


def assign(run_dir, omega):
    """SMP assignment from a finished run: ``(solution, checkpoint_path)``."""
    run_dir = Path(run_dir)
    path = run_dir / "front.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; is {run_dir} a finished run?")
    front = read_front_csv(path)
    sol = smp_assign(front, omega)
    ckpt = run_dir / "checkpoints" / f"{sol.policy_id}.json"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} missing")
    return sol, ckpt
