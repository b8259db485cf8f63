"""Constrained policy updates for Pareto extension.

Each update pushes one objective ``l`` up while holding every other objective
above a threshold ``d_i``:

* :func:`ipo_update` adds log-barrier terms ``log(G_i - d_i) / t`` to the PPO
  clipped surrogate of objective ``l``.
* :func:`cpo_update` solves a linearized trust-region subproblem through its
  analytic single-constraint dual (two objectives only).
* :func:`lagrangian_solver` runs projected two-timescale primal-dual ascent
  and is kept as a reference solver.

Constrained returns are estimated from the batch with the surrogate
``G_i(theta) = G_i + (1/E) sum_t gamma^h_t (ratio_t - 1) A_i,t``, which equals
the batch return at the behaviour policy and is differentiable in theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .policy import (AdvantageBatch, NumericalError, PPOConfig, TrainState, clip_norm,
                     fisher_vector_product, fit_value, log_softmax, mean_kl, minibatch_indices,
                     normalized_advantages, scalarized_pg_step, surrogate_gradient)


@dataclass(frozen=True)
class ConstraintSpec:
    """Optimized index ``l``, relaxation ``beta``, barrier weight ``t``, trust
    radius ``delta`` and (once resolved) thresholds ``d`` with ``d[l] = nan``."""

    l: int
    beta: float = 0.9
    t: float = 20.0
    delta: float = 0.01
    d: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.t <= 0 or self.delta <= 0:
            raise ValueError("t and delta must be positive")
        if self.d is not None:
            d = np.array(self.d, dtype=np.float64)
            others = np.delete(d, self.l)
            if not np.all(np.isfinite(others)):
                raise ValueError("thresholds must be finite off the optimized index")
            d[self.l] = np.nan
            d.setflags(write=False)
            object.__setattr__(self, "d", d)

    @property
    def constrained(self) -> np.ndarray:
        return np.array([i for i in range(len(self.d)) if i != self.l])


@dataclass
class FeasibilityReport:
    margins: np.ndarray
    feasible: bool
    violated: list[int]

    def to_dict(self) -> dict:
        return {"margins": [None if np.isnan(m) else float(m) for m in self.margins],
                "feasible": self.feasible, "violated": self.violated}


def resolve_thresholds(spec: ConstraintSpec, current_returns) -> ConstraintSpec:
    """``d_i = G_i - (1 - beta)|G_i|``: equal to ``beta * G_i`` for nonnegative
    returns and still a relaxation for negative ones."""
    G = np.asarray(current_returns, dtype=np.float64)
    if not np.all(np.isfinite(G)):
        raise ValueError("current returns must be finite")
    if not 0 <= spec.l < len(G):
        raise ValueError(f"objective index {spec.l} out of range")
    return replace(spec, d=G - (1.0 - spec.beta) * np.abs(G))


def proposition1_spec(spec: ConstraintSpec, thresholds) -> ConstraintSpec:
    return replace(spec, d=np.asarray(thresholds, dtype=np.float64))


def check_constraints(returns, spec: ConstraintSpec, slack: float = 0.0) -> FeasibilityReport:
    G = np.asarray(returns, dtype=np.float64)
    margins = G - spec.d
    margins[spec.l] = np.nan
    violated = [int(i) for i in spec.constrained if margins[i] < -slack]
    return FeasibilityReport(margins, not violated, violated)


def barrier_value(returns, spec: ConstraintSpec) -> float:
    """``G_l + sum_{i != l} log(G_i - d_i) / t``; ``-inf`` if any margin is <= 0."""
    G = np.asarray(returns, dtype=np.float64)
    m = G[spec.constrained] - spec.d[spec.constrained]
    if np.any(m <= 0):
        return -math.inf
    return float(G[spec.l] + np.sum(np.log(m)) / spec.t)


# --------------------------------------------------------------------------
# surrogate returns


def surrogate_returns(policy, batch: AdvantageBatch, base) -> np.ndarray:
    """Importance-weighted first-order return estimate at ``policy``'s parameters."""
    lp = log_softmax(policy.logits(batch.inputs))[np.arange(len(batch)), batch.actions]
    w = batch.gamma ** batch.steps * (np.exp(lp - batch.log_probs) - 1.0)
    return np.asarray(base, dtype=np.float64) + w @ batch.advantages / batch.n_episodes


def return_gradients(policy, batch: AdvantageBatch, idx=None, scale: float = 1.0) -> np.ndarray:
    """Rows ``i``: gradient of the surrogate return of objective ``i``.

    With ``idx`` the sum runs over that minibatch only, multiplied by ``scale``.
    """
    idx = np.arange(len(batch)) if idx is None else idx
    X, a = batch.inputs[idx], batch.actions[idx]
    lp_all = log_softmax(policy.logits(X))
    p = np.exp(lp_all)
    ratio = np.exp(lp_all[np.arange(len(idx)), a] - batch.log_probs[idx])
    coef = batch.gamma ** batch.steps[idx] * ratio * scale / batch.n_episodes
    out = []
    for i in range(batch.n_objectives):
        c = coef * batch.advantages[idx, i]
        U = -p * c[:, None]
        U[np.arange(len(idx)), a] += c
        out.append(policy.vjp(X, U))
    return np.array(out)


# --------------------------------------------------------------------------
# interior point (log barrier)


def ipo_update(state: TrainState, batch: AdvantageBatch, spec: ConstraintSpec, cfg: PPOConfig,
               rng: np.random.Generator, base_returns=None, slack: float = 0.0):
    """One round of barrier-augmented PPO epochs on objective ``spec.l``.

    ``base_returns`` anchors the surrogate constraint estimates (defaults to the
    batch mean return). Infeasible starts are rejected without an update. A
    minibatch step that would drive any surrogate margin to <= 0 is undone
    and ends the round.
    """
    base = batch.mean_return() if base_returns is None else np.asarray(base_returns, float)
    report = check_constraints(base, spec)
    cons = spec.constrained
    diag = {"solver": "ipo", "l": spec.l, "margins_before": report.to_dict()["margins"]}
    if np.any(report.margins[cons] <= slack):
        diag.update(accepted=False, reason="infeasible_at_entry", report=report.to_dict())
        return state, diag

    new = state.clone()
    A, _, _ = normalized_advantages(batch, cfg.normalize_advantages)
    adv_l = A[:, spec.l]
    N = len(batch)
    steps = 0
    reverted = False
    barrier_weights = []
    for _ in range(cfg.epochs):
        margins = surrogate_returns(new.policy, batch, base)[cons] - spec.d[cons]
        weights = 1.0 / (spec.t * margins)
        barrier_weights.append(weights.tolist())
        for idx in minibatch_indices(N, cfg.minibatches, rng):
            g, obj, _ = surrogate_gradient(new.policy, batch.inputs[idx], batch.actions[idx],
                                           batch.log_probs[idx], adv_l[idx], cfg.clip, cfg.clipped)
            gb = return_gradients(new.policy, batch, idx, N / len(idx))[cons]
            g = g + weights @ gb
            if not (np.isfinite(obj) and np.all(np.isfinite(g))):
                raise NumericalError("non-finite IPO objective", {"objective": obj})
            prev_theta = new.policy.theta
            prev_m, prev_v, prev_t = new.policy_opt.m, new.policy_opt.v, new.policy_opt.t
            new.policy.theta = new.policy_opt.step(prev_theta, clip_norm(g, cfg.max_grad_norm))
            after = surrogate_returns(new.policy, batch, base)[cons] - spec.d[cons]
            if np.any(after <= 0):
                new.policy.theta = prev_theta
                new.policy_opt.m, new.policy_opt.v, new.policy_opt.t = prev_m, prev_v, prev_t
                reverted = True
                break
            fit_value(new, batch, idx, cfg)
            steps += 1
        if reverted:
            break

    est = surrogate_returns(new.policy, batch, base)
    after = est - spec.d
    diag.update(
        accepted=steps > 0,
        minibatch_steps=steps,
        reverted=reverted,
        margins_after=[None if i == spec.l else float(after[i]) for i in range(len(after))],
        surrogate_returns=est.tolist(),
        barrier=float(np.sum(np.log(after[cons])) / spec.t),
        barrier_weights=barrier_weights,
        kl=mean_kl(state.policy, new.policy, batch.inputs),
    )
    return new, diag


# --------------------------------------------------------------------------
# trust region (analytic dual)


def conjugate_gradient(Avp, b, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    for _ in range(iters):
        if rr < tol:
            break
        Ap = Avp(p)
        alpha = rr / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def cpo_dual_value(lam, nu, q, r, s, c, delta) -> float:
    """Dual objective (to be maximized) of the linearized trust-region subproblem."""
    return -(q - 2.0 * r * nu + s * nu ** 2) / (2.0 * lam) + nu * c - lam * delta


@dataclass
class CPOStep:
    x: np.ndarray | None
    lam: float
    nu: float
    q: float
    r: float
    s: float
    c: float
    dual_value: float
    infeasible: bool
    case: str


def cpo_dual(q: float, r: float, s: float, c: float, delta: float, eps: float = 1e-12):
    """Optimal ``(lam, nu, case)`` for

        max_x g.x  s.t.  c + b.x <= 0,  x.Hx / 2 <= delta

    given ``q = g.H^-1 g``, ``r = g.H^-1 b``, ``s = b.H^-1 b``. ``case`` is
    ``"infeasible"`` when no point of the trust region satisfies the constraint.
    """
    if s <= eps:
        if c > 0:
            return math.nan, math.nan, "infeasible"
        return math.sqrt(max(q, eps) / (2 * delta)), 0.0, "inactive"
    if c > 0 and c * c / s > 2 * delta:
        return math.nan, math.nan, "infeasible"

    def best_nu(lam):
        return max(0.0, (lam * c + r) / s)

    def value(lam):
        return cpo_dual_value(lam, best_nu(lam), q, r, s, c, delta)

    # nu > 0 exactly on {lam : lam * c + r > 0}
    if c > 0:
        a_lo, a_hi = max(0.0, -r / c), math.inf
        b_lo, b_hi = 0.0, max(0.0, -r / c)
    elif c < 0:
        a_lo, a_hi = 0.0, max(0.0, -r / c)
        b_lo, b_hi = max(0.0, -r / c), math.inf
    else:
        a_lo, a_hi = (0.0, math.inf) if r > 0 else (0.0, 0.0)
        b_lo, b_hi = (0.0, 0.0) if r > 0 else (0.0, math.inf)

    cands = []
    if a_hi > a_lo:
        num = max(q - r * r / s, 0.0)
        den = 2 * delta - c * c / s
        lam_a = math.sqrt(num / den) if den > 0 else math.inf
        cands.append((min(max(lam_a, a_lo), a_hi), "active"))
    if b_hi > b_lo:
        lam_b = math.sqrt(max(q, eps) / (2 * delta))
        cands.append((min(max(lam_b, b_lo), b_hi), "inactive"))
    best = None
    for lam, case in cands:
        if not math.isfinite(lam):
            continue
        if lam <= 0.0:
            # limit lam -> 0 is only admissible when g lies in span(b): value -> nu c + r c / s
            if q - r * r / s > 1e-12 * max(q, 1.0):
                continue
            v = r * c / s if case == "active" else -math.inf
        else:
            v = value(lam)
        if best is None or v > best[0]:
            best = (v, lam, case)
    if best is None:
        return math.nan, math.nan, "infeasible"
    _, lam, case = best
    return lam, (best_nu(lam) if lam > 0 else max(0.0, r / s)), case


def solve_cpo_subproblem(g, b, c: float, delta: float, H=None, hvp=None, cg_iters: int = 10,
                         damping: float = 0.1) -> CPOStep:
    """Step ``x`` maximizing ``g.x`` under the linearized constraint and trust region.

    Pass an explicit matrix ``H`` (solved exactly) or a product ``hvp`` (solved by
    damped conjugate gradient).
    """
    g = np.asarray(g, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if H is not None:
        Hmat = np.asarray(H, dtype=np.float64)
        solve = lambda v: np.linalg.solve(Hmat, v)  # noqa: E731
    else:
        solve = lambda v: conjugate_gradient(lambda p: hvp(p) + damping * p, v, cg_iters)  # noqa: E731
    Hg, Hb = solve(g), solve(b)
    q, r, s = float(g @ Hg), float(g @ Hb), float(b @ Hb)
    lam, nu, case = cpo_dual(q, r, s, c, delta)
    if case == "infeasible":
        return CPOStep(None, lam, nu, q, r, s, c, -math.inf, True, case)
    if case == "active":
        resid = Hg - (r / s) * Hb
        x = -(c / s) * Hb
        if lam > 0 and q - r * r / s > 1e-12 * max(q, 1.0):
            x = x + resid / lam
    else:
        x = Hg / lam
    dual = cpo_dual_value(lam, nu, q, r, s, c, delta) if lam > 0 else r * c / s
    return CPOStep(x, lam, nu, q, r, s, c, dual, False, case)


def cpo_update(state: TrainState, batch: AdvantageBatch, spec: ConstraintSpec, cfg: PPOConfig,
               rng: np.random.Generator, base_returns=None, cg_iters: int = 10,
               damping: float = 0.1, backtrack_steps: int = 10, backtrack_ratio: float = 0.8):
    """Trust-region step for two objectives. Returns ``(state', diagnostics)``;
    ``diagnostics["infeasible"]`` flags a terminated direction."""
    if batch.n_objectives != 2:
        raise ValueError("cpo_update handles exactly one constraint (two objectives)")
    i = 1 - spec.l
    base = batch.mean_return() if base_returns is None else np.asarray(base_returns, float)
    pol = state.policy
    A, _, _ = normalized_advantages(batch, cfg.normalize_advantages)
    g, _, _ = surrogate_gradient(pol, batch.inputs, batch.actions, batch.log_probs,
                                 A[:, spec.l], cfg.clip, clipped=False)
    grad_i = return_gradients(pol, batch)[i]
    c = float(spec.d[i] - base[i])
    step = solve_cpo_subproblem(g, -grad_i, c, spec.delta,
                                hvp=lambda v: fisher_vector_product(pol, batch.inputs, v),
                                cg_iters=cg_iters, damping=damping)
    diag = {"solver": "cpo", "l": spec.l, "c": c, "q": step.q, "r": step.r, "s": step.s,
            "lambda": step.lam, "nu": step.nu, "case": step.case}
    if step.infeasible:
        diag.update(accepted=False, infeasible=True, reason="subproblem_infeasible")
        return state, diag

    def surrogate_obj(p):
        lp = log_softmax(p.logits(batch.inputs))[np.arange(len(batch)), batch.actions]
        return float(np.mean(np.exp(lp - batch.log_probs) * A[:, spec.l]))

    obj0 = surrogate_obj(pol)
    new = state.clone()
    accepted, frac = False, 1.0
    for _ in range(backtrack_steps):
        cand = pol.with_params(pol.theta + frac * step.x)
        kl = mean_kl(pol, cand, batch.inputs)
        Gi = surrogate_returns(cand, batch, base)[i]
        improve = surrogate_obj(cand) >= obj0 or c > 0
        if kl <= spec.delta and Gi >= spec.d[i] and improve:
            new.policy = cand
            accepted = True
            break
        frac *= backtrack_ratio
    if accepted:
        for _ in range(cfg.epochs):
            for idx in minibatch_indices(len(batch), cfg.minibatches, rng):
                fit_value(new, batch, idx, cfg)
    diag.update(accepted=accepted, infeasible=False, step_fraction=frac if accepted else 0.0,
                kl=mean_kl(pol, new.policy, batch.inputs),
                surrogate_returns=surrogate_returns(new.policy, batch, base).tolist())
    return new, diag


# --------------------------------------------------------------------------
# primal-dual reference solver


@dataclass
class DualState:
    """Multipliers (``lam[l]`` unused) and base step sizes.

    The dual step decays as ``eta1 / (1 + k) ** decay`` so that the ratio of
    dual to primal step sizes vanishes.
    """

    lam: np.ndarray
    eta1: float = 0.05
    eta2: float = 0.5
    decay: float = 0.6
    lam_max: float = 100.0

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64).copy()
        if np.any(self.lam < 0) or self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError("multipliers must be >= 0 and step sizes > 0")

    def eta1_at(self, k: int) -> float:
        return self.eta1 / (1.0 + k) ** self.decay


def _dual_step(dual: DualState, spec: ConstraintSpec, G, k):
    lam = dual.lam.copy()
    for i in spec.constrained:
        lam[i] = np.clip(lam[i] + dual.eta1_at(k) * (spec.d[i] - G[i]), 0.0, dual.lam_max)
    lam[spec.l] = 0.0
    return lam


def lagrangian_weights(spec: ConstraintSpec, lam) -> np.ndarray:
    w = np.array(lam, dtype=np.float64)
    w[spec.l] = 1.0
    return w


def lagrangian_solver(state: TrainState, spec: ConstraintSpec, dual: DualState, iterations: int,
                      *, env=None, cfg: PPOConfig | None = None, rng=None, model=None):
    """Alternate a policy ascent step on ``G_l - lam.(d - G)`` with a projected
    multiplier step ``lam_i <- clip(lam_i + eta1 (d_i - G_i), 0, lam_max)``.

    With ``model`` (a tabular MDP) returns and gradients are exact and the
    policy takes plain clipped gradient steps of size ``eta2``; otherwise each
    iteration samples a batch from ``env`` and calls :func:`scalarized_pg_step`
    with weights ``e_l + lam``. Returns ``(state', lam', history)``.
    """
    from .oracle import dp_evaluate, exact_policy_gradient, softmax_rows
    from .policy import collect_batch

    state = state.clone()
    dual = DualState(dual.lam, dual.eta1, dual.eta2, dual.decay, dual.lam_max)
    history = {"lam": [], "returns": [], "diverged": False}
    at_max = 0
    for k in range(iterations):
        w = lagrangian_weights(spec, dual.lam)
        if model is not None:
            logits = state.policy.theta.reshape(model.n_states, model.n_actions)
            G = dp_evaluate(model, softmax_rows(logits))
            grad = exact_policy_gradient(model, logits, w).ravel()
            state.policy.theta = state.policy.theta + dual.eta2 * clip_norm(grad, cfg.max_grad_norm
                                                                             if cfg else 0.5)
        else:
            batch = collect_batch(env, state.policy, state.value, cfg.steps_per_batch, rng,
                                  cfg.gae_lambda)
            G = batch.mean_return()
            state, _ = scalarized_pg_step(state, batch, w, cfg, rng)
        dual.lam = _dual_step(dual, spec, G, k)
        at_max += bool(np.any(dual.lam >= dual.lam_max))
        history["lam"].append(dual.lam.tolist())
        history["returns"].append(np.asarray(G).tolist())
    history["diverged"] = iterations > 0 and at_max > 0.5 * iterations
    return state, dual.lam, history
