"""Ground truth for small MOMDPs.

Exact returns by backward induction, exact Pareto fronts by enumerating
stationary deterministic policies, exact policy gradients for tabular softmax
policies, and a Monte-Carlo hypervolume estimator to cross-check
:func:`cmorl.pareto.hypervolume`.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pareto import Solution, hypervolume, nondominated_indices, reference_point


class EnumerationRefused(RuntimeError):
    """The policy space is too large to enumerate."""

    def __init__(self, estimate: float, limit: float):
        super().__init__(f"enumeration needs ~{estimate:.3g} evaluations, limit is {limit:.3g}")
        self.estimate = estimate
        self.limit = limit


@dataclass
class TabularModel:
    P: np.ndarray          # (S, A, S)
    R: np.ndarray          # (S, A, n)
    start: int
    terminal: np.ndarray   # (S,) bool, absorbing with zero value
    horizon: int
    gamma: float

    def __post_init__(self):
        rows = self.P.sum(axis=2)
        if not np.allclose(rows, 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def n_objectives(self) -> int:
        return self.R.shape[2]

    @property
    def deterministic(self) -> bool:
        return bool(np.all(self.P.max(axis=2) == 1.0))


def extract_model(env) -> TabularModel:
    return TabularModel(env.P.copy(), env.R.copy(), env.start, env.terminal.copy(),
                        env.spec.horizon, env.spec.gamma)


def _policy_matrix(model: TabularModel, policy) -> np.ndarray:
    pi = np.asarray(policy)
    if pi.ndim == 1:
        onehot = np.zeros((model.n_states, model.n_actions))
        onehot[np.arange(model.n_states), pi.astype(int)] = 1.0
        return onehot
    return pi.astype(np.float64)


def _backward(model: TabularModel, pi: np.ndarray, R: np.ndarray):
    """Q and V tables for every step-to-go; terminal states are worth zero."""
    H = model.horizon
    live = ~model.terminal
    V = np.zeros((H + 1,) + R.shape[:1] + R.shape[2:])
    Q = np.zeros((H,) + R.shape)
    for h in range(H - 1, -1, -1):
        q = R + model.gamma * np.einsum("sat,t...->sa...", model.P, V[h + 1])
        q[~live] = 0.0
        Q[h] = q
        V[h] = np.einsum("sa,sa...->s...", pi, q)
    return Q, V


def dp_evaluate(model: TabularModel, policy) -> np.ndarray:
    """Exact discounted return vector of ``policy`` from the start state.

    ``policy`` is either an action per state or an ``(S, A)`` probability table.
    """
    pi = _policy_matrix(model, policy)
    _, V = _backward(model, pi, model.R)
    return V[0, model.start].copy()


def state_visitation(model: TabularModel, pi: np.ndarray) -> np.ndarray:
    """``rho[h, s]``: probability of being in ``s`` (and still running) at step ``h``."""
    rho = np.zeros((model.horizon, model.n_states))
    d = np.zeros(model.n_states)
    d[model.start] = 1.0
    for h in range(model.horizon):
        d = np.where(model.terminal, 0.0, d)
        rho[h] = d
        d = np.einsum("s,sa,sat->t", d, pi, model.P)
    return rho


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def exact_policy_gradient(model: TabularModel, logits: np.ndarray, weights) -> np.ndarray:
    """Gradient of ``weights @ G`` with respect to tabular softmax logits.

    Uses exact advantages: sum over steps of
    ``gamma**h * rho_h(s) * pi(a|s) * (Q_h(s, a) - V_h(s))``.
    """
    w = np.asarray(weights, dtype=np.float64)
    pi = softmax_rows(np.asarray(logits, dtype=np.float64))
    Rw = model.R @ w
    Q, V = _backward(model, pi, Rw)
    rho = state_visitation(model, pi)
    grad = np.zeros_like(pi)
    for h in range(model.horizon):
        adv = Q[h] - V[h][:, None]
        grad += model.gamma ** h * rho[h][:, None] * pi * adv
    return grad


def scalarized_return(model: TabularModel, logits: np.ndarray, weights) -> float:
    return float(dp_evaluate(model, softmax_rows(logits)) @ np.asarray(weights, dtype=np.float64))


# --------------------------------------------------------------------------
# exhaustive fronts


@dataclass
class OracleResult:
    front: list[Solution]
    candidates: np.ndarray
    reference: np.ndarray
    hypervolume: float
    policies: list[dict]

    def points(self) -> np.ndarray:
        return np.stack([s.returns for s in self.front])


def _enumerate_deterministic(model: TabularModel, max_nodes: float):
    nxt = np.argmax(model.P, axis=2)
    gamma, H = model.gamma, model.horizon
    returns, maps = [], []
    visited = 0

    def finish(rewards, pol):
        g = np.zeros(model.n_objectives)
        for r in reversed(rewards):
            g = r + gamma * g
        returns.append(g)
        maps.append(dict(pol))

    def dfs(s, t, rewards, pol):
        nonlocal visited
        visited += 1
        if visited > max_nodes:
            raise EnumerationRefused(float(model.n_actions) ** min(model.n_states, H), max_nodes)
        if t == H or model.terminal[s]:
            finish(rewards, pol)
            return
        choices = (pol[s],) if s in pol else range(model.n_actions)
        for a in choices:
            fresh = s not in pol
            if fresh:
                pol[s] = a
            dfs(int(nxt[s, a]), t + 1, rewards + [model.R[s, a]], pol)
            if fresh:
                del pol[s]

    dfs(model.start, 0, [], {})
    return np.array(returns), maps


def _reachable(model: TabularModel) -> list[int]:
    seen = {model.start}
    frontier = [model.start]
    for _ in range(model.horizon):
        new = []
        for s in frontier:
            if model.terminal[s]:
                continue
            for t in np.flatnonzero(model.P[s].sum(axis=0) > 0):
                if int(t) not in seen:
                    seen.add(int(t))
                    new.append(int(t))
        frontier = new
    return sorted(s for s in seen if not model.terminal[s])


def _enumerate_stochastic(model: TabularModel, max_nodes: float):
    states = _reachable(model)
    count = float(model.n_actions) ** len(states)
    if count > max_nodes:
        raise EnumerationRefused(count, max_nodes)
    returns, maps = [], []
    base = np.zeros(model.n_states, dtype=int)
    for combo in itertools.product(range(model.n_actions), repeat=len(states)):
        pi = base.copy()
        pi[states] = combo
        returns.append(dp_evaluate(model, pi))
        maps.append(dict(zip(states, combo)))
    return np.array(returns), maps


def exact_pareto_front(model: TabularModel, max_nodes: float = 1e7) -> OracleResult:
    """Non-dominated returns over all stationary deterministic policies.

    Deterministic models are enumerated path by path (a state's action is fixed
    the first time the path visits it), which for trees means one path per
    leaf. Stochastic models enumerate full action maps over reachable states.
    """
    if model.deterministic:
        cand, maps = _enumerate_deterministic(model, max_nodes)
    else:
        cand, maps = _enumerate_stochastic(model, max_nodes)
    idx = nondominated_indices(cand)
    front = [Solution(f"oracle/{k}", cand[j], "oracle") for k, j in enumerate(idx)]
    ref = reference_point(cand)
    return OracleResult(front, cand, ref, hypervolume(cand[idx], ref), [maps[j] for j in idx])


def oracle_record(env, result: OracleResult) -> dict:
    return {
        "env": env.env_id,
        "params": env.params,
        "front": [s.returns.tolist() for s in result.front],
        "hypervolume": result.hypervolume,
        "reference_point": result.reference.tolist(),
    }


def _cache_dir() -> Path:
    return Path(os.environ.get("CMORL_CACHE", Path.home() / ".cache" / "cmorl"))


def cached_oracle(env, cache_dir: str | Path | None = None, max_nodes: float = 1e7) -> dict:
    """Oracle record for ``env``, computed once per (env id, params) and kept on disk."""
    cache = Path(cache_dir) if cache_dir is not None else _cache_dir()
    key = env.env_id + "_" + "_".join(f"{k}={env.params[k]}" for k in sorted(env.params))
    path = cache / f"{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    record = oracle_record(env, exact_pareto_front(extract_model(env), max_nodes))
    cache.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record))
    tmp.replace(path)
    return record


# --------------------------------------------------------------------------
# Monte-Carlo hypervolume


def mc_hypervolume(front, reference, samples: int = 10**6, seed: int = 0,
                   chunk: int = 200_000) -> tuple[float, float]:
    """Dominated-volume estimate and its standard error from uniform box samples."""
    if samples < 10**4:
        raise ValueError("use at least 1e4 samples")
    P = np.atleast_2d(np.asarray([getattr(s, "returns", s) for s in front], dtype=np.float64))
    ref = np.asarray(reference, dtype=np.float64)
    upper = P.max(axis=0)
    box = float(np.prod(upper - ref))
    if box <= 0.0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    left = samples
    while left > 0:
        m = min(chunk, left)
        Z = ref + rng.random((m, len(ref))) * (upper - ref)
        dom = np.zeros(m, dtype=bool)
        for p in P:
            dom |= np.all(Z <= p, axis=1)
        hits += int(dom.sum())
        left -= m
    frac = hits / samples
    return box * frac, box * float(np.sqrt(frac * (1.0 - frac) / samples))
