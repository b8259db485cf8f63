"""Pareto-set machinery: dominance, archives, crowding, selection and metrics.

All routines treat objectives as *maximized*. Return vectors are plain
``numpy`` float arrays; archive members are :class:`Solution` records.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class ReferencePointError(ValueError):
    """Raised when a hypervolume reference point is not dominated by the front."""


@dataclass(frozen=True)
class Solution:
    """A policy reference paired with its evaluated return vector."""

    policy_id: str
    returns: np.ndarray
    provenance: str = "init"

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=np.float64)
        if r.ndim != 1 or not np.all(np.isfinite(r)):
            raise ValueError(f"returns must be a finite vector, got {self.returns!r}")
        r.setflags(write=False)
        object.__setattr__(self, "returns", r)


def _as_points(items) -> np.ndarray:
    if len(items) == 0:
        return np.zeros((0, 0))
    if isinstance(items[0], Solution):
        return np.stack([s.returns for s in items])
    return np.atleast_2d(np.asarray(items, dtype=np.float64))


def dominates(a, b) -> bool:
    """True iff ``a`` is at least as good as ``b`` everywhere and better somewhere."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a >= b) and np.any(a > b))


def nondominated_indices(points) -> list[int]:
    """Indices of non-dominated rows; equal rows keep only the first occurrence."""
    P = _as_points(points)
    m = len(P)
    if m == 0:
        return []
    ge = np.all(P[:, None, :] >= P[None, :, :], axis=2)
    gt = np.any(P[:, None, :] > P[None, :, :], axis=2)
    dominated = np.any(ge & gt, axis=0)
    eq = ge & np.all(P[:, None, :] <= P[None, :, :], axis=2)
    # eq[i, j] with i < j marks j as a later duplicate of i
    dup = np.any(np.triu(eq, k=1), axis=0)
    return [j for j in range(m) if not dominated[j] and not dup[j]]


def nondominated_filter(solutions: Sequence[Solution]) -> list[Solution]:
    return [solutions[i] for i in nondominated_indices(solutions)]


class Archive:
    """Append-only solution store with an incrementally maintained front.

    Concurrent readers should work from :meth:`snapshot`; writes are expected
    to come from a single thread.
    """

    def __init__(self, solutions: Iterable[Solution] = ()):
        self._solutions: list[Solution] = []
        self._front: list[int] = []
        for s in solutions:
            self.add(s)

    def add(self, solution: Solution) -> bool:
        """Append ``solution``; return True if it entered the front."""
        if self._solutions and solution.returns.shape != self._solutions[0].returns.shape:
            raise ValueError("return vector length differs from archive")
        idx = len(self._solutions)
        self._solutions.append(solution)
        g = solution.returns
        for j in self._front:
            other = self._solutions[j].returns
            if np.all(other >= g):  # dominated or duplicate
                return False
        self._front = [j for j in self._front if not dominates(g, self._solutions[j].returns)]
        self._front.append(idx)
        self._front.sort()
        return True

    def __len__(self) -> int:
        return len(self._solutions)

    def __iter__(self):
        return iter(self._solutions)

    def __getitem__(self, i) -> Solution:
        return self._solutions[i]

    @property
    def solutions(self) -> list[Solution]:
        return list(self._solutions)

    @property
    def front_indices(self) -> list[int]:
        return list(self._front)

    def front(self) -> list[Solution]:
        return [self._solutions[j] for j in self._front]

    def snapshot(self) -> "Archive":
        a = Archive.__new__(Archive)
        a._solutions = list(self._solutions)
        a._front = list(self._front)
        return a

    def returns(self) -> np.ndarray:
        return _as_points(self._solutions)


def _stable_order(values: np.ndarray) -> np.ndarray:
    return np.argsort(values, kind="stable")


def crowd_distance(front) -> np.ndarray:
    """Normalized neighbour-gap density per front member.

    Sorted-boundary members get ``inf`` for that objective; an objective whose
    values are all equal contributes 0. Ties in an objective are ordered by
    position in ``front``.
    """
    P = _as_points(front)
    m, n = P.shape
    dist = np.zeros(m)
    for i in range(n):
        col = P[:, i]
        span = col.max() - col.min()
        if span == 0.0:
            continue
        order = _stable_order(col)
        term = np.empty(m)
        term[order[0]] = math.inf
        term[order[-1]] = math.inf
        for k in range(1, m - 1):
            term[order[k]] = (col[order[k + 1]] - col[order[k - 1]]) / span
        dist += term
    return dist


def extreme_indices(front) -> list[int]:
    """Per-objective argmax positions (first on ties), deduplicated, in objective order."""
    P = _as_points(front)
    out: list[int] = []
    for i in range(P.shape[1]):
        j = int(np.argmax(P[:, i]))
        if j not in out:
            out.append(j)
    return out


def select_policies(solutions: Sequence[Solution], N: int, *, method: str = "crowd",
                    rng: np.random.Generator | None = None) -> list[Solution]:
    """Pick up to ``N`` front members to extend.

    ``method="crowd"`` takes the per-objective extremes first (objective order)
    and fills the rest by descending crowd distance, ties by insertion order.
    ``method="random"`` draws uniformly from the front without replacement and
    exists for the selection ablation.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    front = nondominated_filter(solutions)
    if not front:
        return []
    if method == "random":
        if rng is None:
            raise ValueError("random selection needs an rng")
        k = min(N, len(front))
        picks = rng.choice(len(front), size=k, replace=False)
        return [front[int(j)] for j in sorted(picks)]
    if method != "crowd":
        raise ValueError(f"unknown selection method {method!r}")
    chosen = extreme_indices(front)[:N]
    cd = crowd_distance(front)
    # descending distance, stable in insertion order
    order = sorted(range(len(front)), key=lambda j: (-cd[j], j))
    for j in order:
        if len(chosen) >= N:
            break
        if j not in chosen:
            chosen.append(j)
    return [front[j] for j in chosen]


# --------------------------------------------------------------------------
# hypervolume


def _hv2d(P: np.ndarray) -> float:
    # P relative to the origin, all coordinates >= 0
    order = np.lexsort((-P[:, 1], -P[:, 0]))
    vol = 0.0
    best_y = 0.0
    for j in order:
        x, y = P[j]
        if y > best_y:
            vol += x * (y - best_y)
            best_y = y
    return vol


def _filter_nd(P: np.ndarray) -> np.ndarray:
    if len(P) <= 1:
        return P
    return P[nondominated_indices(P)]


def _hso(P: np.ndarray) -> float:
    """Slice along the last objective, recurse on the projected prefix fronts."""
    m, d = P.shape
    if m == 0:
        return 0.0
    if d == 1:
        return float(P[:, 0].max())
    if d == 2:
        return _hv2d(P)
    order = np.argsort(-P[:, -1], kind="stable")
    P = P[order]
    vol = 0.0
    for k in range(m):
        depth = P[k, -1] - (P[k + 1, -1] if k + 1 < m else 0.0)
        if depth <= 0.0:
            continue
        vol += depth * _hso(_filter_nd(P[: k + 1, :-1]))
    return vol


def _wfg(P: np.ndarray) -> float:
    """Sum of exclusive contributions; each one is a box minus the limited rest."""
    m, d = P.shape
    if m == 0:
        return 0.0
    if d == 2:
        return _hv2d(P)
    if m == 1:
        return float(np.prod(P[0]))
    P = P[np.argsort(-P[:, -1], kind="stable")]
    vol = 0.0
    for k in range(m):
        box = float(np.prod(P[k]))
        if k + 1 < m:
            box -= _wfg(_filter_nd(np.minimum(P[k + 1:], P[k])))
        vol += box
    return vol


def hypervolume(front, reference, method: str = "wfg") -> float:
    """Exact Lebesgue measure of the region dominated by ``front`` above ``reference``.

    Two objectives use a sweep. For more, ``method`` picks exclusive-contribution
    recursion (``"wfg"``, default) or dimension slicing (``"hso"``).
    """
    P = _as_points(front)
    ref = np.asarray(reference, dtype=np.float64)
    if P.size == 0:
        return 0.0
    if P.shape[1] != ref.shape[0]:
        raise ValueError("reference point length differs from objective count")
    if np.any(P < ref):
        raise ReferencePointError(f"reference point {ref.tolist()} is not dominated by every front member")
    if P.shape[1] > 9:
        raise ValueError("exact hypervolume is supported for at most 9 objectives")
    Q = _filter_nd(P - ref)
    if method == "hso":
        return float(_hso(Q))
    if method != "wfg":
        raise ValueError(f"unknown hypervolume method {method!r}")
    return float(_wfg(Q))


def sparsity(front) -> float:
    """Mean squared gap between consecutive sorted values, summed over objectives."""
    P = _as_points(front)
    if len(P) < 2:
        return 0.0
    S = np.sort(P, axis=0)
    return float(np.sum(np.diff(S, axis=0) ** 2) / (len(P) - 1))


def expected_utility(front, preferences) -> float:
    """Mean over preferences of the best scalarized return in ``front``."""
    P = _as_points(front)
    W = np.atleast_2d(np.asarray(preferences, dtype=np.float64))
    if len(W) == 0:
        raise ValueError("preference set is empty")
    return float(np.mean(np.max(W @ P.T, axis=1)))


def smp_assign(front: Sequence[Solution], omega) -> Solution:
    """Set-max policy: the member maximizing ``omega @ G``; first wins ties."""
    if len(front) == 0:
        raise ValueError("front is empty")
    u = _as_points(front) @ np.asarray(omega, dtype=np.float64)
    return front[int(np.argmax(u))]


def preference_grid(n: int, delta: float) -> list[np.ndarray]:
    """Simplex lattice with step ``delta`` (all weight vectors in multiples of delta)."""
    if n < 1:
        raise ValueError("n must be positive")
    m = round(1.0 / delta)
    if m < 1 or abs(m * delta - 1.0) > 1e-9:
        raise ValueError(f"delta={delta} does not divide 1")
    out = []
    # stars and bars: bar positions among m + n - 1 slots
    for bars in itertools.combinations(range(m + n - 1), n - 1):
        parts, prev = [], -1
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(m + n - 1 - prev - 1)
        out.append(np.array(parts, dtype=np.float64) / m)
    return out


def proposition1_thresholds(front: Sequence[Solution], initial: Solution, l: int,
                            floor) -> np.ndarray:
    """Thresholds under which a constrained optimum from ``initial`` stays non-dominated.

    For each objective ``i != l`` the threshold is the largest front value strictly
    below the initial solution's (its sorted predecessor); ``floor[i]`` is used
    when the initial solution is the minimum. Entry ``l`` is NaN.
    """
    if not any(s is initial or (s.policy_id == initial.policy_id
                                and np.array_equal(s.returns, initial.returns)) for s in front):
        raise ValueError("initial solution is not a member of the front")
    P = _as_points(front)
    g = initial.returns
    floor = np.asarray(floor, dtype=np.float64)
    d = np.full(P.shape[1], np.nan)
    for i in range(P.shape[1]):
        if i == l:
            continue
        below = P[P[:, i] < g[i], i]
        d[i] = below.max() if below.size else floor[i]
    return d


def reference_point(points, margin: float = 0.05) -> np.ndarray:
    """Component-wise minimum pushed down by ``margin`` of the per-objective range."""
    P = _as_points(points)
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = hi - lo
    span = np.where(span > 0, span, 1.0)
    return lo - margin * span
