import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cmorl.oracle import mc_hypervolume
from reference import brute_crowd, inclusion_exclusion
from cmorl.pareto import (Archive, ReferencePointError, Solution, crowd_distance, dominates,
                          expected_utility, extreme_indices, hypervolume, nondominated_filter,
                          nondominated_indices, preference_grid, proposition1_thresholds,
                          reference_point, select_policies, smp_assign, sparsity)


def sols(points, prefix="s"):
    return [Solution(f"{prefix}{k}", np.array(p, dtype=float)) for k, p in enumerate(points)]


def fronts(max_n=4, max_size=30):
    return st.integers(2, max_n).flatmap(lambda n: arrays(
        np.float64, st.tuples(st.integers(1, max_size), st.just(n)),
        elements=st.floats(0, 10, allow_nan=False, width=32)))


# -- dominance -------------------------------------------------------------


def test_dominates_examples():
    assert dominates((2, 2), (1, 1))
    assert not dominates((2, 1), (1, 2)) and not dominates((1, 2), (2, 1))
    assert not dominates((1, 1), (1, 1))


def test_dominates_length_mismatch():
    with pytest.raises(ValueError):
        dominates((1, 2), (1, 2, 3))


def test_filter_examples():
    front = nondominated_filter(sols([(1, 3), (3, 1), (2, 2), (1, 1)]))
    assert [tuple(s.returns) for s in front] == [(1, 3), (3, 1), (2, 2)]
    assert len(nondominated_filter(sols([(5, 5)]))) == 1
    same = nondominated_filter(sols([(1, 2)] * 4))
    assert [s.policy_id for s in same] == ["s0"]


def brute_nondominated(P):
    keep = []
    for j, p in enumerate(P):
        if any(dominates(q, p) for q in P):
            continue
        if any(np.array_equal(P[k], p) for k in range(j)):
            continue
        keep.append(j)
    return keep


@given(fronts())
@settings(max_examples=60, deadline=None)
def test_filter_matches_bruteforce_and_is_idempotent(P):
    idx = nondominated_indices(P)
    assert idx == brute_nondominated(P)
    assert nondominated_indices(P[idx]) == list(range(len(idx)))


@given(fronts(), st.randoms(use_true_random=False))
@settings(max_examples=40, deadline=None)
def test_filter_order_insensitive(P, rnd):
    perm = list(range(len(P)))
    rnd.shuffle(perm)
    a = {tuple(r) for r in P[nondominated_indices(P)]}
    b = {tuple(r) for r in P[perm][nondominated_indices(P[perm])]}
    assert a == b


@given(fronts())
@settings(max_examples=40, deadline=None)
def test_archive_cache_tracks_filter(P):
    archive = Archive()
    for k, p in enumerate(P):
        archive.add(Solution(f"p{k}", p))
        assert archive.front_indices == nondominated_indices(P[: k + 1])
    assert len(archive) == len(P)


def test_solution_is_immutable_and_finite():
    s = Solution("a", [1.0, 2.0])
    with pytest.raises(ValueError):
        s.returns[0] = 3.0
    with pytest.raises(ValueError):
        Solution("b", [1.0, math.nan])


# -- crowd distance --------------------------------------------------------


def test_crowd_distance_worked_example():
    cd = crowd_distance([(0, 4), (1, 3), (3, 1), (4, 0)])
    assert cd[1] == 1.5 and cd[2] == 1.5
    assert math.isinf(cd[0]) and math.isinf(cd[3])


def test_crowd_distance_small_and_degenerate():
    assert np.all(np.isinf(crowd_distance([(0, 1), (1, 0)])))
    # objective 2 is constant and contributes nothing
    cd = crowd_distance([(0, 5), (1, 5), (3, 5)])
    assert math.isinf(cd[0]) and math.isinf(cd[2]) and cd[1] == 1.0




@given(fronts(max_size=40))
@settings(max_examples=60, deadline=None)
def test_crowd_distance_matches_bruteforce(P):
    assert np.array_equal(crowd_distance(P), brute_crowd(P))


# -- selection -------------------------------------------------------------


def test_select_policies_extremes_then_crowding():
    pts = [(0, 10), (1, 9), (2, 8.5), (5, 5), (9, 1), (10, 0)]
    cd = crowd_distance(pts)
    chosen = select_policies(sols(pts), 4)
    interior = sorted(range(1, 5), key=lambda j: (-cd[j], j))[:2]
    ids = [s.policy_id for s in chosen]
    assert ids[:2] == ["s5", "s0"]  # argmax of objective 0, then objective 1
    assert ids[2:] == [f"s{j}" for j in interior]


def test_select_policies_exhaustion_and_small_n():
    s = sols([(0, 2), (1, 1), (2, 0), (0.5, 0.5)])
    assert len(select_policies(s, 10)) == 3
    one = select_policies(s, 1)
    assert [x.policy_id for x in one] == [s[extreme_indices([(0, 2), (1, 1), (2, 0)])[0]].policy_id]


def test_select_policies_random_mode_needs_rng():
    s = sols([(0, 2), (1, 1), (2, 0)])
    with pytest.raises(ValueError):
        select_policies(s, 2, method="random")
    picked = select_policies(s, 2, method="random", rng=np.random.default_rng(0))
    assert len(picked) == 2


# -- hypervolume -----------------------------------------------------------


def test_hypervolume_examples():
    assert hypervolume([(3, 2)], (0, 0)) == 6
    assert hypervolume([(1, 3), (3, 1)], (0, 0)) == 5
    assert hypervolume([(2, 2), (1, 1)], (0, 0)) == 4


def test_hypervolume_reference_error():
    with pytest.raises(ReferencePointError):
        hypervolume([(1, 1)], (2, 0))




@given(st.integers(2, 5).flatmap(lambda n: arrays(
    np.float64, st.tuples(st.integers(1, 7), st.just(n)),
    elements=st.floats(0, 4, allow_nan=False, width=16))))
@settings(max_examples=80, deadline=None)
def test_hypervolume_matches_inclusion_exclusion(P):
    ref = np.zeros(P.shape[1])
    expected = inclusion_exclusion(P, ref)
    assert hypervolume(P, ref) == pytest.approx(expected, rel=1e-9, abs=1e-9)
    assert hypervolume(P, ref, method="hso") == pytest.approx(expected, rel=1e-9, abs=1e-9)


@given(fronts(max_n=4, max_size=20), arrays(np.float64, 4, elements=st.floats(0, 10, width=32)))
@settings(max_examples=60, deadline=None)
def test_hypervolume_monotone(P, q):
    q = q[: P.shape[1]]
    ref = np.zeros(P.shape[1])
    base = hypervolume(P, ref)
    grown = hypervolume(np.vstack([P, q]), ref)
    if any(dominates(p, q) or np.array_equal(p, q) for p in P):
        assert grown == pytest.approx(base, rel=1e-12, abs=1e-12)
    else:
        assert grown >= base - 1e-12


def test_hypervolume_against_monte_carlo():
    rng = np.random.default_rng(5)
    P = rng.random((12, 3))
    exact = hypervolume(P, np.zeros(3))
    est, se = mc_hypervolume(P, np.zeros(3), 200_000, seed=1)
    assert abs(est - exact) <= 4 * se


# -- sparsity, utility, assignment ----------------------------------------


def test_sparsity_examples():
    assert sparsity([(0, 4), (4, 0)]) == 32
    assert sparsity([(0, 4), (2, 2), (4, 0)]) == 8
    assert sparsity([(1, 1)]) == 0


def test_expected_utility_examples():
    grid = [(1, 0), (0.5, 0.5), (0, 1)]
    assert expected_utility([(1, 0), (0, 1)], grid) == pytest.approx(5 / 6)
    assert expected_utility([(2, 4)], grid) == pytest.approx(np.mean([2, 3, 4]))


@given(fronts(max_n=3), arrays(np.float64, 3, elements=st.floats(0, 10, width=32)))
@settings(max_examples=40, deadline=None)
def test_expected_utility_monotone_and_ignores_dominated(P, q):
    q = q[: P.shape[1]]
    grid = preference_grid(P.shape[1], 0.25)
    eu = expected_utility(P, grid)
    assert expected_utility(np.vstack([P, q]), grid) >= eu - 1e-12
    worse = P[0] - 1.0
    assert expected_utility(np.vstack([P, worse]), grid) == eu


def test_smp_assign_examples():
    s = sols([(1, 3), (3, 1), (2, 2)])
    assert smp_assign(s, (1, 0)).policy_id == "s1"
    assert smp_assign(s, (0.5, 0.5)).policy_id == "s0"


@given(fronts(max_n=3), st.floats(0.01, 100))
@settings(max_examples=40, deadline=None)
def test_smp_scale_invariant(P, c):
    s = sols(P)
    w = np.ones(P.shape[1]) / P.shape[1]
    assert smp_assign(s, w).policy_id == smp_assign(s, c * w).policy_id


# -- preference grid -------------------------------------------------------


def test_preference_grid_examples():
    g = preference_grid(2, 0.5)
    assert sorted(tuple(v) for v in g) == [(0, 1), (0.5, 0.5), (1, 0)]
    assert len(preference_grid(2, 0.01)) == 101
    assert len(preference_grid(3, 0.5)) == 6


@pytest.mark.parametrize("n,d", [(2, 0.1), (3, 0.1), (4, 0.25), (6, 0.5)])
def test_preference_grid_valid(n, d):
    g = np.array(preference_grid(n, d))
    assert np.allclose(g.sum(axis=1), 1, atol=1e-9)
    assert len({tuple(v) for v in g}) == len(g)
    assert len(g) == math.comb(round(1 / d) + n - 1, n - 1)


def test_preference_grid_rejects_bad_delta():
    with pytest.raises(ValueError):
        preference_grid(2, 0.3)


# -- threshold criterion -------------------------------------------------


def test_proposition1_example():
    front = sols([(1, 3), (2, 2), (3, 1)])
    d = proposition1_thresholds(front, front[1], 0, floor=(0, 0))
    assert d[1] == 2 - 1 + 0 and math.isnan(d[0])
    d = proposition1_thresholds(front, front[2], 0, floor=(-5, -7))
    assert d[1] == -7


def test_proposition1_requires_member():
    front = sols([(1, 3), (2, 2)])
    with pytest.raises(ValueError):
        proposition1_thresholds(front, Solution("x", [0, 0]), 0, (0, 0))


@given(st.integers(2, 4).flatmap(lambda n: arrays(
    np.float64, st.tuples(st.integers(2, 12), st.just(n)),
    elements=st.integers(0, 6).map(float))), st.data())
@settings(max_examples=80, deadline=None)
def test_proposition1_constrained_optimum_is_nondominated(P, data):
    """Brute force: among candidate points, the best in objective l subject to
    G_i >= d_i (i != l) is never dominated by the current front."""
    front = nondominated_filter(sols(P))
    n = P.shape[1]
    init = front[data.draw(st.integers(0, len(front) - 1))]
    l = data.draw(st.integers(0, n - 1))
    floor = P.min(axis=0) - 1
    d = proposition1_thresholds(front, init, l, floor)
    cands = np.array(list(itertools.product(range(8), repeat=n)), dtype=float)
    others = [i for i in range(n) if i != l]
    feas = cands[np.all(cands[:, others] >= d[others], axis=1)]
    best_l = feas[:, l].max()
    for g in feas[feas[:, l] == best_l]:
        if g[l] < init.returns[l] or np.any(g[others] == d[others]):
            continue
        assert not any(dominates(s.returns, g) for s in front)


def test_reference_point_rule():
    ref = reference_point([(0, 10), (10, 0)])
    assert np.allclose(ref, (-0.5, -0.5))
    assert np.allclose(reference_point([(1, 1)]), (0.95, 0.95))
