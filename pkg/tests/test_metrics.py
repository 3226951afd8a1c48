import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from lensrobust.core import AttributionMap, PixelSet
from lensrobust.errors import DomainError, UndefinedCorrelationError
from lensrobust.metrics import (
    MetricRecord,
    WeightSchedule,
    _distance_terms,
    combined_distance,
    kendall_tau,
    lens_distance,
    lens_kendall,
    lens_prec_at_k,
    lens_recall_at_k,
    lens_spearman,
    neighborhood_union,
    read_records,
    smooth_map,
    spearman_rho,
    symmetric_difference_ratio,
    top_k_set,
    topk_intersection,
    upper_bound_u,
    write_records,
)

M = AttributionMap


def grid(rows):
    return M(np.array(rows, dtype=float))


def maps_pair(max_side=6):
    side = st.integers(1, max_side)
    return st.tuples(side, side).flatmap(
        lambda hw: st.tuples(
            arrays(np.float64, hw, elements=st.integers(-4, 4).map(float)),
            arrays(np.float64, hw, elements=st.integers(-4, 4).map(float)),
        )
    )


# --- top-k sets and neighborhoods ---------------------------------------------


def test_top_k_set_full_sort():
    s = top_k_set(grid([[0.1, 0.9], [0.5, 0.3]]), 2)
    assert s.coords == ((0, 1), (1, 0))


def test_top_k_set_ties_row_major():
    assert top_k_set(M(np.ones((3, 3))), 3).coords == ((0, 0), (0, 1), (0, 2))


def test_top_k_set_everything():
    m = M(np.random.default_rng(0).normal(size=(3, 4)))
    assert top_k_set(m, 12).as_set() == {(r, c) for r in range(3) for c in range(4)}


@pytest.mark.parametrize("k", [0, 5])
def test_top_k_set_range(k):
    with pytest.raises(DomainError):
        top_k_set(M(np.ones((2, 2))), k)


def test_neighborhood_corner():
    s = PixelSet(((0, 0),), (3, 3))
    assert neighborhood_union(s, 1, (3, 3)).as_set() == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_neighborhood_center_covers_grid():
    s = PixelSet(((1, 1),), (3, 3))
    assert len(neighborhood_union(s, 1, (3, 3))) == 9


def test_neighborhood_w0_identity():
    s = PixelSet(((2, 1), (0, 3)), (3, 4))
    assert neighborhood_union(s, 0, (3, 4)) == s


@settings(max_examples=50, deadline=None)
@given(maps_pair(), st.integers(0, 3))
def test_neighborhood_matches_oracle(pair, w):
    a, _ = pair
    k = max(1, a.size // 3)
    s = top_k_set(M(a), k)
    assert neighborhood_union(s, w).as_set() == oracles.neighborhood(s.coords, w, a.shape)


# --- top-k intersection and LENS prec/recall ----------------------------------


def test_topk_identity_and_disjoint():
    a = grid([[4, 3], [1, 2]])
    assert topk_intersection(a, a, 2) == 1.0
    b = grid([[1, 2], [4, 3]])
    assert topk_intersection(a, b, 2) == 0.0


def test_topk_hand_placed_overlap():
    a = grid([[9, 8, 7], [6, 0, 0], [0, 0, 0]])
    b = grid([[9, 8, 0], [0, 0, 0], [0, 7, 6]])
    assert set(oracles.top_k_coords(a.values, 4)) & set(oracles.top_k_coords(b.values, 4)) == {(0, 0), (0, 1)}
    assert topk_intersection(a, b, 4) == 0.5


def test_shape_mismatch():
    with pytest.raises(DomainError):
        topk_intersection(M(np.ones((2, 2))), M(np.ones((2, 3))), 1)


SHIFT_A = grid([[5, 0, 0], [4, 0, 0], [0, 0, 0]])
SHIFT_B = grid([[0, 5, 0], [0, 4, 0], [0, 0, 0]])


def test_shifted_column_is_local():
    assert topk_intersection(SHIFT_A, SHIFT_B, 2) == 0.0
    assert lens_prec_at_k(SHIFT_A, SHIFT_B, 2, 1) == 1.0
    assert lens_recall_at_k(SHIFT_A, SHIFT_B, 2, 1) == 1.0
    assert oracles.lens_prec(SHIFT_A.values, SHIFT_B.values, 2, 1) == 1.0


def test_lens_identity_any_w():
    a = M(np.random.default_rng(1).normal(size=(5, 5)))
    for w in range(4):
        assert lens_prec_at_k(a, a, 7, w) == 1.0
        assert lens_recall_at_k(a, a, 7, w) == 1.0


@settings(max_examples=150, deadline=None)
@given(maps_pair(), st.integers(0, 3), st.data())
def test_lens_matches_oracle_and_invariants(pair, w, data):
    a, b = M(pair[0]), M(pair[1])
    k = data.draw(st.integers(1, a.size))
    prec = lens_prec_at_k(a, b, k, w)
    rec = lens_recall_at_k(a, b, k, w)
    top = topk_intersection(a, b, k)
    assert prec == oracles.lens_prec(a.values, b.values, k, w)
    assert rec == oracles.lens_recall(a.values, b.values, k, w)
    assert rec == lens_prec_at_k(b, a, k, w)
    assert prec >= top and rec >= top
    assert lens_prec_at_k(a, b, k, 0) == lens_recall_at_k(a, b, k, 0) == top


# --- distances ----------------------------------------------------------------


def test_lens_distance_identity_and_disjoint():
    a = grid([[4, 3], [1, 2]])
    b = grid([[1, 2], [4, 3]])
    assert lens_distance(a, a, 2, 3) == 0.0
    assert lens_distance(a, b, 2, 0) == 2.0


@settings(max_examples=150, deadline=None)
@given(maps_pair(), st.data())
def test_distance_monotone_in_w(pair, data):
    a, b = M(pair[0]), M(pair[1])
    k = data.draw(st.integers(1, a.size))
    sd = symmetric_difference_ratio(a, b, k)
    values = [lens_distance(a, b, k, w) for w in range(4)]
    assert values[0] <= sd
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))


def test_profile_route_matches_direct_route():
    rng = np.random.default_rng(5)
    for _ in range(20):
        h, wd = rng.integers(1, 7, size=2)
        a = M(rng.integers(-3, 4, size=(h, wd)).astype(float))
        b = M(rng.integers(-3, 4, size=(h, wd)).astype(float))
        sched = WeightSchedule.default(k_max=40, w_max=4)
        ks, missed, sym = _distance_terms(a, b, sched)
        for i, k in enumerate(ks):
            assert sym[i] / k == symmetric_difference_ratio(a, b, int(k))
            for w in range(5):
                assert missed[w, i] / k == lens_distance(a, b, int(k), w)


def test_combined_identity():
    a = M(np.random.default_rng(2).normal(size=(8, 8)))
    assert combined_distance(a, a) == 0.0
    assert upper_bound_u(a, a) == 0.0


def test_single_term_schedule():
    rng = np.random.default_rng(3)
    a, b = M(rng.normal(size=(6, 6))), M(rng.normal(size=(6, 6)))
    for k, w in [(1, 0), (5, 1), (12, 3)]:
        sched = WeightSchedule.single(k, w)
        assert combined_distance(a, b, sched) == lens_distance(a, b, k, w)
        assert upper_bound_u(a, b, sched) == symmetric_difference_ratio(a, b, k)


def test_d_below_u_and_u_metric():
    rng = np.random.default_rng(4)
    for _ in range(30):
        a, b, c = (M(rng.normal(size=(6, 6))) for _ in range(3))
        assert combined_distance(a, b) <= upper_bound_u(a, b)
        assert upper_bound_u(a, b) == upper_bound_u(b, a)
        assert upper_bound_u(a, c) <= upper_bound_u(a, b) + upper_bound_u(b, c) + 1e-9


def test_truncation_remainder_bound():
    rng = np.random.default_rng(6)
    a, b = M(rng.normal(size=(4, 4))), M(rng.normal(size=(4, 4)))
    short = WeightSchedule.default(k_max=5, w_max=1)
    # a 4x4 grid is fully covered by any window with w >= 3, so w beyond 40 adds nothing
    long = WeightSchedule.default(k_max=16, w_max=40)
    gap = combined_distance(a, b, long) - combined_distance(a, b, short)
    assert 0.0 <= gap <= short.remainder_bound(n_pixels=16)


@pytest.mark.parametrize(
    "alpha, beta",
    [((0.5, 0.6), (1.0,)), ((-1.0,), (1.0,)), ((0.0, 0.0), (1.0,)), ((1.0,), (math.inf,)), ((), (1.0,))],
)
def test_schedule_validation(alpha, beta):
    with pytest.raises(DomainError):
        WeightSchedule(alpha, beta)


def test_default_schedule_shape():
    s = WeightSchedule.default()
    assert s.k_max == 64 and s.w_max == 8
    assert s.alpha[0] == 0.5 and s.beta[0] == 0.5
    assert s.remainder_bound() == pytest.approx(2 * 2.0**-64 * 1.0 + 2 * (1 - 2.0**-64) * 2.0**-9)


# --- smoothing ------------------------------------------------------------------


def test_smooth_w0_identity():
    a = M(np.random.default_rng(0).normal(size=(4, 5)))
    assert smooth_map(a, 0) == a


def test_smooth_all_ones_keeps_full_denominator():
    got = smooth_map(M(np.ones((3, 3))), 1).values
    want = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]]) / 9.0
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(maps_pair(), st.integers(0, 3))
def test_smooth_matches_oracle_and_contracts(pair, w):
    a, b = pair
    sa, sb = smooth_map(M(a), w).values, smooth_map(M(b), w).values
    np.testing.assert_allclose(sa, oracles.smooth(a, w), rtol=0, atol=1e-12)
    assert np.linalg.norm(sa - sb) <= np.linalg.norm(a - b) + 1e-12


# --- rank correlations ------------------------------------------------------------


def test_correlation_identity_and_reversal():
    a = M(np.random.default_rng(1).permutation(16).reshape(4, 4).astype(float))
    neg = M(-a.values)
    assert spearman_rho(a, a) == 1.0
    assert kendall_tau(a, a) == 1.0
    assert spearman_rho(a, neg) == -1.0
    assert kendall_tau(a, neg) == -1.0


def test_correlations_match_oracles():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    assert abs(spearman_rho(M(a), M(b)) - oracles.spearman(a, b)) <= 1e-12
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    assert abs(kendall_tau(M(a), M(b)) - oracles.kendall_b(a, b)) <= 1e-12


def test_correlations_with_ties_match_oracles():
    rng = np.random.default_rng(8)
    for _ in range(50):
        a = rng.integers(0, 3, size=(4, 4)).astype(float)
        b = rng.integers(0, 3, size=(4, 4)).astype(float)
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        assert abs(spearman_rho(M(a), M(b)) - oracles.spearman(a, b)) <= 1e-12
        assert abs(kendall_tau(M(a), M(b)) - oracles.kendall_b(a, b)) <= 1e-12


def test_kendall_blocking_is_transparent():
    rng = np.random.default_rng(9)
    a, b = M(rng.integers(0, 5, size=(9, 9)).astype(float)), M(rng.normal(size=(9, 9)))
    assert kendall_tau(a, b, block=7) == kendall_tau(a, b, block=1000)


def test_constant_map_is_an_error():
    const = M(np.ones((3, 3)))
    other = M(np.arange(9.0).reshape(3, 3))
    with pytest.raises(UndefinedCorrelationError):
        spearman_rho(const, other)
    with pytest.raises(UndefinedCorrelationError):
        kendall_tau(other, const)


def test_single_entry_is_domain_error():
    with pytest.raises(DomainError):
        spearman_rho(M(np.ones((1, 1))), M(np.ones((1, 1))))


def test_lens_correlations():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    assert lens_spearman(M(a), M(b), 0) == spearman_rho(M(a), M(b))
    assert lens_kendall(M(a), M(b), 0) == kendall_tau(M(a), M(b))
    assert lens_spearman(M(a), M(a), 2) == 1.0
    assert lens_kendall(M(a), M(a), 2) == 1.0
    sa, sb = oracles.smooth(a, 1), oracles.smooth(b, 1)
    assert abs(lens_spearman(M(a), M(b), 1) - oracles.spearman(sa, sb)) <= 1e-12
    assert abs(lens_kendall(M(a), M(b), 1) - oracles.kendall_b(sa, sb)) <= 1e-12


# --- records --------------------------------------------------------------------


def test_metric_record_ranges():
    MetricRecord("i", "a", "topk", 1, 0, 0.1, 1.0)
    MetricRecord("i", "a", "kendall", 1, 0, 0.1, -1.0)
    MetricRecord("i", "a", "topk", 1, 0, 0.1, None)
    with pytest.raises(DomainError):
        MetricRecord("i", "a", "topk", 1, 0, 0.1, 1.5)
    with pytest.raises(DomainError):
        MetricRecord("i", "a", "lens_distance", 1, 0, 0.1, 2.5)
    with pytest.raises(DomainError):
        MetricRecord("i", "a", "nope", 1, 0, 0.1, 0.0)


def test_record_csv_round_trip(tmp_path):
    recs = [
        MetricRecord("img_001", "top_k", "lens_prec", 10, 1, 0.3, 1 / 3),
        MetricRecord("img_002", "random_sign", "topk_div", 10, 0, 0.3, None),
    ]
    path = tmp_path / "r.csv"
    write_records(path, recs)
    text = path.read_text()
    assert text.splitlines()[0] == "image_id,attack_id,metric,k,w,epsilon,value"
    assert "0.33333333333333331" in text
    assert read_records(path) == recs
