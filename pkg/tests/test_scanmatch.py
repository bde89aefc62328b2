import numpy as np
import pytest

from wheelcal.errors import MatchFailure, NumericalFailure
from wheelcal.geometry import ominus, oplus, transform_points
from wheelcal.scanmatch import (
    DisplacementObs,
    MatchConfig,
    Scan,
    closest_distances,
    estimate_displacement,
    estimate_normals,
    match_pairs,
    nearest_neighbors,
    rigid_align,
    trim_overlap,
)


def test_scan_validation():
    with pytest.raises(ValueError):
        Scan(0.0, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        Scan(0.0, [[0.0, np.nan]])
    with pytest.raises(ValueError):
        DisplacementObs(1.0, 1.0, [0, 0, 0], [1, 1, 1])
    with pytest.raises(ValueError):
        DisplacementObs(0.0, 1.0, [0, 0, 0], [1, 0, 1])


def test_identical_scans_zero_distance(rng):
    pts = rng.uniform(-2, 2, (30, 2))
    c = closest_distances(Scan(0, pts), Scan(1, pts), (0, 0, 0), (0.3, -0.2, 1.1))
    assert np.all(c.d2 < 1e-28)
    assert c.zeta == 1.0 and c.n_kept == 30


def test_shifted_scan_matches_exactly(rng):
    pts = rng.uniform(-2, 2, (30, 2))
    d = 0.37
    c = closest_distances(Scan(0, pts), Scan(1, pts - [d, 0.0]), (d, 0, 0), (0, 0, 0))
    assert np.all(c.d2 < 1e-28)


def test_nearest_neighbours_match_double_loop(rng):
    for _ in range(200):
        q = rng.uniform(-1, 1, (5, 2))
        r = rng.uniform(-1, 1, (5, 2))
        idx, d2 = nearest_neighbors(q, r)
        for i in range(5):
            dists = [np.sum((q[i] - r[j]) ** 2) for j in range(5)]
            assert idx[i] == int(np.argmin(dists))
            assert d2[i] == pytest.approx(min(dists), abs=1e-15)
        bi, bd = nearest_neighbors(q, r, brute=True)
        np.testing.assert_array_equal(bi, idx)


def test_closest_distances_sorted_and_consistent(rng):
    a = rng.uniform(-3, 3, (50, 2))
    b = rng.uniform(-3, 3, (60, 2))
    c = closest_distances(a, b, (0.1, 0.0, 0.2), (0.02, 0.04, 3.1))
    assert np.all(np.diff(c.d2) >= 0)
    assert 1 <= c.n_kept <= 50
    assert c.trimmed_error() == pytest.approx(np.sum(c.d2[: c.n_kept]))
    cb = closest_distances(a, b, (0.1, 0.0, 0.2), (0.02, 0.04, 3.1), brute=True)
    assert c.same_matches(cb)


def test_trim_equal_distances_keeps_all():
    assert trim_overlap(np.full(17, 0.3)) == (1.0, 17)


def test_trim_sixty_percent_zeros():
    d = np.r_[np.zeros(60), np.full(40, 1e6)]
    zeta, n = trim_overlap(d)
    assert zeta == pytest.approx(0.6)
    assert n == 60


def test_trim_single_element():
    assert trim_overlap([2.0]) == (1.0, 1)


def test_trim_scale_invariant(rng):
    for _ in range(50):
        d = np.sort(rng.exponential(size=rng.integers(1, 80)) ** 3)
        assert trim_overlap(d) == trim_overlap(d * 123.4)


def test_trim_rejects_empty():
    with pytest.raises(ValueError):
        trim_overlap([])


def test_rigid_align_cases(rng):
    src = rng.uniform(-1, 1, (10, 2))
    np.testing.assert_allclose(rigid_align(src, src), 0.0, atol=1e-15)
    rot = src @ np.array([[0.0, 1.0], [-1.0, 0.0]])  # rotate by +π/2
    np.testing.assert_allclose(rigid_align(src, rot), [0, 0, np.pi / 2], atol=1e-12)
    T = np.array([0.4, -1.2, 2.5])
    dst = transform_points(T, src)
    est = rigid_align(src, dst)
    np.testing.assert_allclose(est, T, atol=1e-10)
    np.testing.assert_allclose(transform_points(est, src), dst, atol=1e-10)


def test_rigid_align_weighted_ignores_zero_weight(rng):
    src = rng.uniform(-1, 1, (10, 2))
    T = np.array([0.1, 0.2, -0.3])
    dst = transform_points(T, src)
    dst[0] += 5.0
    w = np.ones(10)
    w[0] = 0.0
    np.testing.assert_allclose(rigid_align(src, dst, w), T, atol=1e-12)


def test_rigid_align_degenerate():
    with pytest.raises(NumericalFailure):
        rigid_align(np.ones((4, 2)), np.zeros((4, 2)))
    with pytest.raises(NumericalFailure):
        rigid_align([[0.0, 0.0]], [[1.0, 1.0]])


def test_normals_on_a_line():
    pts = np.column_stack([np.linspace(0, 1, 20), 0.5 * np.linspace(0, 1, 20)])
    n, ok = estimate_normals(pts)
    assert ok.all()
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)
    np.testing.assert_allclose(np.abs(n @ np.array([1.0, 0.5])), 0.0, atol=1e-12)


def scene(rng, n=200):
    return rng.uniform(-4, 4, (n, 2))


def test_estimate_displacement_noiseless(rng):
    zj = scene(rng)
    s = np.array([0.05, -0.03, 0.04])
    zk = transform_points(ominus(s), zj)
    obs = estimate_displacement(Scan(0, zj), Scan(1, zk))
    np.testing.assert_allclose(obs.s_hat, s, atol=1e-8)
    assert np.all(obs.sigma > 0)


def test_estimate_displacement_point_to_line(rng):
    t = np.linspace(0, 1, 200)
    zj = np.vstack([np.column_stack([-3 + 6 * t, np.full(200, -2.0)]),
                    np.column_stack([np.full(200, 2.5), -2 + 5 * t]),
                    np.column_stack([-3 + 5.5 * t, 3 - 0.5 * t])])
    s = np.array([0.03, 0.02, 0.03])
    zk = transform_points(ominus(s), zj)
    obs = estimate_displacement(Scan(0, zj), Scan(1, zk), cfg=MatchConfig(metric="line"))
    np.testing.assert_allclose(obs.s_hat, s, atol=1e-6)


def test_estimate_displacement_identical(rng):
    zj = scene(rng)
    obs = estimate_displacement(Scan(0, zj), Scan(1, zj))
    np.testing.assert_allclose(obs.s_hat, 0.0, atol=1e-15)
    np.testing.assert_allclose(obs.sigma, MatchConfig().sigma_floor)


def test_estimate_displacement_left_right_consistent(rng):
    zj = scene(rng)
    s = np.array([0.04, 0.02, -0.05])
    zk = transform_points(ominus(s), zj)
    fwd = estimate_displacement(Scan(0, zj), Scan(1, zk)).s_hat
    back = estimate_displacement(Scan(1, zk), Scan(2, zj)).s_hat
    np.testing.assert_allclose(oplus(fwd, back), 0.0, atol=1e-6)


def test_disjoint_clouds_fail(rng):
    a = rng.uniform(0, 1, (80, 2))
    b = rng.uniform(0, 1, (80, 2)) + [20.0, 0.0]
    with pytest.raises(MatchFailure):
        estimate_displacement(Scan(0, a), Scan(1, b))


def test_match_pairs_failures_and_order(rng):
    base = scene(rng)
    s = np.array([0.03, 0.0, 0.02])
    scans = [Scan(0, base), Scan(1, transform_points(ominus(s), base)), Scan(2, base + 50.0)]
    pairs = [(0, 1), (1, 2)]
    kept = match_pairs(scans, pairs, np.zeros((2, 3)))
    assert len(kept) == 1 and kept[0].t_k == 1
    flagged = match_pairs(scans, pairs, np.zeros((2, 3)), keep_failures=True, workers=2)
    assert [o.flagged for o in flagged] == [False, True]
    serial = match_pairs(scans, pairs, np.zeros((2, 3)), keep_failures=True, workers=1)
    np.testing.assert_array_equal(flagged[0].s_hat, serial[0].s_hat)
