import copy
import warnings

import numpy as np
import pytest

import wheelcal.cam as cam
from wheelcal.cam import (
    BoundaryWarning,
    CamConfig,
    FrozenCorrespondences,
    b_closed_form,
    cam_calibrate,
    extrinsic_closed_form,
    freeze_correspondences,
    frozen_objective,
    intrinsic_search,
    plicp_extrinsic_closed_form,
    plicp_intrinsic_search,
    select_scan_pairs,
    trimmed_objective,
)
from wheelcal.errors import ConditioningError, ConvergenceError, ObservabilityError
from wheelcal.kinematics import DiffDriveParams, Odometry, PairSegments, SensorModel, predict_robot_motion
from wheelcal.scanmatch import Scan
from wheelcal.simulate import SimConfig, World, WorldConfig, k1_model, synth_displacements, synth_scans

TRUTH = k1_model()
TV = TRUTH.vector()
NOISELESS_WORLD = WorldConfig(range_noise=0.0, dropout=0.0)


def perturbed(model=TRUTH, f=(1.03, 0.97, 1.04, 1.2, 0.85), dth=0.02):
    v = model.vector().copy()
    v[:5] *= np.asarray(f)
    v[5] += dth
    return model.with_vector(v)


def wall_points(segments, spacing=0.05):
    pts = []
    for a, b in segments:
        a, b = np.asarray(a, float), np.asarray(b, float)
        n = int(np.linalg.norm(b - a) / spacing)
        pts.append(a + np.linspace(0.0, 1.0, n, endpoint=False)[:, None] * (b - a))
    return np.vstack(pts)


ROOM = wall_points([((-6, -6), (6, -6)), ((6, -6), (6, 6)), ((6, 6), (-6, 6)), ((-6, 6), (-6, -6)),
                    ((-2, -3), (3, -1)), ((-4, 2), (1, 4))])


@pytest.fixture(scope="module")
def clean():
    sim = synth_displacements(SimConfig(seed=1, n_steps=120, world=NOISELESS_WORLD))
    scans = synth_scans(sim)
    pairs = select_scan_pairs(sim.odometry, TRUTH.drive)
    frozen = freeze_correspondences(scans, pairs, sim.odometry, TRUTH)
    return sim, scans, pairs, frozen


@pytest.fixture(scope="module")
def noisy():
    sim = synth_displacements(SimConfig(seed=4, n_steps=120))
    scans = synth_scans(sim)
    pairs = select_scan_pairs(sim.odometry, TRUTH.drive)
    return sim, scans, pairs


# --- pair selection and observability -------------------------------------------------


def test_selected_pairs_meet_thresholds(clean):
    sim, scans, pairs, _ = clean
    cfg = CamConfig()
    assert len(pairs) > 100
    assert np.all((pairs[:, 1] - pairs[:, 0] >= 1) & (pairs[:, 1] - pairs[:, 0] <= cfg.successors))
    q = predict_robot_motion(TRUTH.drive, sim.odometry.segments(pairs[:, 0], pairs[:, 1]))
    d = np.hypot(q[:, 0], q[:, 1])
    assert np.all((d >= cfg.t_min) & (d <= cfg.t_max))
    assert np.all(np.abs(q[:, 2]) >= cfg.theta_min)


def test_straight_log_has_no_pairs():
    sim = synth_displacements(SimConfig(seed=2, n_steps=40, profile="straight"))
    with pytest.raises(ObservabilityError, match="insufficient-excitation"):
        select_scan_pairs(sim.odometry, TRUTH.drive)


def test_zero_t_max_has_no_pairs(clean):
    sim = clean[0]
    with pytest.raises(ObservabilityError, match="insufficient-excitation"):
        select_scan_pairs(sim.odometry, TRUTH.drive, CamConfig(t_max=0.0))


def test_pure_rotation_log_is_translation_deficient():
    sim = synth_displacements(SimConfig(seed=2, n_steps=40, profile="rotation", world=NOISELESS_WORLD))
    with pytest.raises(ObservabilityError) as exc:
        cam_calibrate(synth_scans(sim), sim.odometry, TRUTH)
    assert exc.value.kind == "translation-deficient"
    assert exc.value.parameters == ("r_L", "r_R")


def test_pure_translation_log_is_rotation_deficient():
    sim = synth_displacements(SimConfig(seed=2, n_steps=40, profile="translation", world=NOISELESS_WORLD))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ObservabilityError) as exc:
            cam_calibrate(synth_scans(sim), sim.odometry, TRUTH)
    assert exc.value.kind == "rotation-deficient"
    assert {"l_x", "l_y"} <= set(exc.value.parameters)


def test_cam_rejects_mecanum(clean):
    from wheelcal.simulate import mecanum_model

    sim, scans, _, _ = clean
    with pytest.raises(TypeError):
        cam_calibrate(scans, sim.odometry, mecanum_model())


# --- trimmed objective -----------------------------------------------------------------


def test_trimmed_objective_vanishes_at_truth(clean):
    sim, scans, pairs, _ = clean
    value, sets = trimmed_objective(scans, pairs, sim.odometry, TRUTH)
    n = sum(len(scans[j].points) for j in pairs[:, 0])
    assert len(sets) == len(pairs)
    assert value < 1e-12 * n


def test_trimmed_objective_grows_with_wrong_axle(clean):
    sim, scans, pairs, _ = clean
    v0, _ = trimmed_objective(scans, pairs, sim.odometry, TRUTH)
    v = TV.copy()
    v[2] *= 1.1
    v1, _ = trimmed_objective(scans, pairs, sim.odometry, TRUTH.with_vector(v))
    assert v1 > v0 + 1e-6


def test_trimmed_objective_identical_scans_without_motion(rng):
    pts = rng.uniform(-3, 3, size=(40, 2))
    scans = [Scan(0.0, pts), Scan(0.7, pts.copy())]
    odo = Odometry([0.0, 0.7], [[0, 0], [0, 0]], 2578.33)
    value, sets = trimmed_objective(scans, [(0, 1)], odo, TRUTH)
    assert value == 0.0
    assert sets[0].n_kept == 40


def test_frozen_objective_matches_trimmed_objective(clean):
    sim, scans, pairs, _ = clean
    model = perturbed()
    value, _ = trimmed_objective(scans, pairs, sim.odometry, model)
    frozen = freeze_correspondences(scans, pairs, sim.odometry, model)
    assert frozen_objective(frozen, model) == pytest.approx(value, rel=1e-10)
    assert frozen.n_pairs == len(pairs) and frozen.eta.sum() == len(frozen.pid)


# --- extrinsic closed form -------------------------------------------------------------


def test_extrinsic_recovers_truth_noiseless(clean):
    l = extrinsic_closed_form(clean[3], TRUTH.drive)
    np.testing.assert_allclose(l, TRUTH.extrinsic, atol=1e-8)


def test_extrinsic_recovers_zero_pose():
    model = SensorModel(TRUTH.drive, (0.0, 0.0, 0.0))
    sim = synth_displacements(SimConfig(model=model, seed=3, n_steps=60, world=NOISELESS_WORLD))
    scans = synth_scans(sim)
    pairs = select_scan_pairs(sim.odometry, model.drive)
    frozen = freeze_correspondences(scans, pairs, sim.odometry, model)
    np.testing.assert_allclose(extrinsic_closed_form(frozen, model.drive), 0.0, atol=1e-9)


def sweep_oracle(frozen, drive, step=1e-5):
    """Exhaustive heading sweep with the best translation for each heading.

    Builds the quadratic from its own per-match residual algebra.
    """
    q = predict_robot_motion(drive, frozen.segs)[frozen.pid]
    c, s = np.cos(q[:, 2]), np.sin(q[:, 2])
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    zj, zk = frozen.zj, frozen.zk
    # residual = (I - R) t + (Zj - R Zk) u - t_q, u = (cos, sin)
    Zj = np.stack([np.stack([zj[:, 0], -zj[:, 1]], -1), np.stack([zj[:, 1], zj[:, 0]], -1)], -2)
    Zk = np.stack([np.stack([zk[:, 0], -zk[:, 1]], -1), np.stack([zk[:, 1], zk[:, 0]], -1)], -2)
    At = np.eye(2) - R
    Au = Zj - R @ Zk
    C = np.broadcast_to(np.eye(2), At.shape) if frozen.C is None else frozen.C
    Qtt = np.einsum("nki,nkl,nlj->ij", At, C, At)
    Qtu = np.einsum("nki,nkl,nlj->ij", At, C, Au)
    Quu = np.einsum("nki,nkl,nlj->ij", Au, C, Au)
    gt = -2 * np.einsum("nk,nkl,nli->i", q[:, :2], C, At)
    gu = -2 * np.einsum("nk,nkl,nli->i", q[:, :2], C, Au)
    th = np.arange(0.0, 2 * np.pi, step)
    U = np.stack([np.cos(th), np.sin(th)], -1)
    t = -0.5 * np.linalg.solve(Qtt, (2 * Qtu @ U.T) + gt[:, None]).T
    f = (np.einsum("ni,ij,nj->n", t, Qtt, t) + 2 * np.einsum("ni,ij,nj->n", t, Qtu, U)
         + np.einsum("ni,ij,nj->n", U, Quu, U) + t @ gt + U @ gu)
    i = int(np.argmin(f))
    return np.array([t[i, 0], t[i, 1], th[i]])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_extrinsic_matches_sweep_oracle(noisy, seed):
    sim, scans, pairs = noisy
    r = np.random.default_rng(seed)
    model = perturbed(f=1 + r.uniform(-0.05, 0.05, 5), dth=r.uniform(-0.05, 0.05))
    sub = pairs[r.choice(len(pairs), 40, replace=False)]
    frozen = freeze_correspondences(scans, sub, sim.odometry, model)
    l = extrinsic_closed_form(frozen, model.drive)
    oracle = sweep_oracle(frozen, model.drive)
    d = l - oracle
    d[2] = (d[2] + np.pi) % (2 * np.pi) - np.pi
    assert np.max(np.abs(d)) < 1e-4


def test_extrinsic_beats_dense_local_grid(noisy):
    sim, scans, pairs = noisy
    model = perturbed()
    frozen = freeze_correspondences(scans, pairs[:60], sim.odometry, model)
    l = extrinsic_closed_form(frozen, model.drive)
    best = frozen_objective(frozen, SensorModel(model.drive, tuple(l)))
    steps = np.arange(-3, 4) * 1e-3
    for dx in steps:
        for dy in steps:
            for dt in steps:
                cand = SensorModel(model.drive, (l[0] + dx, l[1] + dy, l[2] + dt))
                assert frozen_objective(frozen, cand) >= best * (1 - 1e-12)


def test_extrinsic_needs_rotation():
    sim = synth_displacements(SimConfig(seed=2, n_steps=40, profile="translation", world=NOISELESS_WORLD))
    scans = synth_scans(sim)
    pairs = np.array([(j, j + 1) for j in range(len(scans) - 1)])
    frozen = freeze_correspondences(scans, pairs, sim.odometry, TRUTH)
    with pytest.raises(ObservabilityError, match="rotation-deficient"):
        extrinsic_closed_form(frozen, TRUTH.drive)


# --- intrinsic sub-problem -------------------------------------------------------------


def test_b_closed_form_at_truth(clean):
    rt = (TRUTH.drive.r_L / TRUTH.drive.b, TRUTH.drive.r_R / TRUTH.drive.b)
    b = b_closed_form(clean[3], rt, TRUTH.extrinsic)
    assert b == pytest.approx(TRUTH.drive.b, rel=1e-9)


def test_b_closed_form_scales_with_geometry(noisy):
    sim, scans, pairs = noisy
    frozen = freeze_correspondences(scans, pairs, sim.odometry, TRUTH)
    rt = (0.15, 0.146)
    b1 = b_closed_form(frozen, rt, TRUTH.extrinsic)
    a = 1000.0
    scaled = copy.copy(frozen)
    scaled.zj, scaled.zk = frozen.zj * a, frozen.zk * a
    l = np.array(TRUTH.extrinsic) * [a, a, 1.0]
    assert b_closed_form(scaled, rt, l) == pytest.approx(a * b1, rel=1e-10)


def test_b_closed_form_needs_translation():
    sim = synth_displacements(SimConfig(seed=2, n_steps=30, profile="rotation", world=NOISELESS_WORLD))
    scans = synth_scans(sim)
    pairs = np.array([(j, j + 1) for j in range(len(scans) - 1)])
    frozen = freeze_correspondences(scans, pairs, sim.odometry, TRUTH)
    with pytest.raises(ObservabilityError, match="translation-deficient"):
        b_closed_form(frozen, (0.0, 0.0), TRUTH.extrinsic)


def test_intrinsic_search_recovers_truth(clean):
    start = DiffDriveParams(*(TV[:3] * [1.05, 0.95, 1.04]))
    drive, info = intrinsic_search(clean[3], TRUTH.extrinsic, start=start)
    np.testing.assert_allclose(drive.to_vector(), TV[:3], rtol=1e-5)
    assert not info["boundary"]


def test_intrinsic_search_is_argmin_over_first_grid(noisy):
    sim, scans, pairs = noisy
    model = perturbed()
    frozen = freeze_correspondences(scans, pairs, sim.odometry, model)
    cfg = CamConfig()
    drive, info = intrinsic_search(frozen, model.extrinsic, cfg, model.drive)
    c = cam._reduced(model.drive)
    ax = np.linspace(-1, 1, cfg.grid_points) * cfg.grid_halfwidth
    gl, gr = np.meshgrid(c[0] * (1 + ax), c[1] * (1 + ax), indexing="ij")
    stats = cam._pair_stats(frozen, np.asarray(model.extrinsic), cam._unit_motion(frozen.segs, c[:1], c[1:])[0][0])
    h, _ = cam._grid_eval(stats, frozen.segs, gl.ravel(), gr.ravel(), np.ones(frozen.n_pairs))
    assert info["objective"] <= h.min() * (1 + 1e-12)
    got = frozen_objective(frozen, SensorModel(drive, model.extrinsic))
    assert got == pytest.approx(info["objective"], rel=1e-8)


def test_intrinsic_search_never_worse_than_start(noisy):
    sim, scans, pairs = noisy
    frozen = freeze_correspondences(scans, pairs, sim.odometry, TRUTH)
    drive, _ = intrinsic_search(frozen, TRUTH.extrinsic, start=TRUTH.drive)
    assert frozen_objective(frozen, SensorModel(drive, TRUTH.extrinsic)) <= frozen_objective(frozen, TRUTH)


def test_intrinsic_search_warns_on_boundary(clean):
    start = DiffDriveParams(*(TV[:3] * [1.5, 1.5, 1.0]))
    with pytest.warns(BoundaryWarning):
        _, info = intrinsic_search(clean[3], TRUTH.extrinsic, CamConfig(grid_levels=1, grid_halfwidth=0.02), start)
    assert info["boundary"]


# --- full calibration ------------------------------------------------------------------


def test_cam_noiseless_recovery(clean):
    sim, scans, pairs, _ = clean
    res = cam_calibrate(scans, sim.odometry, perturbed())
    assert res.converged
    np.testing.assert_allclose(res.params, TV, rtol=1e-4)
    d = res.as_dict()
    assert d["method"] == "cam" and set(d["estimate"]) == set(TRUTH.names)


def test_cam_fixed_point_at_truth(clean):
    sim, scans, pairs, _ = clean
    res = cam_calibrate(scans, sim.odometry, TRUTH, pairs=pairs)
    assert len(res.iterations) == 1
    row = res.iterations[0]
    assert row["objective_intrinsic"] <= row["objective_before"] + 1e-20
    np.testing.assert_allclose(res.params, TV, rtol=1e-10, atol=1e-12)


def test_cam_inner_objective_monotone(noisy):
    sim, scans, pairs = noisy
    for huber in (False, True):
        res = cam_calibrate(scans, sim.odometry, perturbed(), CamConfig(huber=huber), pairs=pairs)
        for row in res.iterations:
            assert row["objective_extrinsic"] <= row["objective_before"] * (1 + 1e-9) + 1e-15
            assert row["objective_intrinsic"] <= row["objective_extrinsic"] * (1 + 1e-9) + 1e-15


def test_cam_aborts_on_objective_increase(clean, monkeypatch):
    sim, scans, pairs, _ = clean
    real = cam.extrinsic_closed_form

    def broken(frozen, drive, weights=None):
        return real(frozen, drive, weights) + np.array([0.01, 0.0, 0.0])

    monkeypatch.setattr(cam, "extrinsic_closed_form", broken)
    with pytest.raises(ConvergenceError, match="extrinsic step raised"):
        cam_calibrate(scans, sim.odometry, TRUTH, pairs=pairs)


def test_cam_outputs_canonical_signs(noisy):
    sim, scans, pairs = noisy
    res = cam_calibrate(scans, sim.odometry, perturbed(), pairs=pairs[:80])
    d = res.model.drive
    assert d.r_L > 0 and d.r_R > 0 and d.b > 0
    assert -np.pi < res.model.extrinsic[2] <= np.pi


def test_cam_independent_of_worker_count(noisy):
    sim, scans, pairs = noisy
    a = cam_calibrate(scans, sim.odometry, perturbed(), CamConfig(workers=1), pairs=pairs[:80])
    b = cam_calibrate(scans, sim.odometry, perturbed(), CamConfig(workers=4), pairs=pairs[:80])
    np.testing.assert_array_equal(a.params, b.params)


@pytest.mark.slow
def test_huber_mode_resists_wheel_slip():
    sim = synth_displacements(SimConfig(seed=2, n_steps=150, slip_fraction=0.1))
    scans = synth_scans(sim)
    errs = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for huber in (False, True):
            res = cam_calibrate(scans, sim.odometry, perturbed(), CamConfig(huber=huber))
            errs[huber] = abs(res.model.drive.b - TRUTH.drive.b)
    assert errs[True] <= 0.5 * errs[False]


def disjoint_outliers(scans, pairs, fraction, seed):
    """Replace the second scan of a share of pairs with a scan taken elsewhere."""
    rng = np.random.default_rng(seed)
    bad = rng.choice(len(pairs), int(round(fraction * len(pairs))), replace=False)
    P, S = pairs.copy(), list(scans)
    for i in bad:
        k = P[i, 1]
        S.append(Scan(scans[k].t, scans[(k + len(scans) // 2) % len(scans)].points))
        P[i, 1] = len(S) - 1
    return S, P


@pytest.mark.slow
def test_cam_huber_tolerates_disjoint_scan_pairs():
    norm = np.r_[TV[:3], np.hypot(*TV[3:5]), np.hypot(*TV[3:5]), np.pi]
    e0, e1 = [], []
    for seed in range(6, 12):
        sim = synth_displacements(SimConfig(seed=seed, n_steps=150))
        scans = synth_scans(sim)
        init = perturbed()
        pairs = select_scan_pairs(sim.odometry, init.drive)
        S, P = disjoint_outliers(scans, pairs, 0.2, seed)
        cfg = CamConfig(huber=True)
        e0.append(np.abs(cam_calibrate(scans, sim.odometry, init, cfg, pairs=pairs).params - TV) / norm)
        e1.append(np.abs(cam_calibrate(S, sim.odometry, init, cfg, pairs=P).params - TV) / norm)
    rms0 = np.sqrt(np.mean(np.square(e0)))
    rms1 = np.sqrt(np.mean(np.square(e1)))
    assert rms1 <= 2.0 * rms0


# --- point-to-line variants ------------------------------------------------------------


@pytest.fixture(scope="module")
def room():
    sim = synth_displacements(SimConfig(seed=1, n_steps=80))
    scans = synth_scans(sim, World(ROOM, 6.0), range_noise=0.0, dropout=0.0)
    pairs = select_scan_pairs(sim.odometry, TRUTH.drive)
    return sim, scans, pairs


def test_plicp_recovers_truth_on_walls(room):
    sim, scans, pairs = room
    frozen = freeze_correspondences(scans, pairs, sim.odometry, TRUTH, metric="line")
    assert frozen.C is not None
    np.testing.assert_allclose(plicp_extrinsic_closed_form(frozen, TRUTH.drive), TRUTH.extrinsic, atol=1e-8)
    start = DiffDriveParams(*(TV[:3] * [1.04, 0.96, 1.03]))
    drive, _ = plicp_intrinsic_search(frozen, TRUTH.extrinsic, start=start)
    np.testing.assert_allclose(drive.to_vector(), TV[:3], rtol=1e-5)


def test_plicp_full_calibration(room):
    sim, scans, pairs = room
    res = cam_calibrate(scans, sim.odometry, perturbed(), CamConfig(metric="line"), pairs=pairs)
    np.testing.assert_allclose(res.params, TV, rtol=1e-4)


def test_plicp_isotropic_metric_reduces_to_point(noisy):
    sim, scans, pairs = noisy
    model = perturbed()
    pt = freeze_correspondences(scans, pairs[:100], sim.odometry, model)
    iso = copy.copy(pt)
    iso.C = np.broadcast_to(np.eye(2), (len(pt.pid), 2, 2)).copy()
    np.testing.assert_allclose(plicp_extrinsic_closed_form(iso, model.drive),
                               extrinsic_closed_form(pt, model.drive), atol=1e-12)
    a, _ = plicp_intrinsic_search(iso, model.extrinsic, start=model.drive)
    b, _ = intrinsic_search(pt, model.extrinsic, start=model.drive)
    np.testing.assert_allclose(a.to_vector(), b.to_vector(), rtol=1e-12)


def test_plicp_requires_normals(clean):
    with pytest.raises(ValueError):
        plicp_extrinsic_closed_form(clean[3], TRUTH.drive)
    with pytest.raises(ValueError):
        plicp_intrinsic_search(clean[3], TRUTH.extrinsic, start=TRUTH.drive)


def test_plicp_parallel_normals_with_equal_turns_is_singular(rng):
    # Every pair turns by the same angle and every normal points along y,
    # so only one direction of the sensor translation is constrained.
    P, n = 6, 30
    rates = np.tile([[[-1.0, 1.0]]], (P, 1, 1))
    segs = PairSegments(rates, np.full((P, 1), 0.7), np.ones((P, 1), bool), np.zeros((P, 2)))
    pid = np.repeat(np.arange(P), n)
    zj = rng.uniform(-3, 3, size=(P * n, 2))
    zk = rng.uniform(-3, 3, size=(P * n, 2))
    C = np.tile(np.array([[0.0, 0.0], [0.0, 1.0]]), (P * n, 1, 1))
    frozen = FrozenCorrespondences(pid, zj, zk, C, segs, np.full(P, n))
    with pytest.raises(ConditioningError):
        plicp_extrinsic_closed_form(frozen, TRUTH.drive)


def test_unit_motion_matches_prediction(clean):
    segs = clean[3].segs
    d = TRUTH.drive
    theta, t = cam._unit_motion(segs, [d.r_L / d.b], [d.r_R / d.b])
    q = predict_robot_motion(d, segs)
    np.testing.assert_allclose(t[0] * d.b, q[:, :2], atol=1e-14)
    np.testing.assert_allclose(np.angle(np.exp(1j * theta[0])), q[:, 2], atol=1e-14)
