"""Joint scan matching and calibration for differential-drive robots.

The calibrator minimises the trimmed point-correspondence error between
pairs of scans, where each pair's relative pose is predicted from wheel
odometry under the current parameters. Each outer iteration freezes the
nearest-neighbour correspondences (and, for the point-to-line metric, the
target normals). It then alternates two exact sub-solves on that frozen
set:

* the sensor pose ``ℓ`` for fixed drive parameters, a quadratic in
  ``(l_x, l_y, cos l_θ, sin l_θ)`` with the last two entries on the unit
  circle;
* the drive parameters for fixed ``ℓ``. In the reduced variables
  ``r̃ = (r_L/b, r_R/b)`` the predicted heading no longer depends on
  ``b`` and the predicted translation is linear in it. A refined grid over
  ``r̃`` therefore needs only a closed-form ``b`` at each node.

Both sub-solves can only lower the frozen objective, and this is checked
after every half-step.

With ``huber=True`` each pair enters through the Huber loss of its RMS
residual, scaled by a robust spread estimate that is held fixed during an
outer iteration. The sub-solves then minimise a reweighted majoriser, so
the Huber objective is also monotone.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .cirls import canonicalize_signs, huber_loss
from .errors import ConditioningError, ConvergenceError, ObservabilityError
from .geometry import oplus, rot2, transform_points, wrap_angle
from .kinematics import DiffDriveParams, Odometry, PairSegments, SensorModel, predict_robot_motion
from .observability import THETA_MIN, T_MIN, check_observability
from .quadratic import solve_constrained_quadratic, solve_partially_constrained_quadratic
from .scanmatch import CorrespondenceSet, Scan, closest_distances, estimate_normals, worker_count

__all__ = [
    "CamConfig",
    "CamResult",
    "FrozenCorrespondences",
    "select_scan_pairs",
    "check_observability",
    "check_pair_excitation",
    "trimmed_objective",
    "freeze_correspondences",
    "frozen_objective",
    "extrinsic_closed_form",
    "plicp_extrinsic_closed_form",
    "solve_constrained_quadratic",
    "b_closed_form",
    "intrinsic_search",
    "plicp_intrinsic_search",
    "cam_calibrate",
    "BoundaryWarning",
]

log = logging.getLogger(__name__)


class BoundaryWarning(UserWarning):
    """The intrinsic grid optimum sits on the edge of the final grid."""


@dataclass
class CamConfig:
    """Settings for :func:`cam_calibrate`.

    Attributes
    ----------
    huber : bool
        Use the per-pair Huber loss instead of the plain trimmed error.
    huber_c : float
        Huber threshold in units of the robust pair-residual spread.
    outer_tol : float
        Stop when the unit-free parameter change of a sweep falls below this.
    grid_points, grid_halfwidth, grid_shrink, grid_levels
        The ``(r_L/b, r_R/b)`` grid: nodes per axis, initial relative
        half-width, shrink factor per level and number of levels.
    metric : {"point", "line"}
        Point-to-point or point-to-line correspondence error.
    t_min, t_max, theta_min, successors
        Pair selection: predicted translation range, minimum rotation and
        the number of later scans each scan is paired with.
    """

    huber: bool = False
    huber_c: float = 1.0
    outer_tol: float = 1e-6
    max_outer: int = 30
    max_inner: int = 100
    grid_points: int = 11
    grid_halfwidth: float = 0.1
    grid_shrink: float = 0.3
    grid_levels: int = 10
    metric: str = "point"
    t_min: float = T_MIN
    t_max: float = 0.15
    theta_min: float = THETA_MIN
    successors: int = 3
    workers: int | None = None

    def __post_init__(self) -> None:
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")
        if self.grid_points < 3 or self.grid_points % 2 == 0:
            raise ValueError("grid_points must be odd and at least 3")
        if self.grid_levels < 1:
            raise ValueError("grid_levels must be at least 1")
        if self.metric not in ("point", "line"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class FrozenCorrespondences:
    """Kept matches of every pair, flattened.

    Attributes
    ----------
    pid : ndarray of int, shape (N,)
        Pair index of each match.
    zj, zk : ndarray, shape (N, 2)
        Matched points in their own sensor frames.
    C : ndarray, shape (N, 2, 2) or None
        Per-match metric; ``None`` means the identity.
    segs : PairSegments
        Odometry of each pair.
    eta : ndarray of int, shape (P,)
        Number of kept matches per pair.
    sets : list of CorrespondenceSet
    """

    pid: NDArray[np.int64]
    zj: NDArray[np.float64]
    zk: NDArray[np.float64]
    C: NDArray[np.float64] | None
    segs: PairSegments
    eta: NDArray[np.int64]
    sets: list[CorrespondenceSet] = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return len(self.eta)

    def same_matches(self, other: "FrozenCorrespondences | None") -> bool:
        if other is None or len(other.sets) != len(self.sets):
            return False
        return all(a.same_matches(b) for a, b in zip(self.sets, other.sets))


@dataclass
class CamResult:
    """Outcome of :func:`cam_calibrate`."""

    model: SensorModel
    objective: float
    pairs: NDArray[np.int64]
    iterations: list[dict]
    converged: bool
    boundary: bool = False
    method: str = "cam"

    @property
    def params(self) -> NDArray[np.float64]:
        return self.model.vector()

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "model": self.model.as_dict(),
            "names": list(self.model.names),
            "estimate": {k: float(v) for k, v in zip(self.model.names, self.params)},
            "objective": float(self.objective),
            "n_pairs": int(len(self.pairs)),
            "converged": bool(self.converged),
            "grid_boundary": bool(self.boundary),
            "iterations": self.iterations,
        }


# ---------------------------------------------------------------------------
# Pair selection and correspondences
# ---------------------------------------------------------------------------


def _candidate_pairs(n: int, successors: int) -> NDArray[np.int64]:
    out = [(j, j + d) for j in range(n) for d in range(1, successors + 1) if j + d < n]
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def check_pair_excitation(
    odometry: Odometry, nominal: DiffDriveParams, cfg: CamConfig | None = None, times: ArrayLike | None = None
):
    """Diagnose whether the candidate scan pairs excite every parameter.

    Runs before :func:`select_scan_pairs` so that straight, rotation-only
    and translation-only logs get a specific diagnosis.

    Raises
    ------
    ObservabilityError
        ``"insufficient-excitation"`` for fewer than two scans, otherwise
        as :func:`check_observability`.
    """
    cfg = cfg or CamConfig()
    t = odometry.t if times is None else np.asarray(times, float)
    cand = _candidate_pairs(len(t), cfg.successors)
    if len(cand) == 0:
        raise ObservabilityError("insufficient-excitation", (), "fewer than two scans")
    q = predict_robot_motion(nominal, _pair_segments(odometry, t, cand))
    return check_observability(q, "diff_drive", DiffDriveParams.translation_params, cfg.theta_min, cfg.t_min)


def select_scan_pairs(
    odometry: Odometry,
    nominal: DiffDriveParams,
    cfg: CamConfig | None = None,
    times: ArrayLike | None = None,
) -> NDArray[np.int64]:
    """Scan pairs whose nominal motion both turns and translates enough.

    Parameters
    ----------
    odometry : Odometry
    nominal : DiffDriveParams
        Parameters used to predict each pair's motion.
    cfg : CamConfig, optional
    times : array_like, optional
        Scan times; defaults to the odometry sample times.

    Returns
    -------
    ndarray of int, shape (P, 2)
        Indices ``(j, k)`` into ``times`` with ``k - j ≤ successors``.

    Raises
    ------
    ObservabilityError
        ``"insufficient-excitation"`` when no pair qualifies.
    """
    cfg = cfg or CamConfig()
    t = odometry.t if times is None else np.asarray(times, float)
    cand = _candidate_pairs(len(t), cfg.successors)
    if len(cand) and cfg.t_max > 0:
        idx = odometry.index_of(t)
        q = predict_robot_motion(nominal, odometry.segments(idx[cand[:, 0]], idx[cand[:, 1]]))
        d = np.hypot(q[:, 0], q[:, 1])
        keep = (d >= cfg.t_min) & (d <= cfg.t_max) & (np.abs(q[:, 2]) >= cfg.theta_min)
        cand = cand[keep]
    else:
        cand = cand[:0]
    if len(cand) == 0:
        raise ObservabilityError(
            "insufficient-excitation", (), "no scan pair both rotates and translates within the thresholds"
        )
    return cand


def _pair_segments(odometry: Odometry, times: NDArray, pairs: NDArray) -> PairSegments:
    idx = odometry.index_of(times)
    return odometry.segments(idx[pairs[:, 0]], idx[pairs[:, 1]])


def _map_pairs(fn, n: int, workers: int | None) -> list:
    w = worker_count(workers)
    if w == 1 or n < 8:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, range(n)))


def trimmed_objective(
    scans: Sequence[Scan],
    pairs: ArrayLike,
    odometry: Odometry,
    model: SensorModel,
    workers: int | None = None,
) -> tuple[float, list[CorrespondenceSet]]:
    """Sum over pairs of the trimmed squared correspondence distances.

    Each pair's robot motion is predicted from odometry with ``model``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    times = np.array([s.t for s in scans])
    q = predict_robot_motion(model.drive, _pair_segments(odometry, times, pairs))
    l = np.asarray(model.extrinsic)

    def one(i: int) -> CorrespondenceSet:
        j, k = pairs[i]
        return closest_distances(scans[j], scans[k], q[i], l, pair=(int(j), int(k)))

    sets = _map_pairs(one, len(pairs), workers)
    return float(sum(c.trimmed_error() for c in sets)), sets


def freeze_correspondences(
    scans: Sequence[Scan],
    pairs: ArrayLike,
    odometry: Odometry,
    model: SensorModel,
    metric: str = "point",
    workers: int | None = None,
) -> FrozenCorrespondences:
    """Match and trim every pair at ``model`` and flatten the kept matches.

    For ``metric="line"`` the normal of each target point is estimated in
    scan ``k`` and carried into the robot frame at ``t_j`` with the current
    parameters. Matches without a reliable normal keep the identity metric.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    times = np.array([s.t for s in scans])
    segs = _pair_segments(odometry, times, pairs)
    _, sets = trimmed_objective(scans, pairs, odometry, model, workers)
    pid = np.concatenate([np.full(c.n_kept, i, np.int64) for i, c in enumerate(sets)])
    zj = np.concatenate([scans[pairs[i, 0]].points[c.kept_j] for i, c in enumerate(sets)])
    zk = np.concatenate([scans[pairs[i, 1]].points[c.kept_k] for i, c in enumerate(sets)])
    eta = np.array([c.n_kept for c in sets], dtype=np.int64)
    C = None
    if metric == "line":
        q = predict_robot_motion(model.drive, segs)
        cache: dict[int, tuple[NDArray, NDArray]] = {}
        C_parts = []
        for i, c in enumerate(sets):
            k = int(pairs[i, 1])
            if k not in cache:
                cache[k] = estimate_normals(scans[k].points)
            nrm, ok = cache[k]
            n = nrm[c.kept_k] @ rot2(q[i, 2] + model.extrinsic[2]).T
            Ci = np.einsum("ni,nj->nij", n, n)
            Ci[~ok[c.kept_k]] = np.eye(2)
            c.normals = n
            C_parts.append(Ci)
        C = np.concatenate(C_parts)
    return FrozenCorrespondences(pid, zj, zk, C, segs, eta, list(sets))


def _metric_sq(e: NDArray, C: NDArray | None) -> NDArray:
    if C is None:
        return np.sum(e * e, axis=-1)
    return np.einsum("ni,nij,nj->n", e, C, e)


def _pair_errors(frozen: FrozenCorrespondences, model: SensorModel) -> NDArray[np.float64]:
    """Frozen squared error of each pair, evaluated point by point."""
    q = predict_robot_motion(model.drive, frozen.segs)
    l = np.asarray(model.extrinsic)
    a = transform_points(l, frozen.zj)
    qb = oplus(q, l)[frozen.pid]
    R = rot2(qb[:, 2])
    b = np.einsum("nij,nj->ni", R, frozen.zk) + qb[:, :2]
    h = _metric_sq(a - b, frozen.C)
    return np.bincount(frozen.pid, weights=h, minlength=frozen.n_pairs)


def frozen_objective(
    frozen: FrozenCorrespondences,
    model: SensorModel,
    scale: float | None = None,
    c: float = 1.0,
) -> float:
    """Frozen objective at ``model``.

    Without ``scale`` this is the total squared error. With ``scale`` it
    is the Huber objective ``Σ_p ρ_c(sqrt(h_p/η_p) / scale)``.
    """
    h = _pair_errors(frozen, model)
    if scale is None:
        return float(np.sum(h))
    return float(np.sum(huber_loss(np.sqrt(h / frozen.eta) / scale, c)))


def _huber_pair_weights(frozen: FrozenCorrespondences, model: SensorModel, scale: float, c: float) -> NDArray:
    """Majoriser weights ``w(u_p) / η_p`` of the per-pair Huber loss."""
    u = np.sqrt(_pair_errors(frozen, model) / frozen.eta) / scale
    w = np.where(u <= c, 1.0, c / np.where(u > 0, u, 1.0))
    return w / frozen.eta


# ---------------------------------------------------------------------------
# Extrinsic sub-solve
# ---------------------------------------------------------------------------


def _cross_mat(z: NDArray) -> NDArray:
    """``Z`` with ``Z (cos θ, sin θ) = R(θ) z``, shape ``(N, 2, 2)``."""
    Z = np.empty(z.shape[:-1] + (2, 2))
    Z[..., 0, 0], Z[..., 0, 1] = z[..., 0], -z[..., 1]
    Z[..., 1, 0], Z[..., 1, 1] = z[..., 1], z[..., 0]
    return Z


def extrinsic_closed_form(
    frozen: FrozenCorrespondences,
    drive: DiffDriveParams,
    weights: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """Globally optimal sensor pose for fixed drive parameters.

    The error of a match, ``ℓ⊕z_j - q⊕ℓ⊕z_k``, is linear in
    ``y = (l_x, l_y, cos l_θ, sin l_θ)``: ``A y - t_q`` with
    ``A = [I - R_q | Z_j - R_q Z_k]``. Summing ``(Ay - t)ᵀ C (Ay - t)``
    gives ``yᵀMy + gᵀy + const``, minimised with the last two entries of
    ``y`` on the unit circle.

    Parameters
    ----------
    frozen : FrozenCorrespondences
    drive : DiffDriveParams
    weights : array_like, shape (P,), optional
        Per-pair weights.

    Returns
    -------
    ndarray, shape (3,)

    Raises
    ------
    ObservabilityError
        When no pair rotates, so ``Σ (I - R_q)ᵀ C (I - R_q)`` vanishes.
    ConditioningError
        When that matrix is singular although pairs rotate. This happens
        with a point-to-line metric whose normals all agree and pairs that
        all rotate by the same angle.
    """
    q = predict_robot_motion(drive, frozen.segs)
    w = np.ones(frozen.n_pairs) if weights is None else np.asarray(weights, float)
    wi = w[frozen.pid]
    Rq = rot2(q[frozen.pid, 2])
    A = np.concatenate([np.eye(2) - Rq, _cross_mat(frozen.zj) - Rq @ _cross_mat(frozen.zk)], axis=-1)
    t = q[frozen.pid, :2]
    CA = A if frozen.C is None else frozen.C @ A
    M = np.einsum("n,nki,nkj->ij", wi, A, CA)
    g = -2.0 * np.einsum("n,nk,nki->i", wi, t, CA)
    ev = np.linalg.eigvalsh(M[:2, :2])
    if ev[1] <= 1e-12 * max(float(np.trace(M[2:, 2:])), 1e-300):
        raise ObservabilityError("rotation-deficient", ("l_x", "l_y"), "no selected pair rotates")
    if ev[0] <= 1e-10 * ev[1]:
        raise ConditioningError(
            "extrinsic closed form: the correspondence metric constrains only one direction of the "
            "sensor translation", ("l_x", "l_y"))
    y = solve_partially_constrained_quadratic(M, g)
    return np.array([y[0], y[1], float(np.arctan2(y[3], y[2]))])


def plicp_extrinsic_closed_form(
    frozen: FrozenCorrespondences,
    drive: DiffDriveParams,
    weights: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """Point-to-line version of :func:`extrinsic_closed_form`.

    Requires frozen normals (``metric="line"``). Parallel normals only
    weaken the problem unless every pair also rotates by the same angle,
    in which case :class:`~wheelcal.errors.ConditioningError` is raised.
    """
    if frozen.C is None:
        raise ValueError("point-to-line solve needs correspondences frozen with metric='line'")
    return extrinsic_closed_form(frozen, drive, weights)


# ---------------------------------------------------------------------------
# Intrinsic sub-solve
# ---------------------------------------------------------------------------


def _unit_motion(segs: PairSegments, rl: ArrayLike, rr: ArrayLike) -> tuple[NDArray, NDArray]:
    """Robot motion with ``b = 1`` for each reduced-parameter node.

    Parameters
    ----------
    rl, rr : array_like, shape (G,)
        Reduced parameters ``r_L/b`` and ``r_R/b``.

    Returns
    -------
    theta : ndarray, shape (G, P)
        Unwrapped heading change.
    t : ndarray, shape (G, P, 2)
        Translation per unit axle length.
    """
    rl = np.atleast_1d(np.asarray(rl, float))[:, None, None]
    rr = np.atleast_1d(np.asarray(rr, float))[:, None, None]
    wl, wr = segs.rates[None, ..., 0], segs.rates[None, ..., 1]
    v = 0.5 * (rl * wl + rr * wr)
    om = -rl * wl + rr * wr
    mask = segs.mask[None]
    dt = np.where(mask, segs.dt[None], 0.0)
    dth = om * dt
    head = np.cumsum(dth, axis=-1) - dth
    # Exact arc of each step: v dt (e^{iφ} - 1) / (iφ) with φ = ω dt.
    half = 0.5 * dth
    small = np.abs(half) < 1e-4
    sinc = np.where(small, 1.0 - half * half / 6.0, np.sin(half) / np.where(small, 1.0, half))
    moved = np.sum((v * dt * sinc) * np.exp(1j * (head + half)), axis=-1)
    theta = np.sum(dth, axis=-1)
    t = np.stack([moved.real, moved.imag], -1)
    return theta, t


def _reduced(drive: DiffDriveParams) -> NDArray[np.float64]:
    return np.array([drive.r_L / drive.b, drive.r_R / drive.b])


@dataclass
class _PairStats:
    """Per-pair sums that make the frozen error cheap to evaluate at any heading.

    With ``d(δ) = z̃_j - R(θ₀+δ) z̃_k = V (1, cos δ - 1, sin δ)``, where the
    columns of ``V`` are ``d₀ = z̃_j - R(θ₀) z̃_k``, ``-w`` and ``-J w``
    (``w = R(θ₀) z̃_k``, ``J`` the quarter turn), these hold ``Σ VᵀCV``,
    ``Σ C V`` and ``Σ C`` per pair.
    """

    theta0: NDArray
    G: NDArray
    H: NDArray
    K: NDArray


def _pair_stats(frozen: FrozenCorrespondences, l: NDArray, theta0: NDArray) -> _PairStats:
    zj = transform_points(l, frozen.zj)
    zk = transform_points(l, frozen.zk)
    R0 = rot2(theta0[frozen.pid])
    w = np.einsum("nij,nj->ni", R0, zk)
    Jw = np.stack([-w[:, 1], w[:, 0]], -1)
    V = np.stack([zj - w, -w, -Jw], -1)  # (N, 2, 3)
    CV = V if frozen.C is None else frozen.C @ V
    P = frozen.n_pairs
    G = np.zeros((P, 3, 3))
    H = np.zeros((P, 2, 3))
    K = np.zeros((P, 2, 2))
    np.add.at(G, frozen.pid, np.einsum("nki,nkj->nij", V, CV))
    np.add.at(H, frozen.pid, CV)
    if frozen.C is None:
        K[:] = np.eye(2) * frozen.eta[:, None, None]
    else:
        np.add.at(K, frozen.pid, frozen.C)
    return _PairStats(theta0, G, H, K)


def _grid_eval(
    stats: _PairStats, segs: PairSegments, rl: NDArray, rr: NDArray, w: NDArray
) -> tuple[NDArray, NDArray]:
    """Weighted frozen error and optimal ``b`` at each node, shapes ``(G,)``."""
    theta, tt = _unit_motion(segs, rl, rr)
    delta = theta - stats.theta0[None]
    u1, u2 = -2.0 * np.sin(0.5 * delta) ** 2, np.sin(delta)
    G, H, K = stats.G, stats.H, stats.K
    sse = (G[:, 0, 0] + 2.0 * (G[:, 0, 1] * u1 + G[:, 0, 2] * u2)
           + G[:, 1, 1] * u1 * u1 + 2.0 * G[:, 1, 2] * u1 * u2 + G[:, 2, 2] * u2 * u2)
    tx, ty = tt[..., 0], tt[..., 1]
    thu = (tx * (H[:, 0, 0] + H[:, 0, 1] * u1 + H[:, 0, 2] * u2)
           + ty * (H[:, 1, 0] + H[:, 1, 1] * u1 + H[:, 1, 2] * u2))
    tkt = K[:, 0, 0] * tx * tx + 2.0 * K[:, 0, 1] * tx * ty + K[:, 1, 1] * ty * ty
    num = thu @ w
    den = tkt @ w
    b = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    h = sse @ w - 2.0 * b * num + b * b * den
    return h, b


def b_closed_form(
    frozen: FrozenCorrespondences,
    rt: ArrayLike,
    l: ArrayLike,
    weights: ArrayLike | None = None,
) -> float:
    """Optimal axle length for fixed ``(r_L/b, r_R/b)`` and sensor pose.

    With ``z̃ = ℓ ⊕ z`` and the predicted translation written ``b t̃``,

    ``b = Σ t̃ᵀ C (z̃_j - R_q z̃_k) / Σ t̃ᵀ C t̃``,

    summed over all kept matches.

    Raises
    ------
    ObservabilityError
        When no pair translates (zero denominator).
    """
    rt = np.asarray(rt, float)
    w = np.ones(frozen.n_pairs) if weights is None else np.asarray(weights, float)
    theta, tt = _unit_motion(frozen.segs, [rt[0]], [rt[1]])
    theta, tt = theta[0], tt[0]
    zj = transform_points(l, frozen.zj)
    zk = transform_points(l, frozen.zk)
    d = zj - np.einsum("nij,nj->ni", rot2(theta[frozen.pid]), zk)
    ti = tt[frozen.pid]
    Ct = ti if frozen.C is None else np.einsum("nij,nj->ni", frozen.C, ti)
    wi = w[frozen.pid]
    den = float(np.sum(wi * np.sum(Ct * ti, axis=1)))
    scale = float(np.sum(wi * np.sum(ti * ti, axis=1))) + float(np.sum(wi))
    if den <= 1e-14 * scale:
        raise ObservabilityError("translation-deficient", ("r_L", "r_R"), "no selected pair translates")
    return float(np.sum(wi * np.sum(Ct * d, axis=1)) / den)


def intrinsic_search(
    frozen: FrozenCorrespondences,
    l: ArrayLike,
    cfg: CamConfig | None = None,
    start: DiffDriveParams | None = None,
    weights: ArrayLike | None = None,
) -> tuple[DiffDriveParams, dict]:
    """Drive parameters minimising the frozen error for a fixed sensor pose.

    A square grid over ``(r_L/b, r_R/b)`` is centred on ``start``. Every
    node gets its closed-form ``b``. The grid is re-centred on the best
    node and shrunk by ``grid_shrink`` when that node is interior; when it
    is on the edge, the grid moves without shrinking. The centre node
    always keeps its current value, so the result never scores worse
    than ``start`` with its optimal ``b``.

    Returns
    -------
    DiffDriveParams
    info : dict
        ``objective``, ``levels`` and ``boundary`` (True when the final
        optimum lies on the edge of the final grid, which suggests a poor
        initial guess).
    """
    cfg = cfg or CamConfig()
    if start is None:
        raise ValueError("intrinsic_search needs a starting point")
    l = np.asarray(l, float)
    w = np.ones(frozen.n_pairs) if weights is None else np.asarray(weights, float)
    center = _reduced(start)
    stats = _pair_stats(frozen, l, _unit_motion(frozen.segs, [center[0]], [center[1]])[0][0])
    half = cfg.grid_halfwidth * np.abs(center)
    n = cfg.grid_points
    ax = np.linspace(-1.0, 1.0, n)
    h_c, b_c = _grid_eval(stats, frozen.segs, center[:1], center[1:], w)
    best_h, best_b = float(h_c[0]), float(b_c[0])
    boundary = False
    levels = moves = 0
    while levels < cfg.grid_levels and moves < 10 * cfg.grid_levels:
        gl, gr = np.meshgrid(center[0] + half[0] * ax, center[1] + half[1] * ax, indexing="ij")
        h, b = _grid_eval(stats, frozen.segs, gl.ravel(), gr.ravel(), w)
        i = int(np.argmin(h))
        boundary = False
        if h[i] < best_h:
            best_h, best_b = float(h[i]), float(b[i])
            ii, jj = divmod(i, n)
            center = np.array([gl.ravel()[i], gr.ravel()[i]])
            boundary = ii in (0, n - 1) or jj in (0, n - 1)
        moves += 1
        if boundary:
            continue
        half = half * cfg.grid_shrink
        levels += 1
    if boundary:
        warnings.warn("intrinsic grid optimum on the final grid boundary; check the initial guess", BoundaryWarning,
                      stacklevel=2)
    drive = DiffDriveParams(center[0] * best_b, center[1] * best_b, best_b)
    return drive, {"objective": best_h, "levels": levels, "boundary": boundary}


def plicp_intrinsic_search(
    frozen: FrozenCorrespondences,
    l: ArrayLike,
    cfg: CamConfig | None = None,
    start: DiffDriveParams | None = None,
    weights: ArrayLike | None = None,
) -> tuple[DiffDriveParams, dict]:
    """Point-to-line version of :func:`intrinsic_search`."""
    if frozen.C is None:
        raise ValueError("point-to-line search needs correspondences frozen with metric='line'")
    return intrinsic_search(frozen, l, cfg, start, weights)


# ---------------------------------------------------------------------------
# Alternating driver
# ---------------------------------------------------------------------------


def _scale_vector(model: SensorModel) -> NDArray[np.float64]:
    d = np.abs(model.drive.to_vector())
    return np.concatenate([d, [d.mean(), d.mean(), 1.0]])


def cam_calibrate(
    scans: Sequence[Scan],
    odometry: Odometry,
    init: SensorModel,
    cfg: CamConfig | None = None,
    pairs: ArrayLike | None = None,
) -> CamResult:
    """Calibrate drive parameters and sensor pose directly from scans.

    Parameters
    ----------
    scans : sequence of Scan
        Scans in time order; their times must match odometry samples.
    odometry : Odometry
    init : SensorModel
        Differential-drive starting point, also used to select pairs.
    cfg : CamConfig, optional
    pairs : array_like, shape (P, 2), optional
        Explicit scan pairs; selected automatically when omitted.

    Returns
    -------
    CamResult

    Raises
    ------
    ObservabilityError
        When the candidate pairs lack rotation or translation, or none
        qualifies.
    ConvergenceError
        When a sub-solve raises the frozen objective, which would indicate
        a numerical fault.
    """
    cfg = cfg or CamConfig()
    if not isinstance(init.drive, DiffDriveParams):
        raise TypeError("scan-based calibration supports the differential drive only")
    times = np.array([s.t for s in scans])
    if pairs is None:
        check_pair_excitation(odometry, init.drive, cfg, times)
        pairs = select_scan_pairs(odometry, init.drive, cfg, times)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    model = init
    rows: list[dict] = []
    prev: FrozenCorrespondences | None = None
    converged = boundary = False
    obj = np.nan
    for outer in range(1, cfg.max_outer + 1):
        frozen = freeze_correspondences(scans, pairs, odometry, model, cfg.metric, cfg.workers)
        if frozen.same_matches(prev):
            converged = True
            break
        prev = frozen
        spread = None
        if cfg.huber:
            h = _pair_errors(frozen, model)
            rms = np.sqrt(h / frozen.eta)
            floor = 1e-9 * float(np.sqrt(np.mean(np.sum(frozen.zj**2, axis=1))))
            spread = max(1.4826 * float(np.median(rms)), floor)
        zz = float(np.sum(frozen.zj**2) + np.sum(frozen.zk**2))

        def objective(m: SensorModel) -> float:
            return frozen_objective(frozen, m, spread, cfg.huber_c)

        def weights(m: SensorModel) -> NDArray | None:
            return _huber_pair_weights(frozen, m, spread, cfg.huber_c) if cfg.huber else None

        atol = 1e-12 * frozen.n_pairs if cfg.huber else 1e-16 * zz
        h_prev = objective(model)
        start = model
        for inner in range(1, cfg.max_inner + 1):
            l_new = extrinsic_closed_form(frozen, model.drive, weights(model))
            m1 = SensorModel(model.drive, (float(l_new[0]), float(l_new[1]), float(wrap_angle(l_new[2]))))
            h1 = objective(m1)
            drive, info = intrinsic_search(frozen, l_new, cfg, m1.drive, weights(m1))
            m2 = SensorModel(drive, m1.extrinsic)
            h2 = objective(m2)
            for label, before, after in (("extrinsic", h_prev, h1), ("intrinsic", h1, h2)):
                if after > before + 1e-9 * abs(before) + atol:
                    raise ConvergenceError(
                        f"{label} step raised the frozen objective from {before!r} to {after!r} "
                        f"(outer {outer}, inner {inner})"
                    )
            step = float(np.linalg.norm(_angle_aware_diff(m2, model) / _scale_vector(model)))
            rows.append({"outer": outer, "inner": inner, "objective_before": h_prev,
                         "objective_extrinsic": h1, "objective_intrinsic": h2, "step": step})
            boundary = bool(info["boundary"])
            model, h_prev = m2, h2
            if step <= cfg.outer_tol:
                break
        obj = h_prev
        outer_step = float(np.linalg.norm(_angle_aware_diff(model, start) / _scale_vector(model)))
        log.debug("cam outer %d: objective %.6e step %.3e", outer, obj, outer_step)
        if outer_step <= cfg.outer_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"cam: no convergence after {cfg.max_outer} outer iterations", RuntimeWarning, stacklevel=2)
    return CamResult(canonicalize_signs(model), float(obj), pairs, rows, converged, boundary)


def _angle_aware_diff(a: SensorModel, b: SensorModel) -> NDArray[np.float64]:
    d = a.vector() - b.vector()
    d[-1] = wrap_angle(d[-1])
    return d
