"""Correspondences, overlap trimming and rigid alignment of 2D scans.

The trimmed ICP here serves two clients. The joint calibrator (``cam``)
uses :func:`closest_distances` to freeze point correspondences between a
pair of scans under the current parameters. The displacement-based
calibrators consume the :class:`DisplacementObs` records produced by
:func:`estimate_displacement`.

Overlap trimming picks the fraction ``ζ`` of the closest matches that
minimises ``e(ζ) / ζ**3`` over the grid 0.40, 0.45, ..., 1.00, where
``e(ζ)`` is the mean of the kept squared distances.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .errors import MatchFailure, NumericalFailure
from .geometry import as_pose, oplus, rot2, transform_points, wrap_angle

__all__ = [
    "Scan",
    "DisplacementObs",
    "CorrespondenceSet",
    "MatchConfig",
    "nearest_neighbors",
    "closest_distances",
    "trim_overlap",
    "rigid_align",
    "estimate_normals",
    "estimate_displacement",
    "match_pairs",
    "worker_count",
]

log = logging.getLogger(__name__)

ZETA_STEPS = np.arange(8, 21)  # ζ = k / 20 for k = 8..20
TRIM_LAMBDA = 2.0


@dataclass
class Scan:
    """Timestamped 2D point cloud in the sensor frame."""

    t: float
    points: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(self.points) == 0:
            raise ValueError("a scan needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("scan contains non-finite coordinates")


@dataclass
class DisplacementObs:
    """Measured sensor displacement between two times.

    Attributes
    ----------
    t_j, t_k : float
        Start and end times (seconds), ``t_k > t_j``.
    s_hat : ndarray, shape (3,)
        Estimated sensor motion ``(x, y, theta)``.
    sigma : ndarray, shape (3,)
        Standard deviations of the three components.
    flagged : bool
        True when the matcher reported a failure but the pair was kept.
    """

    t_j: float
    t_k: float
    s_hat: NDArray[np.float64]
    sigma: NDArray[np.float64]
    flagged: bool = False

    def __post_init__(self) -> None:
        self.s_hat = as_pose(self.s_hat).astype(float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.shape != (3,) or np.any(self.sigma <= 0):
            raise ValueError("sigma needs three positive entries")
        if not self.t_k > self.t_j:
            raise ValueError("displacement interval must have t_k > t_j")


@dataclass
class CorrespondenceSet:
    """Nearest-neighbour matches from scan ``j`` into scan ``k``.

    Matches are sorted by ascending squared distance; the first
    ``n_kept`` survive overlap trimming.
    """

    idx_j: NDArray[np.int64]
    idx_k: NDArray[np.int64]
    d2: NDArray[np.float64]
    zeta: float
    n_kept: int
    normals: NDArray[np.float64] | None = None
    pair: tuple[int, int] = (0, 0)

    @property
    def kept_j(self) -> NDArray[np.int64]:
        return self.idx_j[: self.n_kept]

    @property
    def kept_k(self) -> NDArray[np.int64]:
        return self.idx_k[: self.n_kept]

    def trimmed_error(self) -> float:
        return float(np.sum(self.d2[: self.n_kept]))

    def same_matches(self, other: "CorrespondenceSet") -> bool:
        return (
            self.n_kept == other.n_kept
            and np.array_equal(self.kept_j, other.kept_j)
            and np.array_equal(self.kept_k, other.kept_k)
        )


@dataclass
class MatchConfig:
    """Settings for :func:`estimate_displacement`."""

    metric: str = "point"  # "point" or "line"
    max_iters: int = 50
    tol: float = 1e-7
    fail_distance: float = 0.05
    sigma_floor: tuple[float, float, float] = (1e-3, 1e-3, float(np.deg2rad(0.1)))
    extra: dict = field(default_factory=dict)


def worker_count(default: int | None = None) -> int:
    """Number of worker threads, capped by ``WHEELCAL_THREADS`` when set."""
    n = default if default is not None else (os.cpu_count() or 1)
    env = os.environ.get("WHEELCAL_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            log.warning("ignoring non-integer WHEELCAL_THREADS=%r", env)
    return max(1, n)


def nearest_neighbors(
    query: ArrayLike, ref: ArrayLike, brute: bool = False
) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Index of and squared distance to the nearest ``ref`` point for each query point."""
    q = np.asarray(query, dtype=float).reshape(-1, 2)
    r = np.asarray(ref, dtype=float).reshape(-1, 2)
    if brute:
        d2 = np.sum((q[:, None, :] - r[None, :, :]) ** 2, axis=-1)
        idx = np.argmin(d2, axis=1)
        return idx.astype(np.int64), d2[np.arange(len(q)), idx]
    _, idx = cKDTree(r).query(q, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    d2 = np.sum((q - r[idx]) ** 2, axis=1)
    return idx, d2


def trim_overlap(distances: ArrayLike) -> tuple[float, int]:
    """Choose the overlap fraction for sorted squared distances.

    Parameters
    ----------
    distances : array_like
        Squared distances sorted in ascending order.

    Returns
    -------
    zeta : float
        Selected overlap fraction.
    n_kept : int
        Number of smallest distances to keep, ``ceil(zeta * N)``.

    Notes
    -----
    Ties in the criterion resolve toward the larger ``ζ`` so that exactly
    matched points are never discarded needlessly.
    """
    d = np.asarray(distances, dtype=float)
    n = len(d)
    if n == 0:
        raise ValueError("trim_overlap needs at least one distance")
    csum = np.cumsum(d)
    best_val, best_k, best_i = np.inf, 20, n
    for k in ZETA_STEPS:
        i = max(1, -(-int(k) * n // 20))  # ceil(k n / 20) without float error
        val = (csum[i - 1] / i) / (k / 20.0) ** (1.0 + TRIM_LAMBDA)
        if val <= best_val:
            best_val, best_k, best_i = val, int(k), i
    return best_k / 20.0, best_i


def closest_distances(
    scan_j: Scan | ArrayLike,
    scan_k: Scan | ArrayLike,
    q_jk: ArrayLike,
    l: ArrayLike,
    brute: bool = False,
    pair: tuple[int, int] = (0, 0),
) -> CorrespondenceSet:
    """Match every point of scan ``j`` to its nearest neighbour in scan ``k``.

    Scan ``j`` is mapped to the robot frame at ``t_j`` by ``ℓ ⊕ z``;
    scan ``k`` by ``q_jk ⊕ ℓ ⊕ z``. The result is sorted and trimmed.
    """
    zj = scan_j.points if isinstance(scan_j, Scan) else np.asarray(scan_j, float)
    zk = scan_k.points if isinstance(scan_k, Scan) else np.asarray(scan_k, float)
    a = transform_points(l, zj)
    b = transform_points(oplus(q_jk, l), zk)
    idx, d2 = nearest_neighbors(a, b, brute=brute)
    order = np.argsort(d2, kind="stable")
    d2s = d2[order]
    zeta, n_kept = trim_overlap(d2s)
    return CorrespondenceSet(
        idx_j=order.astype(np.int64), idx_k=idx[order], d2=d2s, zeta=zeta, n_kept=n_kept, pair=pair
    )


def rigid_align(src: ArrayLike, dst: ArrayLike, weights: ArrayLike | None = None) -> NDArray[np.float64]:
    """Weighted least-squares pose ``T`` minimising ``Σ w ||dst - T ⊕ src||²``.

    Parameters
    ----------
    src, dst : array_like, shape (N, 2)
        Matched points.
    weights : array_like, shape (N,), optional
        Non-negative weights; uniform by default.

    Returns
    -------
    ndarray, shape (3,)
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    if len(src) < 2 or w.sum() <= 0:
        raise NumericalFailure("rigid_align needs at least two weighted pairs")
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    a = src - cs
    b = dst - cd
    spread = float(w @ np.sum(a**2, axis=1))
    if spread <= 1e-24:
        raise NumericalFailure("rigid_align: source points coincide")
    dot = float(w @ np.sum(a * b, axis=1))
    cross = float(w @ (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    th = np.arctan2(cross, dot)
    t = cd - rot2(th) @ cs
    return np.array([t[0], t[1], float(wrap_angle(th))])


def estimate_normals(points: ArrayLike, k: int = 2) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Unit normals by PCA over each point and its ``k`` nearest neighbours.

    Returns the normals and a validity mask; neighbourhoods whose two
    principal variances are nearly equal (or that collapse to a point)
    are flagged invalid.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(p)
    normals = np.zeros((n, 2))
    valid = np.zeros(n, dtype=bool)
    if n < k + 1:
        return normals, valid
    _, nbr = cKDTree(p).query(p, k=k + 1)
    nb = p[nbr]
    c = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", c, c)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    big = evals[:, 1]
    valid = (big > 1e-12) & (evals[:, 0] < 0.1 * big)
    return normals, valid


def _point_to_line_step(zk: NDArray, zj: NDArray, nrm: NDArray, ok: NDArray, s: NDArray) -> NDArray:
    """One Gauss-Newton step of the point-to-line objective around ``s``."""
    Rzk = zk @ rot2(s[2]).T
    pred = Rzk + s[:2]
    e = pred - zj
    dR = np.stack([-Rzk[:, 1], Rzk[:, 0]], axis=1)
    rows, res = [], []
    if np.any(ok):
        n = nrm[ok]
        rows.append(np.column_stack([n[:, 0], n[:, 1], np.sum(n * dR[ok], axis=1)]))
        res.append(np.sum(n * e[ok], axis=1))
    bad = ~ok
    if np.any(bad):
        for ax in range(2):
            J = np.zeros((int(bad.sum()), 3))
            J[:, ax] = 1.0
            J[:, 2] = dR[bad, ax]
            rows.append(J)
            res.append(e[bad, ax])
    J = np.vstack(rows)
    r = np.concatenate(res)
    delta = np.linalg.lstsq(J, -r, rcond=None)[0]
    return np.array([s[0] + delta[0], s[1] + delta[1], float(wrap_angle(s[2] + delta[2]))])


def estimate_displacement(
    scan_j: Scan,
    scan_k: Scan,
    init: ArrayLike = (0.0, 0.0, 0.0),
    cfg: MatchConfig | None = None,
) -> DisplacementObs:
    """Sensor motion ``s`` with ``z_j ≈ s ⊕ z_k`` by trimmed ICP.

    Parameters
    ----------
    scan_j, scan_k : Scan
        Reference and moving scans.
    init : array_like, shape (3,)
        Initial guess for ``s``.
    cfg : MatchConfig, optional
        Metric, iteration limits and failure threshold.

    Returns
    -------
    DisplacementObs

    Raises
    ------
    MatchFailure
        When the mean kept squared distance exceeds ``fail_distance**2``.
    """
    cfg = cfg or MatchConfig()
    zj, zk = scan_j.points, scan_k.points
    s = as_pose(init).astype(float).copy()
    if cfg.metric == "line":
        normals, nvalid = estimate_normals(zj)
    for _ in range(cfg.max_iters):
        moved = transform_points(s, zk)
        idx, d2 = nearest_neighbors(zj, moved)
        order = np.argsort(d2, kind="stable")
        _, n_kept = trim_overlap(d2[order])
        keep = order[:n_kept]
        src, dst = zk[idx[keep]], zj[keep]
        try:
            if cfg.metric == "line":
                s_new = _point_to_line_step(src, dst, normals[keep], nvalid[keep], s)
            else:
                s_new = rigid_align(src, dst)
        except (NumericalFailure, np.linalg.LinAlgError) as exc:
            raise MatchFailure(f"alignment degenerate: {exc}") from exc
        step = np.hypot(*(s_new[:2] - s[:2])) + abs(float(wrap_angle(s_new[2] - s[2])))
        s = s_new
        if step < cfg.tol:
            break
    moved = transform_points(s, zk)
    idx, d2 = nearest_neighbors(zj, moved)
    order = np.argsort(d2, kind="stable")
    _, n_kept = trim_overlap(d2[order])
    keep = order[:n_kept]
    mean_d2 = float(np.mean(d2[keep]))
    if mean_d2 > cfg.fail_distance**2:
        raise MatchFailure(f"mean kept squared distance {mean_d2:.3g} m^2 above threshold")
    sigma = _alignment_sigma(zk[idx[keep]], zj[keep], s, cfg.sigma_floor)
    return DisplacementObs(scan_j.t, scan_k.t, s, sigma)


def _alignment_sigma(src: NDArray, dst: NDArray, s: NDArray, floor: Sequence[float]) -> NDArray:
    """Component standard deviations from ``mse (JᵀJ)⁻¹`` of the final fit."""
    Rz = src @ rot2(s[2]).T
    r = dst - (Rz + s[:2])
    n = len(src)
    J = np.zeros((2 * n, 3))
    J[0::2, 0] = 1.0
    J[1::2, 1] = 1.0
    J[0::2, 2] = -Rz[:, 1]
    J[1::2, 2] = Rz[:, 0]
    mse = float(np.mean(r**2))
    try:
        cov = mse * np.linalg.inv(J.T @ J)
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        sd = np.full(3, np.inf)
    return np.maximum(sd, np.asarray(floor, dtype=float))


def match_pairs(
    scans: Sequence[Scan],
    pairs: Sequence[tuple[int, int]],
    inits: ArrayLike,
    cfg: MatchConfig | None = None,
    keep_failures: bool = False,
    workers: int | None = None,
) -> list[DisplacementObs]:
    """Run :func:`estimate_displacement` over many pairs, preserving pair order.

    Failed pairs are dropped, or kept with ``flagged=True`` and the initial
    guess as measurement when ``keep_failures`` is set.
    """
    inits = np.asarray(inits, dtype=float).reshape(-1, 3)

    def work(i: int) -> DisplacementObs | None:
        j, k = pairs[i]
        try:
            return estimate_displacement(scans[j], scans[k], inits[i], cfg)
        except MatchFailure as exc:
            log.info("pair (%d, %d) failed: %s", j, k, exc)
            if keep_failures:
                floor = (cfg or MatchConfig()).sigma_floor
                return DisplacementObs(scans[j].t, scans[k].t, inits[i], floor, flagged=True)
            return None

    n_workers = worker_count(workers)
    if n_workers == 1 or len(pairs) < 2:
        out = [work(i) for i in range(len(pairs))]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            out = list(ex.map(work, range(len(pairs))))
    return [o for o in out if o is not None]
