"""Robust calibration from sensor displacement observations.

Every observation ``ŝ_jk`` is compared with the displacement predicted by
the drive model and the sensor pose. The residuals are minimised by
iteratively reweighted least squares. Each outer iteration:

1. solves a weighted nonlinear least-squares problem with fixed weights
   (Gauss-Newton with step halving, or Levenberg-Marquardt);
2. rescales the residuals by their leverage;
3. recomputes Huber weights and zeroes those below the trimming threshold
   ``γ = 1 - mean(w)``.

Weights are handled in normalised form, where an inlier has weight 1. The
raw weight applied to a residual component is the normalised weight
divided by that component's variance.

:func:`cirls_cf_calibrate` is the differential-drive variant in which
each weighted solve has a closed form, provided the ``x`` and ``y``
weights of a pair are equal.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConditioningError, ObservabilityError
from .geometry import rot2, wrap_angle
from .kinematics import (
    DiffDriveParams,
    Odometry,
    PairSegments,
    SensorModel,
    numerical_jacobian,
    predict_displacements,
    predict_robot_motion,
)
from .observability import check_observability
from .quadratic import solve_partially_constrained_quadratic
from .scanmatch import DisplacementObs

__all__ = [
    "huber_loss",
    "huber_weight",
    "trim_weights",
    "leverage_adjust",
    "estimate_covariance",
    "CirlsConfig",
    "CalibrationResult",
    "ResidualBlock",
    "CalibrationProblem",
    "residuals",
    "solve_wnls",
    "cirls_calibrate",
    "cirls_cf_calibrate",
    "canonicalize_signs",
]

log = logging.getLogger(__name__)

LEVERAGE_EPS = 1e-6


# ---------------------------------------------------------------------------
# Scalar robust-statistics helpers
# ---------------------------------------------------------------------------


def huber_loss(u: ArrayLike, c: float) -> NDArray[np.float64]:
    """Huber loss: ``u²/2`` inside ``|u| ≤ c``, ``c(|u| - c/2)`` outside."""
    if c <= 0:
        raise ValueError("Huber threshold must be positive")
    a = np.abs(np.asarray(u, dtype=float))
    return np.where(a <= c, 0.5 * a * a, c * (a - 0.5 * c))


def huber_weight(u: ArrayLike, sigma: ArrayLike, c: float) -> NDArray[np.float64]:
    """IRLS weight ``1/σ²`` for ``|u| ≤ c`` and ``c / (|u| σ²)`` beyond.

    Examples
    --------
    >>> float(huber_weight(-4.0, 2.0, 1.0))
    0.0625
    """
    if c <= 0:
        raise ValueError("Huber threshold must be positive")
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    a = np.abs(np.asarray(u, dtype=float))
    return np.where(a <= c, 1.0, c / np.where(a <= c, 1.0, a)) / sigma**2


def trim_weights(w: ArrayLike, return_info: bool = False):
    """Zero the normalised weights that do not exceed ``γ = 1 - mean(w)``.

    Parameters
    ----------
    w : array_like
        Weights scaled so that an untouched inlier has weight 1. Entries
        that are already zero count toward the mean.
    return_info : bool
        Also return ``(gamma, skipped)``.

    Returns
    -------
    ndarray
        Trimmed weights (a copy). When trimming would zero more than half
        of the nonzero entries it is skipped, and a warning is issued.
    """
    w = np.asarray(w, dtype=float)
    out = w.copy()
    if w.size == 0:
        return (out, 0.0, False) if return_info else out
    gamma = float(1.0 - w.mean())
    cut = (w <= gamma) & (w > 0)
    active = int(np.count_nonzero(w > 0))
    skipped = False
    if active and np.count_nonzero(cut) > 0.5 * active:
        warnings.warn(
            f"weight trimming would zero {np.count_nonzero(cut)} of {active} weights; skipped",
            RuntimeWarning,
            stacklevel=2,
        )
        skipped = True
    else:
        out[cut] = 0.0
    return (out, gamma, skipped) if return_info else out


def _hat_diagonal(J: NDArray, w: NDArray) -> NDArray:
    Jw = J * np.sqrt(w)[:, None]
    keep = np.any(Jw != 0, axis=0)
    Jw = Jw[:, keep]
    if Jw.shape[1] == 0:
        return np.zeros(len(w))
    N = Jw.T @ Jw
    X = np.linalg.lstsq(N, Jw.T, rcond=None)[0]
    return np.einsum("ij,ji->i", Jw, X)


def leverage_adjust(res: ArrayLike, J: ArrayLike, weights: ArrayLike) -> NDArray[np.float64]:
    """Divide each residual by ``sqrt(max(ε, 1 - h_ii))``.

    ``h_ii`` is the diagonal of the weighted hat matrix
    ``W½ J (JᵀWJ)⁻¹ JᵀW½``. Rows with zero weight have zero leverage.

    Parameters
    ----------
    res : array_like, shape (n,)
    J : array_like, shape (n, p)
    weights : array_like, shape (n,)
    """
    res = np.asarray(res, dtype=float)
    h = _hat_diagonal(np.asarray(J, float), np.asarray(weights, float))
    return res / np.sqrt(np.maximum(LEVERAGE_EPS, 1.0 - h))


def estimate_covariance(J: ArrayLike, res: ArrayLike, weights: ArrayLike) -> NDArray[np.float64]:
    """Parameter covariance ``mse · (JᵀWJ)⁻¹``.

    ``mse`` is the mean of ``w υ²`` over residuals with nonzero weight.

    Raises
    ------
    ObservabilityError
        If ``JᵀWJ`` is rank deficient.
    """
    J = np.asarray(J, dtype=float)
    res = np.asarray(res, dtype=float)
    w = np.asarray(weights, dtype=float)
    active = w > 0
    mse = float(np.mean(w[active] * res[active] ** 2)) if np.any(active) else 0.0
    N = (J * w[:, None]).T @ J
    d = np.sqrt(np.diag(N))
    if np.any(d == 0):
        raise ObservabilityError("rank-deficient", (), "zero Jacobian column in covariance")
    Ns = N / np.outer(d, d)
    ev = np.linalg.eigvalsh(Ns)
    if ev[0] <= 1e-12 * ev[-1]:
        raise ObservabilityError("rank-deficient", (), "information matrix is singular")
    inv = np.linalg.inv(Ns) / np.outer(d, d)
    return mse * 0.5 * (inv + inv.T)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass
class CirlsConfig:
    """Settings for :func:`cirls_calibrate` and :func:`cirls_cf_calibrate`.

    Attributes
    ----------
    huber_c : float
        Huber threshold on the standardised residual.
    robust : bool
        When False the weights stay at ``1/σ²`` and one weighted solve is
        made (plain least squares).
    solver : {"gauss-newton", "levenberg-marquardt"}
    leverage : bool
        Leverage-adjust residuals before computing weights.
    trim : bool
        Apply the ``γ`` trimming rule.
    equalize_xy : bool
        Give the ``x`` and ``y`` residual of a pair the larger of their
        two weights. Always on for the closed-form variant.
    fixed : tuple of str, optional
        Parameters held at their initial values. ``None`` uses the
        drive's defaults (for Mecanum, ``L_x``).
    tol : float
        Outer stop on the scaled parameter change.
    """

    huber_c: float = 1.345
    robust: bool = True
    solver: str = "gauss-newton"
    lm_damping: float = 1e-3
    lm_up: float = 10.0
    lm_down: float = 0.3
    tol: float = 1e-8
    max_outer: int = 50
    max_inner: int = 100
    leverage: bool = True
    trim: bool = True
    equalize_xy: bool = False
    fixed: tuple[str, ...] | None = None
    check_observability: bool = True

    def __post_init__(self) -> None:
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")
        if self.solver not in ("gauss-newton", "levenberg-marquardt"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.lm_up <= 1 or not 0 < self.lm_down < 1:
            raise ValueError("LM factors need up > 1 and 0 < down < 1")


@dataclass
class ResidualBlock:
    """Residuals of all pairs at one parameter vector (arrays of shape ``(P, 3)``)."""

    residual: NDArray[np.float64]
    scaled: NDArray[np.float64]
    weights: NDArray[np.float64]

    @property
    def trimmed(self) -> NDArray[np.bool_]:
        return self.weights == 0


@dataclass
class CalibrationResult:
    """Estimated model with uncertainty and diagnostics.

    ``weights`` holds the final normalised weights, shape ``(P, 3)``; zero
    means trimmed. ``covariance`` is over the full parameter vector, with
    zero rows and columns for fixed parameters.
    """

    model: SensorModel
    names: tuple[str, ...]
    covariance: NDArray[np.float64]
    mse: float
    weights: NDArray[np.float64]
    iterations: list[dict] = field(default_factory=list)
    converged: bool = True
    method: str = "cirls"
    fixed: tuple[str, ...] = ()

    @property
    def params(self) -> NDArray[np.float64]:
        return self.model.vector()

    @property
    def stddev(self) -> NDArray[np.float64]:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def intervals(self) -> NDArray[np.float64]:
        """``(lower, upper)`` rows at ``±3σ``, shape ``(P, 2)``."""
        p, s = self.params, self.stddev
        return np.stack([p - 3 * s, p + 3 * s], -1)

    def as_dict(self) -> dict:
        w = self.weights.ravel()
        hist, edges = np.histogram(w, bins=10, range=(0.0, 1.0))
        return {
            "method": self.method,
            "model": self.model.as_dict(),
            "names": list(self.names),
            "estimate": {k: float(v) for k, v in zip(self.names, self.params)},
            "stddev": {k: float(v) for k, v in zip(self.names, self.stddev)},
            "interval_3sigma": {k: [float(a), float(b)] for k, (a, b) in zip(self.names, self.intervals)},
            "fixed": list(self.fixed),
            "mse": float(self.mse),
            "converged": bool(self.converged),
            "n_trimmed": int(np.count_nonzero(w == 0)),
            "weights_histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
            "iterations": self.iterations,
        }


# ---------------------------------------------------------------------------
# Residual model
# ---------------------------------------------------------------------------


def canonicalize_signs(model: SensorModel) -> SensorModel:
    """Pick the representative with positive drive lengths.

    Negating every drive parameter and the sensor translation while
    turning the sensor by π leaves every predicted displacement unchanged.
    """
    v = model.drive.to_vector()
    if np.all(v < 0):
        lx, ly, lt = model.extrinsic
        return SensorModel(type(model.drive).from_vector(-v), (-lx, -ly, float(wrap_angle(lt + np.pi))))
    return model


@dataclass
class CalibrationProblem:
    """Displacement observations bound to the odometry segments they span."""

    template: SensorModel
    segs: PairSegments
    s_hat: NDArray[np.float64]
    sigma: NDArray[np.float64]

    @classmethod
    def build(cls, model: SensorModel, obs: Sequence[DisplacementObs], odometry: Odometry) -> "CalibrationProblem":
        if len(obs) == 0:
            raise ObservabilityError("insufficient-excitation", (), "no displacement observations")
        if odometry.n_wheels != model.drive.n_wheels:
            raise ValueError(
                f"drive {model.drive.kind} needs {model.drive.n_wheels} wheels, odometry has {odometry.n_wheels}"
            )
        tj = np.array([o.t_j for o in obs])
        tk = np.array([o.t_k for o in obs])
        segs = odometry.pairs_for_times(tj, tk)
        s_hat = np.array([np.asarray(o.s_hat, float) for o in obs])
        sigma = np.array([np.asarray(o.sigma, float) for o in obs])
        return cls(model, segs, s_hat, sigma)

    def __len__(self) -> int:
        return len(self.s_hat)

    def predict(self, p: ArrayLike) -> NDArray[np.float64]:
        return predict_displacements(self.template.with_vector(p), self.segs)

    def residual(self, p: ArrayLike) -> NDArray[np.float64]:
        r = self.s_hat - self.predict(p)
        r[:, 2] = wrap_angle(r[:, 2])
        return r

    def jacobian(self, p: ArrayLike, free: ArrayLike | None = None) -> NDArray[np.float64]:
        """Jacobian of the flattened residual, shape ``(3P, dim p)``."""
        J = numerical_jacobian(self.predict, p, free=free, angular_out=[False, False, True])
        return -J.reshape(-1, len(np.asarray(p)))

    def robot_motion(self, p: ArrayLike) -> NDArray[np.float64]:
        return predict_robot_motion(self.template.with_vector(p).drive, self.segs)


def residuals(p: ArrayLike, model: SensorModel, obs: Sequence[DisplacementObs], odometry: Odometry) -> NDArray[np.float64]:
    """Residuals ``ŝ - s(p)`` of shape ``(P, 3)``, headings wrapped."""
    return CalibrationProblem.build(model, obs, odometry).residual(p)


# ---------------------------------------------------------------------------
# Weighted nonlinear least squares
# ---------------------------------------------------------------------------


def _null_direction(N: NDArray, names: Sequence[str]) -> tuple[float, tuple[str, ...]]:
    d = np.sqrt(np.diag(N))
    d = np.where(d > 0, d, 1.0)
    ev, V = np.linalg.eigh(N / np.outer(d, d))
    ratio = ev[0] / ev[-1] if ev[-1] > 0 else 0.0
    v = np.abs(V[:, 0])
    named = tuple(n for n, c in zip(names, v) if c >= 0.3 * v.max())
    zero_cols = tuple(n for n, dd in zip(names, np.diag(N)) if dd == 0)
    return ratio, zero_cols or named


def solve_wnls(
    fun: Callable[[NDArray], NDArray],
    jac: Callable[[NDArray, NDArray], NDArray],
    weights: ArrayLike,
    p0: ArrayLike,
    cfg: CirlsConfig | None = None,
    free: ArrayLike | None = None,
    names: Sequence[str] | None = None,
    cond_limit: float = 1e-13,
) -> tuple[NDArray[np.float64], dict]:
    """Minimise ``Σ w_i r_i(p)²`` with fixed weights.

    Parameters
    ----------
    fun : callable
        ``p -> r`` with ``r`` flat of shape ``(n,)``.
    jac : callable
        ``(p, free) -> J`` of shape ``(n, len(p))``.
    weights : array_like, shape (n,)
    p0 : array_like
    cfg : CirlsConfig, optional
        Solver choice, damping factors and iteration cap.
    free : array_like of bool, optional
        Parameters to optimise; the others stay at ``p0``.
    names : sequence of str, optional
        Used when reporting an ill-conditioned direction.

    Returns
    -------
    p : ndarray
    info : dict
        ``iterations``, ``objective`` and ``reason``.

    Raises
    ------
    ConditioningError
        When the scaled normal matrix has eigenvalue ratio below
        ``cond_limit``. The error names the parameters spanning the null
        direction.
    """
    cfg = cfg or CirlsConfig()
    p = np.asarray(p0, dtype=float).copy()
    w = np.asarray(weights, dtype=float)
    free = np.ones(len(p), bool) if free is None else np.asarray(free, bool)
    names = list(names) if names is not None else [f"p{i}" for i in range(len(p))]
    fnames = [n for n, f in zip(names, free) if f]
    r = fun(p)
    obj = float(np.sum(w * r * r))
    lam = cfg.lm_damping
    reason = "max-iterations"
    it = 0
    for it in range(1, cfg.max_inner + 1):
        J = jac(p, free)[:, free]
        Jw = J * w[:, None]
        N = Jw.T @ J
        grad = Jw.T @ r
        ratio, null = _null_direction(N, fnames)
        if ratio < cond_limit:
            raise ConditioningError("normal equations are singular", null)
        d = np.sqrt(np.diag(N))
        Ns, gs = N / np.outer(d, d), grad / d
        if np.linalg.norm(gs) < 1e-10 * max(1.0, np.sqrt(obj)) and it > 1:
            reason = "gradient"
            break
        accepted = False
        if cfg.solver == "gauss-newton":
            step = -np.linalg.solve(Ns, gs) / d
            alpha = 1.0
            for _ in range(40):
                trial = p.copy()
                trial[free] += alpha * step
                rt = fun(trial)
                ot = float(np.sum(w * rt * rt))
                if ot <= obj:
                    accepted = True
                    break
                alpha *= 0.5
        else:
            for _ in range(40):
                step = -np.linalg.solve(Ns + lam * np.eye(len(d)), gs) / d
                trial = p.copy()
                trial[free] += step
                rt = fun(trial)
                ot = float(np.sum(w * rt * rt))
                if ot <= obj:
                    lam = max(lam * cfg.lm_down, 1e-15)
                    accepted = True
                    break
                lam *= cfg.lm_up
        if not accepted:
            reason = "no-descent"
            break
        dp = np.linalg.norm((trial - p)[free] * d) / max(1.0, np.sqrt(obj))
        rel = (obj - ot) / max(obj, 1e-300)
        p, r, obj = trial, rt, ot
        if rel < 1e-12 or dp < 1e-14 or obj == 0.0:
            reason = "objective" if rel < 1e-12 else "step"
            break
    return p, {"iterations": it, "objective": obj, "reason": reason}


# ---------------------------------------------------------------------------
# IRLS driver
# ---------------------------------------------------------------------------


def _free_mask(model: SensorModel, cfg: CirlsConfig) -> tuple[NDArray[np.bool_], tuple[str, ...]]:
    fixed = tuple(model.drive.default_fixed) if cfg.fixed is None else tuple(cfg.fixed)
    unknown = set(fixed) - set(model.names)
    if unknown:
        raise ValueError(f"unknown fixed parameters {sorted(unknown)}")
    return np.array([n not in fixed for n in model.names]), fixed


def _param_scale(model: SensorModel) -> NDArray[np.float64]:
    """Per-parameter scale making the outer stop independent of units."""
    drive = np.abs(model.drive.to_vector())
    length = float(np.mean(drive)) if np.all(drive > 0) else 1.0
    return np.concatenate([np.where(drive > 0, drive, length), [length, length, 1.0]])


def _update_weights(
    res: NDArray, J: NDArray, raw: NDArray, sigma: NDArray, cfg: CirlsConfig
) -> tuple[NDArray, NDArray, dict]:
    """New normalised and raw weights from the current residuals, shapes ``(P, 3)``."""
    flat = res.ravel()
    adj = leverage_adjust(flat, J, raw.ravel()) if cfg.leverage else flat
    u = adj.reshape(res.shape) / sigma
    a = np.abs(u)
    wn = np.where(a <= cfg.huber_c, 1.0, cfg.huber_c / np.where(a > 0, a, 1.0))
    if cfg.equalize_xy:
        wn[:, :2] = np.max(wn[:, :2], axis=1, keepdims=True)
    info = {"gamma": 0.0, "trim_skipped": False}
    if cfg.trim:
        wt, gamma, skipped = trim_weights(wn.ravel(), return_info=True)
        wn = wt.reshape(wn.shape)
        info = {"gamma": gamma, "trim_skipped": skipped}
    raw = wn / sigma**2
    if cfg.equalize_xy:
        raw[:, :2] = np.max(raw[:, :2], axis=1, keepdims=True)
    return wn, raw, info


InnerSolver = Callable[[CalibrationProblem, NDArray, NDArray, NDArray], tuple[NDArray, dict]]


def _irls(
    prob: CalibrationProblem,
    p0: NDArray,
    free: NDArray,
    cfg: CirlsConfig,
    inner: InnerSolver,
    method: str,
    fixed: tuple[str, ...],
) -> CalibrationResult:
    names = prob.template.names
    if cfg.check_observability:
        # The measured heading change equals the robot's rotation for any
        # sensor pose, so it judges rotation better than a rough initial
        # model. Only changes well above the heading noise count, and a few
        # such pairs are required so that isolated noise peaks are ignored.
        q = prob.robot_motion(p0)
        th = prob.s_hat[:, 2]
        q[:, 2] = np.where(np.abs(th) >= 3.0 * prob.sigma[:, 2], th, 0.0)
        check_observability(
            q, prob.template.drive.kind, prob.template.drive.translation_params,
            min_count=max(3, int(np.ceil(0.05 * len(prob)))),
        )
    sigma = prob.sigma
    wn = np.ones_like(sigma)
    raw = wn / sigma**2
    if cfg.equalize_xy:
        raw[:, :2] = np.max(raw[:, :2], axis=1, keepdims=True)
    scale = _param_scale(prob.template.with_vector(p0))
    p = p0.copy()
    log_rows: list[dict] = []
    converged = False
    n_outer = cfg.max_outer if cfg.robust else 1
    for k in range(1, n_outer + 1):
        p_new, info = inner(prob, p, raw, free)
        step = float(np.linalg.norm((p_new - p) / scale))
        if not np.isfinite(step):
            raise ConditioningError("weighted solve produced a non-finite estimate")
        p = p_new
        res = prob.residual(p)
        row = {
            "iteration": k,
            "objective": float(np.sum(raw * res**2)),
            "huber_objective": float(np.sum(huber_loss(res / sigma, cfg.huber_c))),
            "step": step,
            "uniform_weights": bool(np.all(wn == wn.flat[0])),
            "inner_iterations": int(info.get("iterations", 0)),
        }
        if not cfg.robust:
            log_rows.append(row | {"n_trimmed": 0, "gamma": 0.0})
            converged = True
            break
        J = prob.jacobian(p, free)[:, free]
        wn, raw, winfo = _update_weights(res, J, raw, sigma, cfg)
        row |= {"n_trimmed": int(np.count_nonzero(wn == 0)), **winfo}
        log_rows.append(row)
        log.debug("%s outer %d: step %.3e objective %.6e", method, k, step, row["objective"])
        if step <= cfg.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"{method}: no convergence after {n_outer} outer iterations", RuntimeWarning, stacklevel=3)
    res = prob.residual(p)
    J = prob.jacobian(p, free)
    cov = np.zeros((len(p), len(p)))
    try:
        cov[np.ix_(free, free)] = estimate_covariance(J[:, free], res.ravel(), raw.ravel())
    except ObservabilityError as exc:
        _, null = _null_direction((J[:, free] * raw.ravel()[:, None]).T @ J[:, free], [n for n, f in zip(names, free) if f])
        raise ObservabilityError(exc.kind, null, "information matrix is singular") from None
    active = raw.ravel() > 0
    mse = float(np.mean(raw.ravel()[active] * res.ravel()[active] ** 2)) if np.any(active) else 0.0
    model = prob.template.with_vector(p)
    canon = canonicalize_signs(model)
    if canon is not model:
        flip = np.concatenate([-np.ones(len(model.drive.names) + 2), [1.0]])
        cov = cov * np.outer(flip, flip)
    return CalibrationResult(canon, names, cov, mse, wn, log_rows, converged, method, fixed)


def _gn_inner(cfg: CirlsConfig) -> InnerSolver:
    def inner(prob: CalibrationProblem, p: NDArray, raw: NDArray, free: NDArray) -> tuple[NDArray, dict]:
        return solve_wnls(
            lambda q: prob.residual(q).ravel(),
            prob.jacobian,
            raw.ravel(),
            p,
            cfg,
            free=free,
            names=prob.template.names,
        )

    return inner


def cirls_calibrate(
    obs: Sequence[DisplacementObs],
    odometry: Odometry,
    init: SensorModel,
    cfg: CirlsConfig | None = None,
) -> CalibrationResult:
    """Robust calibration of any drive model with IRLS.

    Parameters
    ----------
    obs : sequence of DisplacementObs
        Measured sensor displacements with their standard deviations.
    odometry : Odometry
        Encoder log covering every observation interval.
    init : SensorModel
        Starting point; also the value of any fixed parameter.
    cfg : CirlsConfig, optional

    Returns
    -------
    CalibrationResult

    Raises
    ------
    ObservabilityError
        When the motions predicted under ``init`` lack rotation or
        translation.
    ConditioningError
        When the weighted normal equations are singular.
    """
    cfg = cfg or CirlsConfig()
    prob = CalibrationProblem.build(init, obs, odometry)
    free, fixed = _free_mask(init, cfg)
    return _irls(prob, init.vector(), free, cfg, _gn_inner(cfg), "cirls", fixed)


# ---------------------------------------------------------------------------
# Closed-form weighted solve for the differential drive
# ---------------------------------------------------------------------------


def _diffdrive_parts(prob: CalibrationProblem, a: float, c: float) -> tuple[NDArray, NDArray]:
    """Robot motion per pair with unit axle length: ``(t̃, q_θ)``."""
    unit = SensorModel(DiffDriveParams(a, c, 1.0))
    q = predict_robot_motion(unit.drive, prob.segs)
    return q[:, :2], q[:, 2]


def _xy_system(prob: CalibrationProblem, wxy: NDArray, a: float, c: float) -> tuple[NDArray, NDArray]:
    """Weighted quadratic form in ``x = (b, l_x, l_y, cos l_θ, sin l_θ)``.

    Rotating the translation residual by ``l_θ`` leaves its norm alone and
    makes it linear in ``x``: ``A x`` with
    ``A = [-t̃ | I - R_q | [[ŝx, -ŝy], [ŝy, ŝx]]]``.
    """
    tt, th = _diffdrive_parts(prob, a, c)
    P = len(tt)
    A = np.zeros((P, 2, 5))
    A[:, :, 0] = -tt
    A[:, :, 1:3] = np.eye(2) - rot2(th)
    sx, sy = prob.s_hat[:, 0], prob.s_hat[:, 1]
    A[:, 0, 3], A[:, 0, 4] = sx, -sy
    A[:, 1, 3], A[:, 1, 4] = sy, sx
    M = np.einsum("p,pki,pkj->ij", wxy, A, A)
    return 0.5 * (M + M.T), th


def _reduced_min(M: NDArray) -> float:
    A, B, D = M[:3, :3], M[:3, 3:], M[3:, 3:]
    try:
        S = D - B.T @ np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        return np.inf
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


def _newton_2d(f: Callable[[NDArray], float], z: NDArray, h: float = 1e-4, iters: int = 30) -> tuple[NDArray, float, int]:
    """Damped Newton on a smooth function of two variables with difference derivatives."""
    fz = f(z)
    E = np.eye(2) * h
    it = 0
    for it in range(1, iters + 1):
        fp = np.array([f(z + e) for e in E])
        fm = np.array([f(z - e) for e in E])
        g = (fp - fm) / (2 * h)
        H = np.diag((fp - 2 * fz + fm) / h**2)
        off = (f(z + E[0] + E[1]) - f(z + E[0] - E[1]) - f(z - E[0] + E[1]) + f(z - E[0] - E[1])) / (4 * h * h)
        H[0, 1] = H[1, 0] = off
        ev = np.linalg.eigvalsh(H)
        if ev[0] <= 0:
            H = H + (abs(ev[0]) + 1e-12 * max(abs(ev[-1]), 1.0)) * np.eye(2)
        step = -np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-6:
            ft = f(z + t * step)
            if ft <= fz:
                break
            t *= 0.5
        else:
            break
        z, fz = z + t * step, ft
        if np.linalg.norm(t * step) < 1e-13:
            break
    return z, fz, it


def _cf_solve(prob: CalibrationProblem, raw: NDArray) -> tuple[NDArray, dict]:
    wxy = raw[:, 0]
    if not np.allclose(raw[:, 0], raw[:, 1], rtol=1e-12, atol=0.0):
        raise ValueError("closed-form solve needs equal x and y weights")
    wt = raw[:, 2]
    # Heading is linear in (a, c) = (r_L/b, r_R/b): q_θ = -a Φ_L + c Φ_R,
    # with Φ the wheel rotation accumulated over the pair.
    wheel = np.sum(prob.segs.rates * (prob.segs.dt * prob.segs.mask)[..., None], axis=1)
    phi = np.stack([-wheel[:, 0], wheel[:, 1]], 1)
    sw = np.sqrt(wt)
    ac0, *_ = np.linalg.lstsq(phi * sw[:, None], prob.s_hat[:, 2] * sw, rcond=None)
    if np.any(ac0 == 0) or not np.all(np.isfinite(ac0)):
        raise ConditioningError("closed-form heading fit is degenerate", ("r_L", "r_R"))

    def profile(z: NDArray) -> float:
        a, c = z * ac0
        th_res = wrap_angle(prob.s_hat[:, 2] - (phi @ np.array([a, c])))
        M, _ = _xy_system(prob, wxy, a, c)
        return float(np.sum(wt * th_res**2)) + _reduced_min(M)

    z, f0, nit = _newton_2d(profile, np.ones(2))
    a, c = z * ac0
    M, _ = _xy_system(prob, wxy, a, c)
    x = solve_partially_constrained_quadratic(M, np.zeros(5))
    b, lx, ly, cs, sn = x
    if b < 0:
        b, lx, ly, cs, sn = -b, -lx, -ly, -cs, -sn
    p = np.array([a * b, c * b, b, lx, ly, np.arctan2(sn, cs)])
    return p, {"iterations": nit, "objective": f0}


def cirls_cf_calibrate(
    obs: Sequence[DisplacementObs],
    odometry: Odometry,
    init: SensorModel,
    cfg: CirlsConfig | None = None,
) -> CalibrationResult:
    """Differential-drive IRLS where each weighted solve is closed form.

    The ``x`` and ``y`` weights of every pair are equalised with the max
    rule. The heading residuals fix ``(r_L/b, r_R/b)`` by linear least
    squares. The translation residuals then form a quadratic in
    ``(b, l_x, l_y, cos l_θ, sin l_θ)`` with a unit-circle constraint,
    minimised exactly. Because the translation residuals also depend on
    ``(r_L/b, r_R/b)``, a two-parameter profile search then refines that
    pair with the rest eliminated in closed form. The result is the exact
    minimiser of the same weighted objective as the generic solver.

    ``init`` only supplies the observability check and the sign
    convention; the estimate itself needs no starting point.
    """
    if not isinstance(init.drive, DiffDriveParams):
        raise TypeError("the closed-form variant supports the differential drive only")
    cfg = cfg or CirlsConfig()
    if cfg.fixed:
        raise ValueError("the closed-form variant cannot hold parameters fixed")
    cfg = CirlsConfig(**{**cfg.__dict__, "equalize_xy": True, "fixed": ()})
    prob = CalibrationProblem.build(init, obs, odometry)
    free = np.ones(6, bool)

    def inner(prob: CalibrationProblem, p: NDArray, raw: NDArray, free: NDArray) -> tuple[NDArray, dict]:
        return _cf_solve(prob, raw)

    return _irls(prob, init.vector(), free, cfg, inner, "cirls-cf", ())
