"""Wheel kinematics, pose integration and the parametric sensor motion model.

Two drives are provided. :class:`DiffDriveParams` integrates a constant
twist along a circular arc; :class:`MecanumParams` follows the
straight-segment model ``q = (vx dt, vy dt, w dt)``. Both map a vector of
wheel angular rates linearly to a body twist, so they share one code path
through :func:`twist_from_rates`.

:class:`Odometry` holds cumulative encoder counts and turns any pair of
sample times into the piecewise-constant rate segments that separate
them. :func:`predict_displacements` then evaluates the sensor motion
``⊖ℓ ⊕ f_r(δ) ⊕ ℓ`` for many pairs at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, ClassVar, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import as_pose, oplus, ominus, wrap_angle

__all__ = [
    "DiffDriveParams",
    "MecanumParams",
    "DriveParams",
    "DRIVES",
    "SensorModel",
    "Odometry",
    "PairSegments",
    "diffdrive_twist",
    "mecanum_twist",
    "twist_from_rates",
    "integrate_twist",
    "robot_relative_pose",
    "sensor_displacement",
    "predict_robot_motion",
    "predict_displacements",
    "numerical_jacobian",
    "param_jacobian",
    "ticks_to_rates",
]

TAYLOR_THRESHOLD = 1e-8


@dataclass(frozen=True)
class DiffDriveParams:
    """Differential drive: left/right wheel radii and axle length (meters)."""

    r_L: float
    r_R: float
    b: float

    kind: ClassVar[str] = "diff_drive"
    names: ClassVar[tuple[str, ...]] = ("r_L", "r_R", "b")
    n_wheels: ClassVar[int] = 2
    motion: ClassVar[str] = "arc"
    length_params: ClassVar[tuple[bool, ...]] = (True, True, True)
    translation_params: ClassVar[tuple[str, ...]] = ("r_L", "r_R")
    default_fixed: ClassVar[tuple[str, ...]] = ()

    def twist_matrix(self) -> NDArray[np.float64]:
        """Matrix mapping ``(ω_L, ω_R)`` to ``(v_x, v_y, ω)``."""
        return np.array(
            [
                [self.r_L / 2.0, self.r_R / 2.0],
                [0.0, 0.0],
                [-self.r_L / self.b, self.r_R / self.b],
            ]
        )

    def to_vector(self) -> NDArray[np.float64]:
        return np.array([self.r_L, self.r_R, self.b], dtype=float)

    @classmethod
    def from_vector(cls, v: ArrayLike) -> "DiffDriveParams":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), float(v[2]))


@dataclass(frozen=True)
class MecanumParams:
    """Four-wheel Mecanum drive: wheel radius and half-lengths (meters).

    Wheel order is (rear-left, rear-right, front-left, front-right). The
    twist matrix is used exactly as published, without the 1/4 averaging
    factor that some references include.
    """

    r: float
    L_x: float
    L_y: float

    kind: ClassVar[str] = "mecanum"
    names: ClassVar[tuple[str, ...]] = ("r", "L_x", "L_y")
    n_wheels: ClassVar[int] = 4
    motion: ClassVar[str] = "straight"
    length_params: ClassVar[tuple[bool, ...]] = (True, True, True)
    translation_params: ClassVar[tuple[str, ...]] = ("r",)
    # Only L_x + L_y enters the model, so one of the two must be held.
    default_fixed: ClassVar[tuple[str, ...]] = ("L_x",)

    def twist_matrix(self) -> NDArray[np.float64]:
        L = self.L_x + self.L_y
        return self.r * np.array(
            [
                [1.0, 1.0, 1.0, 1.0],
                [-1.0, 1.0, 1.0, -1.0],
                [-1.0 / L, 1.0 / L, -1.0 / L, 1.0 / L],
            ]
        )

    def to_vector(self) -> NDArray[np.float64]:
        return np.array([self.r, self.L_x, self.L_y], dtype=float)

    @classmethod
    def from_vector(cls, v: ArrayLike) -> "MecanumParams":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), float(v[2]))


DriveParams = Union[DiffDriveParams, MecanumParams]
DRIVES: dict[str, type] = {"diff_drive": DiffDriveParams, "mecanum": MecanumParams}


@dataclass(frozen=True)
class SensorModel:
    """A drive together with the sensor pose ``ℓ`` in the robot frame.

    The flat parameter vector is the drive parameters followed by
    ``(l_x, l_y, l_theta)``.
    """

    drive: DriveParams
    extrinsic: tuple[float, float, float] = (0.0, 0.0, 0.0)

    EXTRINSIC_NAMES: ClassVar[tuple[str, ...]] = ("l_x", "l_y", "l_theta")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.drive.names) + self.EXTRINSIC_NAMES

    @property
    def length_mask(self) -> NDArray[np.bool_]:
        return np.array(list(self.drive.length_params) + [True, True, False])

    def vector(self) -> NDArray[np.float64]:
        return np.concatenate([self.drive.to_vector(), np.asarray(self.extrinsic, float)])

    def with_vector(self, p: ArrayLike) -> "SensorModel":
        p = np.asarray(p, dtype=float)
        n = len(self.drive.names)
        ext = (float(p[n]), float(p[n + 1]), float(wrap_angle(p[n + 2])))
        return SensorModel(type(self.drive).from_vector(p[:n]), ext)

    def as_dict(self) -> dict:
        return {
            "drive": self.drive.kind,
            "params": {k: float(v) for k, v in zip(self.drive.names, self.drive.to_vector())},
            "extrinsic": dict(zip(("x", "y", "theta"), map(float, self.extrinsic))),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        drive_cls = DRIVES[d["drive"]]
        drive = drive_cls(**{k: float(d["params"][k]) for k in drive_cls.names})
        e = d.get("extrinsic", {"x": 0.0, "y": 0.0, "theta": 0.0})
        return cls(drive, (float(e["x"]), float(e["y"]), float(e["theta"])))


def _check_rates(d: ArrayLike, m: int) -> NDArray[np.float64]:
    d = np.asarray(d, dtype=float)
    if d.shape[-1:] != (m,):
        raise ValueError(f"expected {m} wheel rates, got trailing shape {d.shape[-1:]}")
    return d


def twist_from_rates(params: DriveParams, d: ArrayLike) -> NDArray[np.float64]:
    """Body twist ``(v_x, v_y, ω)`` for wheel rates of shape ``(..., m)``."""
    d = _check_rates(d, params.n_wheels)
    return d @ params.twist_matrix().T


def diffdrive_twist(p: DiffDriveParams, d: ArrayLike) -> NDArray[np.float64]:
    """Differential-drive twist; ``v_y`` is identically zero."""
    return twist_from_rates(p, d)


def mecanum_twist(p: MecanumParams, d: ArrayLike) -> NDArray[np.float64]:
    """Mecanum twist for rates ordered (rear-left, rear-right, front-left, front-right)."""
    return twist_from_rates(p, d)


def integrate_twist(t: ArrayLike, dt: ArrayLike, mode: str = "auto") -> NDArray[np.float64]:
    """Relative pose reached by holding a twist for ``dt`` seconds.

    Parameters
    ----------
    t : array_like, shape (..., 3)
        Twists ``(v_x, v_y, ω)``.
    dt : array_like
        Durations, broadcast against ``t[..., 0]``. Must be positive.
    mode : {"auto", "arc", "straight"}
        ``"arc"`` integrates the unicycle ODE exactly (``v_y`` is ignored),
        ``"straight"`` applies ``(v_x dt, v_y dt, ω dt)``. ``"auto"`` picks
        the arc when ``v_y == 0`` and the straight segment otherwise.

    Returns
    -------
    ndarray, shape (..., 3)
    """
    t = np.asarray(t, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if np.any(dt <= 0):
        raise ValueError("integration interval must be positive")
    v, vy, w = t[..., 0], t[..., 1], t[..., 2]
    th = w * dt
    if mode == "straight":
        return np.stack([v * dt, vy * dt, wrap_angle(th)], -1)
    small = np.abs(th) < TAYLOR_THRESHOLD
    safe = np.where(small, 1.0, th)
    sinc = np.where(small, 1.0 - th**2 / 6.0, np.sin(safe) / safe)
    cosc = np.where(small, th / 2.0, 2.0 * np.sin(safe / 2.0) ** 2 / safe)
    arc = np.stack([v * dt * sinc, v * dt * cosc, wrap_angle(th)], -1)
    if mode == "arc":
        return arc
    if mode != "auto":
        raise ValueError(f"unknown integration mode {mode!r}")
    straight = np.stack([v * dt, vy * dt, wrap_angle(th)], -1)
    return np.where((vy == 0)[..., None], arc, straight)


def robot_relative_pose(params: DriveParams, d: ArrayLike, dt: ArrayLike) -> NDArray[np.float64]:
    """Robot motion ``q_jk = f_r(δ)`` under constant wheel rates ``d``."""
    return integrate_twist(twist_from_rates(params, d), dt, mode=params.motion)


def sensor_displacement(l: ArrayLike, q_jk: ArrayLike) -> NDArray[np.float64]:
    """Sensor motion ``⊖ℓ ⊕ q ⊕ ℓ`` induced by robot motion ``q``."""
    l = as_pose(l)
    return oplus(oplus(ominus(l), q_jk), l)


def ticks_to_rates(ticks: ArrayLike, dt: ArrayLike, ticks_per_rev: float) -> NDArray[np.float64]:
    """Convert tick counts over an interval to angular rates in rad/s."""
    ticks = np.asarray(ticks, dtype=float)
    dt = np.asarray(dt, dtype=float)
    return ticks * (2.0 * np.pi / ticks_per_rev) / dt[..., None]


@dataclass
class PairSegments:
    """Piecewise-constant odometry between the two ends of several pairs.

    Attributes
    ----------
    rates : ndarray, shape (P, K, m)
        Wheel rates of each segment; padded segments hold zeros.
    dt : ndarray, shape (P, K)
        Segment durations; padded segments hold 1.0.
    mask : ndarray of bool, shape (P, K)
        True for real segments.
    ticks : ndarray, shape (P, m)
        Total tick counts over each pair.
    """

    rates: NDArray[np.float64]
    dt: NDArray[np.float64]
    mask: NDArray[np.bool_]
    ticks: NDArray[np.float64]

    def __len__(self) -> int:
        return self.rates.shape[0]

    def subset(self, idx: ArrayLike) -> "PairSegments":
        idx = np.asarray(idx)
        return PairSegments(self.rates[idx], self.dt[idx], self.mask[idx], self.ticks[idx])


@dataclass
class Odometry:
    """Cumulative wheel encoder counts sampled at increasing times.

    Parameters
    ----------
    t : array_like, shape (n,)
        Sample times in seconds, strictly increasing.
    ticks : array_like of int, shape (n, m)
        Cumulative tick counts of each wheel.
    ticks_per_rev : float
        Encoder resolution.
    """

    t: NDArray[np.float64]
    ticks: NDArray[np.int64]
    ticks_per_rev: float
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float)
        self.ticks = np.asarray(self.ticks, dtype=np.int64).reshape(len(self.t), -1)
        if len(self.t) >= 2 and np.any(np.diff(self.t) <= 0):
            raise ValueError("odometry timestamps must be strictly increasing")

    @property
    def n_wheels(self) -> int:
        return self.ticks.shape[1]

    def index_of(self, t: ArrayLike, tol: float | None = None) -> NDArray[np.int64]:
        """Indices of the samples closest to the requested times.

        Raises ``ValueError`` when a time has no sample within ``tol``
        (half the smallest sampling interval by default).
        """
        tq = np.atleast_1d(np.asarray(t, dtype=float))
        if tol is None:
            tol = 0.5 * float(np.min(np.diff(self.t))) if len(self.t) > 1 else np.inf
        pos = np.clip(np.searchsorted(self.t, tq), 1, max(len(self.t) - 1, 1))
        left = np.clip(pos - 1, 0, len(self.t) - 1)
        right = np.clip(pos, 0, len(self.t) - 1)
        pick = np.where(np.abs(self.t[left] - tq) <= np.abs(self.t[right] - tq), left, right)
        bad = np.abs(self.t[pick] - tq) > tol
        if np.any(bad):
            raise ValueError(f"no odometry sample near t={tq[bad][0]!r}")
        return pick

    def segments(self, j_idx: ArrayLike, k_idx: ArrayLike) -> PairSegments:
        """Segments between sample indices ``j < k`` for each pair."""
        j = np.asarray(j_idx, dtype=np.int64).ravel()
        k = np.asarray(k_idx, dtype=np.int64).ravel()
        if np.any(k <= j):
            raise ValueError("each pair needs k > j")
        K = int(np.max(k - j)) if len(j) else 1
        m = self.n_wheels
        offs = np.arange(K)
        a = j[:, None] + offs[None, :]
        mask = a < k[:, None]
        a_c = np.where(mask, a, j[:, None])
        b_c = np.where(mask, a + 1, j[:, None] + 1)
        dticks = (self.ticks[b_c] - self.ticks[a_c]).astype(float)
        dt = np.where(mask, self.t[b_c] - self.t[a_c], 1.0)
        dticks[~mask] = 0.0
        rates = ticks_to_rates(dticks, dt, self.ticks_per_rev)
        total = (self.ticks[k] - self.ticks[j]).astype(float).reshape(-1, m)
        return PairSegments(rates, dt, mask, total)

    def pairs_for_times(self, tj: ArrayLike, tk: ArrayLike) -> PairSegments:
        return self.segments(self.index_of(tj), self.index_of(tk))


def predict_robot_motion(drive: DriveParams, segs: PairSegments) -> NDArray[np.float64]:
    """Robot motion over each pair by chaining its constant-rate segments."""
    q_seg = robot_relative_pose(drive, segs.rates, segs.dt)
    q_seg = np.where(segs.mask[..., None], q_seg, 0.0)
    q = q_seg[:, 0]
    for i in range(1, q_seg.shape[1]):
        q = oplus(q, q_seg[:, i])
    return q


def predict_displacements(model: SensorModel, segs: PairSegments) -> NDArray[np.float64]:
    """Sensor motion ``⊖ℓ ⊕ f_r(δ) ⊕ ℓ`` for every pair, shape ``(P, 3)``."""
    return sensor_displacement(model.extrinsic, predict_robot_motion(model.drive, segs))


def numerical_jacobian(
    fn: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    p: ArrayLike,
    free: ArrayLike | None = None,
    angular_out: ArrayLike | None = None,
) -> NDArray[np.float64]:
    """Central-difference Jacobian of ``fn`` at ``p``.

    The step is ``h_i = max(1e-6, 1e-6 |p_i|)`` giving ``O(h^2)`` accuracy.

    Parameters
    ----------
    fn : callable
        Maps a parameter vector to an output array of any shape.
    p : array_like
        Evaluation point.
    free : array_like of bool, optional
        Columns to differentiate; other columns are returned as zeros.
    angular_out : array_like of bool, optional
        Mask over the trailing output dimension marking angles, whose
        differences are wrapped before dividing by the step.

    Returns
    -------
    ndarray, shape ``fn(p).shape + (len(p),)``
    """
    p = np.asarray(p, dtype=float)
    f0 = np.asarray(fn(p), dtype=float)
    free = np.ones(len(p), bool) if free is None else np.asarray(free, bool)
    J = np.zeros(f0.shape + (len(p),))
    for i in np.flatnonzero(free):
        h = max(1e-6, 1e-6 * abs(p[i]))
        pp, pm = p.copy(), p.copy()
        pp[i] += h
        pm[i] -= h
        diff = np.asarray(fn(pp), float) - np.asarray(fn(pm), float)
        if angular_out is not None:
            ang = np.broadcast_to(np.asarray(angular_out, bool), diff.shape)
            diff = np.where(ang, wrap_angle(diff), diff)
        col = diff / (2.0 * h)
        if not np.all(np.isfinite(col)):
            raise FloatingPointError(f"non-finite model output while differentiating parameter {i}")
        J[..., i] = col
    return J


def param_jacobian(model: SensorModel, d: ArrayLike, dt: float) -> NDArray[np.float64]:
    """Jacobian of the sensor displacement for one interval, shape ``(3, dim p)``."""
    d = np.asarray(d, dtype=float)

    def f(p: NDArray[np.float64]) -> NDArray[np.float64]:
        mdl = model.with_vector(p)
        return sensor_displacement(mdl.extrinsic, robot_relative_pose(mdl.drive, d, dt))

    return numerical_jacobian(f, model.vector(), angular_out=[False, False, True])
