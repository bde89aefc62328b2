"""Trajectory error metrics.

Two figures of merit compare an estimated sensor trajectory with a
reference:

* the relative pose error (RPE), the RMS translation of the per-step
  discrepancy ``⊖(⊖x̂_k ⊕ x̂_{k+1}) ⊕ (⊖x_k ⊕ x_{k+1})``, which measures local
  drift and is blind to a global rigid transform;
* the absolute trajectory error (ATE), the RMS translation of
  ``⊖x̂_k ⊕ x_k``, which measures global consistency.

No alignment is applied before ATE; estimated and reference trajectories
are expected to share the same start pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import as_pose, compose_chain, relative_pose
from .kinematics import Odometry, SensorModel, predict_displacements
from .modelfree import GPModel, LinearModel

__all__ = [
    "Trajectory",
    "associate",
    "rpe_series",
    "ate_series",
    "rpe",
    "ate",
    "evaluate",
    "predict_trajectory",
]

MotionModel = Union[SensorModel, GPModel, LinearModel]


@dataclass
class Trajectory:
    """Timestamped sensor poses ``(x, y, θ)``.

    Parameters
    ----------
    t : array_like, shape (n,)
        Strictly increasing timestamps.
    poses : array_like, shape (n, 3)
    """

    t: NDArray[np.float64]
    poses: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float).ravel()
        self.poses = as_pose(np.asarray(self.poses, dtype=float).reshape(-1, 3))
        if len(self.t) != len(self.poses):
            raise ValueError(f"{len(self.t)} timestamps for {len(self.poses)} poses")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)


def associate(est: Trajectory, ref: Trajectory, tol: float | None = None) -> tuple[Trajectory, Trajectory]:
    """Pair every estimated pose with the nearest reference pose in time.

    Parameters
    ----------
    tol : float, optional
        Largest accepted time offset. Defaults to half the median
        reference sampling interval.

    Raises
    ------
    ValueError
        If a pose has no reference within ``tol``, or if two estimated
        poses claim the same reference pose.
    """
    if len(est) == 0 or len(ref) == 0:
        raise ValueError("cannot associate an empty trajectory")
    if tol is None:
        tol = 0.5 * float(np.median(np.diff(ref.t))) if len(ref) > 1 else 0.0
    pos = np.clip(np.searchsorted(ref.t, est.t), 1, max(len(ref) - 1, 1))
    left = np.clip(pos - 1, 0, len(ref) - 1)
    right = np.clip(pos, 0, len(ref) - 1)
    pick = np.where(np.abs(ref.t[left] - est.t) <= np.abs(ref.t[right] - est.t), left, right)
    off = np.abs(ref.t[pick] - est.t)
    if np.any(off > tol + 1e-12):
        k = int(np.argmax(off > tol + 1e-12))
        raise ValueError(f"no reference pose within {tol:g} s of t={float(est.t[k])!r}")
    if len(np.unique(pick)) != len(pick):
        raise ValueError("several estimated poses map to the same reference pose")
    return est, Trajectory(ref.t[pick], ref.poses[pick])


def _matched(est: Trajectory, ref: Trajectory, tol: float | None) -> tuple[NDArray, NDArray]:
    if len(est) == len(ref) and np.allclose(est.t, ref.t, rtol=0, atol=1e-12):
        return est.poses, ref.poses
    est, ref = associate(est, ref, tol)
    return est.poses, ref.poses


def rpe_series(est: Trajectory, ref: Trajectory, tol: float | None = None) -> NDArray[np.float64]:
    """Translation norm of the relative pose error at each of the ``n - 1`` steps."""
    xe, xr = _matched(est, ref, tol)
    if len(xe) < 2:
        raise ValueError("relative pose error needs at least two poses")
    e = relative_pose(relative_pose(xe[:-1], xe[1:]), relative_pose(xr[:-1], xr[1:]))
    return np.hypot(e[:, 0], e[:, 1])


def ate_series(est: Trajectory, ref: Trajectory, tol: float | None = None) -> NDArray[np.float64]:
    """Translation norm of the absolute error ``⊖x̂_k ⊕ x_k`` at every pose."""
    xe, xr = _matched(est, ref, tol)
    e = relative_pose(xe, xr)
    return np.hypot(e[:, 0], e[:, 1])


def rpe(est: Trajectory, ref: Trajectory, tol: float | None = None) -> float:
    """Relative pose error in metres (RMS over steps).

    Examples
    --------
    >>> ref = Trajectory([0, 1, 2], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    >>> est = Trajectory([0, 1, 2], [[0, 0, 0], [1.01, 0, 0], [2.01, 0, 0]])
    >>> round(rpe(est, ref), 6)
    0.007071
    """
    return float(np.sqrt(np.mean(rpe_series(est, ref, tol) ** 2)))


def ate(est: Trajectory, ref: Trajectory, tol: float | None = None) -> float:
    """Absolute trajectory error in metres (RMS over poses, no alignment)."""
    return float(np.sqrt(np.mean(ate_series(est, ref, tol) ** 2)))


def evaluate(est: Trajectory, ref: Trajectory, tol: float | None = None) -> dict:
    """Metrics report with both summaries and the per-step series."""
    r = rpe_series(est, ref, tol)
    a = ate_series(est, ref, tol)
    return {
        "ate_m": float(np.sqrt(np.mean(a**2))),
        "rpe_m": float(np.sqrt(np.mean(r**2))),
        "n_poses": len(a),
        "ate_steps": a.tolist(),
        "rpe_steps": r.tolist(),
    }


def _interval_motion(model: MotionModel, odometry: Odometry, j: NDArray, k: NDArray) -> NDArray[np.float64]:
    if isinstance(model, SensorModel):
        if odometry.n_wheels != model.drive.n_wheels:
            raise ValueError(f"model expects {model.drive.n_wheels} wheels, odometry has {odometry.n_wheels}")
        return predict_displacements(model, odometry.segments(j, k))
    delta = (odometry.ticks[k] - odometry.ticks[j]).astype(float)
    if isinstance(model, GPModel):
        return model.predict(delta)[0]
    if isinstance(model, LinearModel):
        return model.predict(delta)
    raise TypeError(f"unsupported motion model {type(model).__name__}")


def predict_trajectory(
    model: MotionModel,
    odometry: Odometry,
    times: ArrayLike | None = None,
    start: ArrayLike = (0.0, 0.0, 0.0),
    max_gap: float | None = None,
) -> Trajectory:
    """Dead-reckon the sensor trajectory implied by a motion model.

    Parameters
    ----------
    model : SensorModel, GPModel or LinearModel
        Parametric model (integrated over every odometry segment) or a
        learned map from interval tick counts to sensor displacement.
    odometry : Odometry
    times : array_like, optional
        Timestamps of the output poses; all odometry samples by default.
    start : array_like, shape (3,)
        Pose at ``times[0]``, normally the reference start pose.
    max_gap : float, optional
        Longest tolerated spacing between consecutive odometry samples
        inside a predicted interval. Defaults to 1.5 times the median
        sampling interval.

    Raises
    ------
    ValueError
        When a requested time has no odometry sample or an interval spans
        a gap in the odometry; the message names the interval.
    """
    t_req = odometry.t if times is None else np.asarray(times, dtype=float).ravel()
    if len(t_req) == 0:
        raise ValueError("no timestamps requested")
    idx = []
    for a, tq in enumerate(t_req):
        try:
            idx.append(int(odometry.index_of(tq)[0]))
        except ValueError:
            lo = t_req[a - 1] if a > 0 else tq
            raise ValueError(f"odometry does not cover the interval [{float(lo)!r}, {float(tq)!r}]") from None
    idx = np.asarray(idx)
    if np.any(np.diff(idx) <= 0):
        raise ValueError("requested times must map to increasing odometry samples")
    dt = np.diff(odometry.t)
    if max_gap is None and len(dt):
        max_gap = 1.5 * float(np.median(dt))
    for j, k in zip(idx[:-1], idx[1:]):
        if max_gap is not None and np.any(dt[j:k] > max_gap):
            g = j + int(np.argmax(dt[j:k] > max_gap))
            raise ValueError(f"odometry gap between t={float(odometry.t[g])!r} and t={float(odometry.t[g + 1])!r}")
    s = _interval_motion(model, odometry, idx[:-1], idx[1:]) if len(idx) > 1 else np.zeros((0, 3))
    return Trajectory(t_req, compose_chain(s, start))
