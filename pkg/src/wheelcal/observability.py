"""Excitation checks that decide whether a motion set can identify the parameters.

A set of robot motions with no rotation leaves the sensor translation
``(l_x, l_y)`` unidentifiable. For a differential drive it also leaves the
axle length ``b`` unidentifiable, since straight driving never exercises it.
A set with no translation leaves the wheel radii unidentifiable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from .errors import ObservabilityError, ObservabilityWarning

__all__ = ["Diagnosis", "check_observability", "THETA_MIN", "T_MIN"]

THETA_MIN = float(np.deg2rad(0.5))
T_MIN = 0.01


@dataclass
class Diagnosis:
    ok: bool = True
    warnings: list[str] = field(default_factory=list)


def _collinear(t: np.ndarray, t_min: float) -> bool:
    moving = t[np.hypot(t[:, 0], t[:, 1]) >= t_min]
    if len(moving) < 2:
        return True
    u = moving / np.hypot(moving[:, 0], moving[:, 1])[:, None]
    cross = u[0, 0] * u[:, 1] - u[0, 1] * u[:, 0]
    return bool(np.all(np.abs(cross) < 1e-3))


def check_observability(
    q: ArrayLike,
    drive_kind: str = "diff_drive",
    translation_params: tuple[str, ...] = ("r_L", "r_R"),
    theta_min: float = THETA_MIN,
    t_min: float = T_MIN,
    min_count: int = 1,
) -> Diagnosis:
    """Classify predicted robot motions ``q`` of shape ``(P, 3)``.

    A motion kind counts as excited when at least ``min_count`` pairs
    reach its threshold.

    Raises
    ------
    ObservabilityError
        ``"translation-deficient"`` when no pair translates by ``t_min``;
        ``"rotation-deficient"`` when no pair turns by ``theta_min``.

    Returns
    -------
    Diagnosis
        With a ``"b-deficient"`` warning when every translation is collinear.
    """
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if len(q) == 0:
        raise ObservabilityError("insufficient-excitation", (), "no scan pairs")
    diag = Diagnosis()
    trans = np.hypot(q[:, 0], q[:, 1])
    rot_ok = int(np.count_nonzero(np.abs(q[:, 2]) >= theta_min)) >= min_count
    trans_ok = int(np.count_nonzero(trans >= t_min)) >= min_count
    collinear = drive_kind == "diff_drive" and not rot_ok
    if collinear or (drive_kind == "diff_drive" and _collinear(q[:, :2], t_min) and trans_ok):
        msg = "b-deficient: all motion is collinear straight-line driving, axle length b is unobservable"
        warnings.warn(msg, ObservabilityWarning, stacklevel=2)
        diag.warnings.append("b-deficient")
    if not trans_ok:
        raise ObservabilityError(
            "translation-deficient", tuple(translation_params),
            f"no pair translates by {t_min} m or more; pure rotations only",
        )
    if not rot_ok:
        names = ("l_x", "l_y") + (("b",) if "b-deficient" in diag.warnings else ())
        raise ObservabilityError(
            "rotation-deficient", names,
            f"no pair rotates by {np.rad2deg(theta_min):.2f} deg or more; pure translations only",
        )
    return diag
