"""Planar rigid-body pose algebra.

Poses are stored as ``(x, y, theta)`` triples. Every function accepts a
single pose of shape ``(3,)`` or a stack of shape ``(..., 3)`` and
broadcasts over the leading axes, which lets the calibrators evaluate
hundreds of scan pairs with one call.

Headings are always returned wrapped to the half-open interval (-pi, pi].
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "Pose2D",
    "wrap_angle",
    "rot2",
    "as_pose",
    "oplus",
    "ominus",
    "relative_pose",
    "transform_points",
    "compose_chain",
]


class Pose2D(NamedTuple):
    """Convenience record for a single pose.

    Being a tuple, it can be passed anywhere an array of shape ``(3,)``
    is expected.
    """

    x: float
    y: float
    theta: float

    @classmethod
    def from_array(cls, a: ArrayLike) -> "Pose2D":
        v = as_pose(a)
        return cls(float(v[0]), float(v[1]), float(wrap_angle(v[2])))


def wrap_angle(theta: ArrayLike) -> NDArray[np.float64]:
    """Wrap angles to (-pi, pi].

    Parameters
    ----------
    theta : array_like
        Angles in radians.

    Returns
    -------
    ndarray
        Wrapped angles with the same shape. ``-pi`` maps to ``pi``.
    """
    t = np.asarray(theta, dtype=float)
    w = np.mod(t + np.pi, 2.0 * np.pi) - np.pi
    # np.mod lands exact odd multiples of pi on -pi; flip them to +pi.
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def rot2(theta: ArrayLike) -> NDArray[np.float64]:
    """Rotation matrices for the given angles, shape ``(..., 2, 2)``."""
    t = np.asarray(theta, dtype=float)
    c, s = np.cos(t), np.sin(t)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def as_pose(a: ArrayLike) -> NDArray[np.float64]:
    """Convert to a float array with trailing dimension 3, checking finiteness."""
    v = np.asarray(a, dtype=float)
    if v.shape[-1:] != (3,):
        raise ValueError(f"pose arrays need a trailing dimension of 3, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("pose contains non-finite values")
    return v


def oplus(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    """Compose poses, ``a ⊕ b``.

    Parameters
    ----------
    a, b : array_like, shape (..., 3)
        Poses; ``b`` is expressed in the frame of ``a``.

    Returns
    -------
    ndarray, shape (..., 3)
        ``(ax + bx cos aθ - by sin aθ, ay + bx sin aθ + by cos aθ, aθ + bθ)``.
    """
    a = as_pose(a)
    b = as_pose(b)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    y = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    return np.stack([x, y, wrap_angle(a[..., 2] + b[..., 2])], -1)


def ominus(a: ArrayLike) -> NDArray[np.float64]:
    """Inverse pose, ``⊖a``, such that ``⊖a ⊕ a`` is the identity."""
    a = as_pose(a)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = -a[..., 0] * c - a[..., 1] * s
    y = a[..., 0] * s - a[..., 1] * c
    return np.stack([x, y, wrap_angle(-a[..., 2])], -1)


def relative_pose(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    """Pose of ``b`` seen from ``a``: ``⊖a ⊕ b``."""
    return oplus(ominus(a), b)


def transform_points(pose: ArrayLike, pts: ArrayLike) -> NDArray[np.float64]:
    """Map points from the frame ``pose`` into its parent frame.

    Parameters
    ----------
    pose : array_like, shape (3,) or (..., 3)
        Frame pose. Leading axes broadcast against those of ``pts[..., 0, :]``.
    pts : array_like, shape (..., N, 2)
        Points expressed in the frame.

    Returns
    -------
    ndarray, shape (..., N, 2)
    """
    p = as_pose(pose)
    z = np.asarray(pts, dtype=float)
    R = rot2(p[..., 2])
    return np.einsum("...ij,...nj->...ni", R, z) + p[..., None, :2]


def compose_chain(steps: ArrayLike, start: ArrayLike | None = None) -> NDArray[np.float64]:
    """Accumulate relative steps into absolute poses.

    Returns an array of ``len(steps) + 1`` poses beginning with ``start``
    (identity by default).
    """
    steps = as_pose(steps).reshape(-1, 3)
    out = np.empty((len(steps) + 1, 3))
    out[0] = np.zeros(3) if start is None else as_pose(start)
    for i, st in enumerate(steps):
        out[i + 1] = oplus(out[i], st)
    return out
