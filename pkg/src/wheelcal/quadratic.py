"""Quadratic minimisation on the unit circle.

``min_x xᵀMx + gᵀx`` subject to ``||x|| = 1`` for ``x`` in R². The
stationarity condition ``(M + λI) x = -g/2`` combined with the norm
constraint gives a quartic in ``λ``. Its roots come from the eigenvalues
of the companion matrix (``numpy.roots``). Every real root yields a
candidate, and so does each eigenvector of ``M`` (this covers the case
where ``g`` is orthogonal to an eigenvector). Each candidate is refined by
Newton steps on the angle, and the best one is returned.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConditioningError, NumericalFailure

__all__ = ["solve_constrained_quadratic", "solve_partially_constrained_quadratic", "circle_objective"]


def circle_objective(M: ArrayLike, g: ArrayLike, x: ArrayLike) -> NDArray[np.float64]:
    """``xᵀMx + gᵀx`` for one vector or a stack of shape ``(..., 2)``."""
    M = np.asarray(M, float)
    x = np.asarray(x, float)
    return np.einsum("...i,ij,...j->...", x, M, x) + x @ np.asarray(g, float)


def _polish(M: NDArray, g: NDArray, x: NDArray, iters: int = 8) -> NDArray:
    phi = np.arctan2(x[1], x[0])
    best = np.array([np.cos(phi), np.sin(phi)])
    fbest = circle_objective(M, g, best)
    for _ in range(iters):
        c, s = np.cos(phi), np.sin(phi)
        u, du = np.array([c, s]), np.array([-s, c])
        d1 = 2.0 * du @ M @ u + g @ du
        d2 = -2.0 * u @ M @ u + 2.0 * du @ M @ du - g @ u
        if d2 <= 0:
            break
        phi = phi - d1 / d2
        cand = np.array([np.cos(phi), np.sin(phi)])
        f = circle_objective(M, g, cand)
        if f <= fbest:
            best, fbest = cand, f
        else:
            break
    return best


def solve_constrained_quadratic(Mt: ArrayLike, gt: ArrayLike) -> NDArray[np.float64]:
    """Global minimiser of ``xᵀM̃x + g̃ᵀx`` on the unit circle.

    Parameters
    ----------
    Mt : array_like, shape (2, 2)
        Symmetric matrix (symmetrised internally).
    gt : array_like, shape (2,)
        Linear term.

    Returns
    -------
    ndarray, shape (2,)
        Unit vector.

    Raises
    ------
    NumericalFailure
        When ``g̃`` is non-zero but the quartic has no real root.
    """
    M = np.asarray(Mt, dtype=float)
    M = 0.5 * (M + M.T)
    g = np.asarray(gt, dtype=float).reshape(2)
    scale = max(np.abs(M).max(), np.abs(g).max(), 1e-300)
    Ms, gs = M / scale, g / scale
    evals, evecs = np.linalg.eigh(Ms)
    cands = [evecs[:, 0], -evecs[:, 0], evecs[:, 1], -evecs[:, 1]]
    if np.linalg.norm(gs) > 1e-14:
        a, b, c = Ms[0, 0], Ms[0, 1], Ms[1, 1]
        g1, g2 = gs
        det = np.array([1.0, a + c, a * c - b * b])
        u = np.array([g1, c * g1 - b * g2])
        v = np.array([g2, a * g2 - b * g1])
        quartic = np.polysub(np.polyadd(np.polymul(u, u), np.polymul(v, v)), 4.0 * np.polymul(det, det))
        roots = np.roots(quartic)
        real = roots[np.abs(roots.imag) <= 1e-7 * (1.0 + np.abs(roots))].real
        if len(real) == 0:
            raise NumericalFailure("constrained quadratic: quartic has no real root")
        for lam in real:
            try:
                x = -0.5 * np.linalg.solve(Ms + lam * np.eye(2), gs)
            except np.linalg.LinAlgError:
                continue
            n = np.linalg.norm(x)
            if np.isfinite(n) and n > 0:
                cands.append(x / n)
    else:
        # Rayleigh quotient: the smallest-eigenvalue direction is optimal.
        return evecs[:, 0] / np.linalg.norm(evecs[:, 0])
    polished = [_polish(Ms, gs, x) for x in cands]
    vals = [circle_objective(Ms, gs, x) for x in polished]
    return polished[int(np.argmin(vals))]


def solve_partially_constrained_quadratic(M: ArrayLike, g: ArrayLike) -> NDArray[np.float64]:
    """Minimise ``xᵀMx + gᵀx`` with only the last two entries on the unit circle.

    The unconstrained leading block is eliminated with a Schur complement,
    so the multiplier acts only on the trailing 2×2 block.

    Raises
    ------
    ConditioningError
        When the leading block is singular.
    """
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    g = np.asarray(g, dtype=float)
    n = len(g)
    A, B, D = M[: n - 2, : n - 2], M[: n - 2, n - 2 :], M[n - 2 :, n - 2 :]
    g1, g2 = g[: n - 2], g[n - 2 :]
    if n > 2:
        d = np.sqrt(np.clip(np.diag(A), 1e-300, None))
        An = A / np.outer(d, d)
        ev = np.linalg.eigvalsh(An)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise ConditioningError("constrained quadratic: unconstrained block is singular")
        AiB = np.linalg.solve(A, B)
        Aig = np.linalg.solve(A, g1)
        Mt = D - B.T @ AiB
        gt = g2 - B.T @ Aig
    else:
        Mt, gt = D, g2
    y = solve_constrained_quadratic(Mt, gt)
    if n == 2:
        return y
    t = -(AiB @ y + 0.5 * Aig)
    return np.concatenate([t, y])
