"""Learning the sensor motion model directly from wheel ticks.

Two learners map the tick counts ``δ`` of an interval to the sensor
displacement ``s`` without assuming a kinematic model:

* Gaussian-process regression with one independent scalar GP per output
  component (x, y, heading). The kernel is RBF, linear or their sum, and
  the mean is zero or linear in the ticks. Kernel inputs are the tick
  counts divided by their per-wheel standard deviation on the training
  set, so length-scales are unit-free.
* A robust linear model ``s ≈ W δ`` fitted row by row with Huber IRLS on
  σ-normalised data.

Both are most useful when the robot departs from its nominal kinematics,
for instance through a deformed wheel.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .cirls import huber_weight
from .errors import ConditioningError

__all__ = [
    "KERNELS",
    "MEANS",
    "GPHypers",
    "GPModel",
    "LinearModel",
    "linear_mean",
    "rbf_kernel",
    "linear_kernel",
    "kernel_matrix",
    "fit_mean",
    "gp_fit",
    "gp_predict",
    "log_marginal_likelihood",
    "optimize_hyperparameters",
    "fit_linear_model",
    "predict_linear",
    "save_model",
    "load_model",
]

KERNELS = ("rbf", "linear", "rbf+linear")
MEANS = ("zero", "linear")
FORMAT_VERSION = 1
JITTER = 1e-10
_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def linear_mean(C: ArrayLike, x: ArrayLike) -> NDArray[np.float64]:
    """Linear mean ``C x`` for one tick vector or a stack of them.

    Examples
    --------
    >>> linear_mean([[1, 0], [0, 1], [0, 0]], [2, 3]).tolist()
    [2.0, 3.0, 0.0]
    """
    C = np.asarray(C, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != C.shape[-1]:
        raise ValueError(f"tick vector has {x.shape[-1]} entries, mean expects {C.shape[-1]}")
    return x @ C.T


def _pairwise(x: ArrayLike, x2: ArrayLike) -> tuple[NDArray, NDArray, bool]:
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    scalar = x.ndim == 1 and x2.ndim == 1
    x, x2 = np.atleast_2d(x), np.atleast_2d(x2)
    if x.shape[1] != x2.shape[1]:
        raise ValueError("kernel inputs differ in dimension")
    return x, x2, scalar


def rbf_kernel(x: ArrayLike, x2: ArrayLike, sigma2: float = 1.0, lengthscales: ArrayLike = 1.0):
    """``σ² exp(-½ (x - x')ᵀ B⁻¹ (x - x'))`` with ``B = diag(lengthscales²)``.

    Returns a scalar for two vectors, otherwise the ``(n, p)`` matrix.

    Examples
    --------
    >>> round(float(rbf_kernel([1.0, 0.0], [0.0, 0.0], sigma2=2.0)), 4)
    1.2131
    """
    x, x2, scalar = _pairwise(x, x2)
    ell = np.broadcast_to(np.asarray(lengthscales, dtype=float), (x.shape[1],))
    a, b = x / ell, x2 / ell
    d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    K = sigma2 * np.exp(-0.5 * np.maximum(d2, 0.0))
    return float(K[0, 0]) if scalar else K


def linear_kernel(x: ArrayLike, x2: ArrayLike, scale: float = 1.0):
    """Inner-product kernel ``scale · ⟨x, x'⟩``.

    Examples
    --------
    >>> float(linear_kernel([1.0, 2.0], [3.0, 4.0]))
    11.0
    """
    x, x2, scalar = _pairwise(x, x2)
    K = scale * (x @ x2.T)
    return float(K[0, 0]) if scalar else K


@dataclass
class GPHypers:
    """Kernel hyperparameters, one row per output component.

    Attributes
    ----------
    sigma2 : ndarray, shape (3,)
        RBF signal variance.
    lengthscales : ndarray, shape (3, m)
        RBF length-scales in normalised tick units.
    lin_scale : ndarray, shape (3,)
        Multiplier of the inner-product kernel.
    """

    sigma2: NDArray[np.float64]
    lengthscales: NDArray[np.float64]
    lin_scale: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.sigma2 = np.asarray(self.sigma2, dtype=float).reshape(-1)
        self.lin_scale = np.asarray(self.lin_scale, dtype=float).reshape(-1)
        self.lengthscales = np.asarray(self.lengthscales, dtype=float).reshape(len(self.sigma2), -1)
        if np.any(self.sigma2 < 0) or np.any(self.lin_scale < 0) or np.any(self.lengthscales <= 0):
            raise ValueError("hyperparameters must be non-negative and length-scales positive")

    @classmethod
    def default(cls, m: int, d: int = 3) -> "GPHypers":
        return cls(np.ones(d), np.ones((d, m)), np.ones(d))

    def row(self, i: int) -> "GPHypers":
        return GPHypers(self.sigma2[i : i + 1], self.lengthscales[i : i + 1], self.lin_scale[i : i + 1])

    def to_dict(self) -> dict:
        return {"sigma2": self.sigma2.tolist(), "lengthscales": self.lengthscales.tolist(),
                "lin_scale": self.lin_scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GPHypers":
        return cls(d["sigma2"], d["lengthscales"], d["lin_scale"])


def kernel_matrix(kernel: str, x: ArrayLike, x2: ArrayLike, hypers: GPHypers, i: int) -> NDArray[np.float64]:
    """Covariance between two sets of normalised inputs for output ``i``."""
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    x, x2 = np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(x2, float))
    K = np.zeros((len(x), len(x2)))
    if "rbf" in kernel:
        K += rbf_kernel(x, x2, hypers.sigma2[i], hypers.lengthscales[i])
    if "linear" in kernel:
        K += linear_kernel(x, x2, hypers.lin_scale[i])
    return K


def _kernel_diag(kernel: str, x: NDArray, hypers: GPHypers, i: int) -> NDArray[np.float64]:
    d = np.zeros(len(x))
    if "rbf" in kernel:
        d += hypers.sigma2[i]
    if "linear" in kernel:
        d += hypers.lin_scale[i] * np.sum(x * x, axis=1)
    return d


def _check_data(delta: ArrayLike, s_hat: ArrayLike, sigma: ArrayLike | None):
    X = np.atleast_2d(np.asarray(delta, dtype=float))
    Y = np.asarray(s_hat, dtype=float).reshape(len(X), -1)
    S = np.ones_like(Y) if sigma is None else np.broadcast_to(np.asarray(sigma, dtype=float), Y.shape).copy()
    if len(X) == 0:
        raise ValueError("need at least one training sample")
    if np.any(S < 0) or not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data must be finite with non-negative sigma")
    return X, Y, S


def fit_mean(delta: ArrayLike, s_hat: ArrayLike, sigma: ArrayLike | None = None) -> NDArray[np.float64]:
    """Weighted least-squares ``C`` for the linear mean, one row per output."""
    X, Y, S = _check_data(delta, s_hat, sigma)
    C = np.zeros((Y.shape[1], X.shape[1]))
    for i in range(Y.shape[1]):
        w = 1.0 / np.maximum(S[:, i], 1e-12)
        C[i] = np.linalg.lstsq(X * w[:, None], Y[:, i] * w, rcond=None)[0]
    return C


def _factor(K: NDArray, noise: NDArray) -> tuple[tuple, NDArray]:
    """Cholesky of ``K + diag(noise)`` with relative jitter, escalated on failure."""
    A = K + np.diag(noise)
    scale = max(float(np.mean(np.diag(A))), 1e-300)
    jitter = JITTER * scale
    for _ in range(6):
        try:
            A_j = A + jitter * np.eye(len(A))
            return cho_factor(A_j, lower=True, check_finite=False), A_j
        except np.linalg.LinAlgError:
            jitter *= 100.0
    raise ConditioningError("kernel matrix is not positive definite even after jitter")


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------


@dataclass
class GPModel:
    """Fitted per-component Gaussian processes.

    Predictions use the stored ``alpha = (K + Σ)⁻¹ (s - μ)`` and Cholesky
    factors, so a reloaded model predicts exactly as the original.
    """

    kernel: str
    mean: str
    C: NDArray[np.float64]
    hypers: GPHypers
    X: NDArray[np.float64]
    x_scale: NDArray[np.float64]
    Y: NDArray[np.float64]
    noise: NDArray[np.float64]
    alpha: NDArray[np.float64]
    chol: NDArray[np.float64]
    info: dict = field(default_factory=dict)

    @property
    def n_inputs(self) -> int:
        return self.X.shape[1]

    def predict(self, delta: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return gp_predict(self, delta)

    def to_dict(self) -> dict:
        return {
            "format": "wheelcal-gp",
            "version": FORMAT_VERSION,
            "kernel": self.kernel,
            "mean": self.mean,
            "C": self.C.tolist(),
            "hypers": self.hypers.to_dict(),
            "X": self.X.tolist(),
            "x_scale": self.x_scale.tolist(),
            "Y": self.Y.tolist(),
            "noise": self.noise.tolist(),
            "alpha": self.alpha.tolist(),
            "chol": self.chol.tolist(),
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GPModel":
        if d.get("format") != "wheelcal-gp":
            raise ValueError("not a serialised Gaussian-process model")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        return cls(
            d["kernel"], d["mean"], np.asarray(d["C"], float), GPHypers.from_dict(d["hypers"]),
            np.asarray(d["X"], float), np.asarray(d["x_scale"], float), np.asarray(d["Y"], float),
            np.asarray(d["noise"], float), np.asarray(d["alpha"], float), np.asarray(d["chol"], float),
            dict(d.get("info", {})),
        )


def _x_scale(X: NDArray) -> NDArray:
    s = X.std(axis=0)
    return np.where(s > 0, s, 1.0)


def _spec_check(kernel: str, mean: str) -> None:
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    if mean not in MEANS:
        raise ValueError(f"unknown mean {mean!r}; expected one of {MEANS}")


def gp_fit(
    delta: ArrayLike,
    s_hat: ArrayLike,
    sigma: ArrayLike | None = None,
    kernel: str = "linear",
    mean: str = "linear",
    hypers: GPHypers | None = None,
    C: ArrayLike | None = None,
    x_scale: ArrayLike | None = None,
) -> GPModel:
    """Condition the per-component GPs on training data.

    Parameters
    ----------
    delta : array_like, shape (n, m)
        Tick counts of each training interval.
    s_hat : array_like, shape (n, 3)
        Measured sensor displacements.
    sigma : array_like, shape (n, 3) or (3,), optional
        Measurement standard deviations; zero means noiseless (only the
        jitter regularises).
    kernel : {"rbf", "linear", "rbf+linear"}
    mean : {"zero", "linear"}
    hypers : GPHypers, optional
        Defaults to unit hyperparameters.
    C : array_like, shape (3, m), optional
        Linear-mean matrix; fitted by weighted least squares when omitted.
    x_scale : array_like, shape (m,), optional
        Per-wheel input normalisation; the training standard deviation by
        default. Fixing it lets two fits share one input metric.

    Returns
    -------
    GPModel
    """
    _spec_check(kernel, mean)
    X, Y, S = _check_data(delta, s_hat, sigma)
    d, m = Y.shape[1], X.shape[1]
    hypers = hypers or GPHypers.default(m, d)
    if mean == "zero":
        C = np.zeros((d, m))
    elif C is None:
        C = fit_mean(X, Y, np.where(S > 0, S, 1.0))
    C = np.asarray(C, dtype=float).reshape(d, m)
    xs = _x_scale(X) if x_scale is None else np.broadcast_to(np.asarray(x_scale, float), (m,)).copy()
    Xn = X / xs
    R = Y - linear_mean(C, X)
    alpha = np.zeros_like(Y)
    chol = np.zeros((d, len(X), len(X)))
    for i in range(d):
        K = kernel_matrix(kernel, Xn, Xn, hypers, i)
        (L, _), _ = _factor(K, S[:, i] ** 2)
        L = np.tril(L)
        chol[i] = L
        alpha[:, i] = cho_solve((L, True), R[:, i], check_finite=False)
    return GPModel(kernel, mean, C, hypers, X, xs, Y, S**2, alpha, chol)


def gp_predict(model: GPModel, delta: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Posterior mean and variance of each component at new tick vectors.

    Returns
    -------
    mu, var : ndarray, shape (p, 3)
        Variances are clamped at zero; a warning is issued when round-off
        pushes one below ``-1e-10``.
    """
    Xs = np.atleast_2d(np.asarray(delta, dtype=float))
    if Xs.shape[1] != model.n_inputs:
        raise ValueError(f"tick vector has {Xs.shape[1]} entries, model expects {model.n_inputs}")
    Xn, Xsn = model.X / model.x_scale, Xs / model.x_scale
    mu = linear_mean(model.C, Xs)
    var = np.zeros_like(mu)
    for i in range(mu.shape[1]):
        Ks = kernel_matrix(model.kernel, Xsn, Xn, model.hypers, i)
        mu[:, i] += Ks @ model.alpha[:, i]
        v = solve_triangular(model.chol[i], Ks.T, lower=True, check_finite=False)
        var[:, i] = _kernel_diag(model.kernel, Xsn, model.hypers, i) - np.sum(v * v, axis=0)
    if np.any(var < -1e-10):
        warnings.warn("negative posterior variance from round-off clamped to zero", RuntimeWarning, stacklevel=2)
    return mu, np.maximum(var, 0.0)


def _lml_component(kernel: str, Xn: NDArray, r: NDArray, noise: NDArray, hypers: GPHypers, i: int) -> float:
    K = kernel_matrix(kernel, Xn, Xn, hypers, i)
    (L, _), _ = _factor(K, noise)
    a = cho_solve((L, True), r, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * float(r @ a) - 0.5 * logdet - 0.5 * len(r) * _LOG_2PI


def log_marginal_likelihood(
    delta: ArrayLike,
    s_hat: ArrayLike,
    sigma: ArrayLike | None = None,
    kernel: str = "linear",
    mean: str = "linear",
    hypers: GPHypers | None = None,
    C: ArrayLike | None = None,
) -> float:
    """Sum over components of the Gaussian log marginal likelihood."""
    _spec_check(kernel, mean)
    X, Y, S = _check_data(delta, s_hat, sigma)
    d, m = Y.shape[1], X.shape[1]
    hypers = hypers or GPHypers.default(m, d)
    if mean == "zero":
        C = np.zeros((d, m))
    elif C is None:
        C = fit_mean(X, Y, np.where(S > 0, S, 1.0))
    R = Y - linear_mean(np.asarray(C, float).reshape(d, m), X)
    Xn = X / _x_scale(X)
    return float(sum(_lml_component(kernel, Xn, R[:, i], S[:, i] ** 2, hypers, i) for i in range(d)))


def _pack(kernel: str, h: GPHypers) -> NDArray:
    parts = []
    if "rbf" in kernel:
        parts += [np.log(h.sigma2), np.log(h.lengthscales[0])]
    if "linear" in kernel:
        parts += [np.log(h.lin_scale)]
    return np.concatenate(parts)


def _unpack(kernel: str, z: NDArray, m: int) -> GPHypers:
    z = np.clip(z, -50.0, 50.0)
    sigma2, ell, lin = np.ones(1), np.ones((1, m)), np.zeros(1)
    k = 0
    if "rbf" in kernel:
        sigma2 = np.exp(z[:1])
        ell = np.exp(z[1 : 1 + m])[None]
        k = 1 + m
    if "linear" in kernel:
        lin = np.exp(z[k : k + 1])
    if kernel == "linear":
        sigma2 = np.zeros(1)
    return GPHypers(sigma2, ell, lin)


def optimize_hyperparameters(
    delta: ArrayLike,
    s_hat: ArrayLike,
    sigma: ArrayLike | None = None,
    kernel: str = "linear",
    mean: str = "linear",
    restarts: int = 3,
    seed: int = 0,
    maxiter: int = 400,
) -> tuple[NDArray[np.float64], GPHypers, dict]:
    """Maximise the log marginal likelihood over the kernel hyperparameters.

    The linear-mean matrix is fitted first by weighted least squares and
    then held fixed. Each output component is optimised on its own (the
    likelihood is a sum of independent terms) with Nelder-Mead in
    log-space. The first start uses data-driven values; the remaining
    starts are seeded perturbations of it.

    Returns
    -------
    C : ndarray, shape (3, m)
    hypers : GPHypers
    info : dict
        Per-component log likelihood at the best start point and at the
        optimum.

    Raises
    ------
    ConditioningError
        When every start fails to factorise.
    """
    _spec_check(kernel, mean)
    X, Y, S = _check_data(delta, s_hat, sigma)
    d, m = Y.shape[1], X.shape[1]
    C = np.zeros((d, m)) if mean == "zero" else fit_mean(X, Y, np.where(S > 0, S, 1.0))
    R = Y - linear_mean(C, X)
    Xn = X / _x_scale(X)
    rng = np.random.default_rng(seed)
    rows, info = [], {"lml_init": [], "lml": [], "restarts": restarts}
    for i in range(d):
        r, noise = R[:, i], S[:, i] ** 2
        v = max(float(np.var(r)), float(np.mean(noise)), 1e-300)
        base = GPHypers(np.array([v]), np.ones((1, m)), np.array([v / max(float(np.mean(np.sum(Xn**2, 1))), 1e-300)]))
        z0 = _pack(kernel, base)

        def nll(z: NDArray) -> float:
            try:
                return -_lml_component(kernel, Xn, r, noise, _unpack(kernel, z, m), 0)
            except ConditioningError:
                return np.inf

        best_z, best_f, best_init = None, np.inf, np.inf
        for k in range(restarts):
            start = z0 if k == 0 else z0 + rng.normal(scale=1.0, size=z0.shape)
            f0 = nll(start)
            if not np.isfinite(f0):
                continue
            res = minimize(nll, start, method="Nelder-Mead",
                           options={"maxiter": maxiter * len(start), "xatol": 1e-6, "fatol": 1e-9})
            z, f = (res.x, float(res.fun)) if res.fun <= f0 else (start, f0)
            best_init = min(best_init, f0)
            if f < best_f:
                best_z, best_f = z, f
        if best_z is None:
            raise ConditioningError(f"hyperparameter search failed for output {i}: no start point factorises")
        rows.append(_unpack(kernel, best_z, m))
        info["lml_init"].append(-best_init)
        info["lml"].append(-best_f)
    hypers = GPHypers(np.concatenate([h.sigma2 for h in rows]), np.vstack([h.lengthscales for h in rows]),
                      np.concatenate([h.lin_scale for h in rows]))
    return C, hypers, info


# ---------------------------------------------------------------------------
# Robust linear model
# ---------------------------------------------------------------------------


@dataclass
class LinearModel:
    """``s = W δ`` with ``W`` of shape ``(3, m)``."""

    W: NDArray[np.float64]
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        if not np.all(np.isfinite(self.W)):
            raise ValueError("linear model weights must be finite")

    def predict(self, delta: ArrayLike) -> NDArray[np.float64]:
        return predict_linear(self.W, delta)

    def to_dict(self) -> dict:
        return {"format": "wheelcal-linear", "version": FORMAT_VERSION, "W": self.W.tolist(), "info": self.info}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        if d.get("format") != "wheelcal-linear":
            raise ValueError("not a serialised linear model")
        return cls(np.asarray(d["W"], float), dict(d.get("info", {})))


def predict_linear(W: ArrayLike, delta: ArrayLike) -> NDArray[np.float64]:
    """``W δ`` for one tick vector or a stack of them."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    delta = np.asarray(delta, dtype=float)
    if delta.shape[-1] != W.shape[1]:
        raise ValueError(f"tick vector has {delta.shape[-1]} entries, model expects {W.shape[1]}")
    return delta @ W.T


def fit_linear_model(
    delta: ArrayLike,
    s_hat: ArrayLike,
    sigma: ArrayLike | None = None,
    huber_c: float = 1.345,
    robust: bool = True,
    max_iter: int = 200,
    tol: float = 1e-12,
) -> LinearModel:
    """Huber regression of each displacement component on the tick counts.

    Each row ``i`` solves ``min_w Σ ρ_c((ŝ_i - wᵀδ)/σ_i)`` by iteratively
    reweighted least squares, starting from the weighted least-squares fit.
    The problem is convex, so the result does not depend on the start.

    Raises
    ------
    ConditioningError
        When the tick design is rank deficient; the message names the
        wheel combination that never varies.
    """
    X, Y, S = _check_data(delta, s_hat, sigma)
    n, m = X.shape
    S = np.where(S > 0, S, 1.0)
    sv = np.linalg.svd(X / np.maximum(np.abs(X).max(axis=0), 1e-300), compute_uv=False)
    if n < m or sv[-1] <= 1e-10 * sv[0]:
        _, _, Vt = np.linalg.svd(X)
        null = Vt[-1]
        combo = " + ".join(f"{c:.2g}·wheel{j}" for j, c in enumerate(null) if abs(c) > 1e-3)
        raise ConditioningError(f"tick design is rank deficient; unexcited combination {combo}",
                                tuple(f"wheel{j}" for j, c in enumerate(null) if abs(c) > 1e-3))
    W = np.zeros((Y.shape[1], m))
    iters = []
    for i in range(Y.shape[1]):
        A, b = X / S[:, i : i + 1], Y[:, i] / S[:, i]
        w = np.linalg.lstsq(A, b, rcond=None)[0]
        it = 0
        if robust:
            for it in range(1, max_iter + 1):
                u = b - A @ w
                wt = huber_weight(u, 1.0, huber_c)
                sw = np.sqrt(wt)
                w_new = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)[0]
                step = np.linalg.norm(w_new - w) / max(np.linalg.norm(w), 1e-300)
                w = w_new
                if step <= tol:
                    break
        W[i] = w
        iters.append(it)
    return LinearModel(W, {"iterations": iters, "huber_c": huber_c, "robust": robust})


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def save_model(model: GPModel | LinearModel, path: str | Path) -> None:
    """Write a model as JSON (floats in shortest round-trip form)."""
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(model.to_dict(), sort_keys=True) + "\n")


def load_model(path: str | Path) -> GPModel | LinearModel:
    """Read a model written by :func:`save_model`."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") == "wheelcal-gp":
        return GPModel.from_dict(d)
    return LinearModel.from_dict(d)

