"""Gaussian-process regression: isotropic kernels, exact and
subset-of-regressors inference, marginal-likelihood hyperparameter fits.

Inputs are assumed already standardised by the caller. The prior mean is
zero, so targets should be centred too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, lapack, solve_triangular
from scipy.optimize import minimize

KERNELS = ("exponential", "matern32", "matern52", "rational_quadratic", "squared_exponential")
_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)
# jitter ladder, in units of signal variance
_JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


class GpNumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Kernel:
    kind: str = "squared_exponential"
    signal: float = 1.0
    length: float = 1.0
    alpha: float = 1.0  # rational-quadratic shape; ignored by the other kinds

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNELS}")
        if not (self.signal > 0 and self.length > 0 and self.alpha > 0):
            raise ValueError(f"kernel parameters must be positive: {self}")

    def of_scaled(self, s):
        """Kernel value as a function of ``s = r / length``."""
        var = self.signal**2
        if self.kind == "squared_exponential":
            return var * np.exp(-0.5 * s * s)
        if self.kind == "exponential":
            return var * np.exp(-s)
        if self.kind == "matern32":
            a = _SQRT3 * s
            return var * (1.0 + a) * np.exp(-a)
        if self.kind == "matern52":
            a = _SQRT5 * s
            return var * (1.0 + a + a * a / 3.0) * np.exp(-a)
        return var * (1.0 + s * s / (2.0 * self.alpha)) ** (-self.alpha)

    def dlog_length(self, s):
        """Derivative of the kernel value with respect to ``log(length)``."""
        var = self.signal**2
        if self.kind == "squared_exponential":
            return var * s * s * np.exp(-0.5 * s * s)
        if self.kind == "exponential":
            return var * s * np.exp(-s)
        if self.kind == "matern32":
            return 3.0 * var * s * s * np.exp(-_SQRT3 * s)
        if self.kind == "matern52":
            return (5.0 / 3.0) * var * s * s * (1.0 + _SQRT5 * s) * np.exp(-_SQRT5 * s)
        return var * s * s * (1.0 + s * s / (2.0 * self.alpha)) ** (-self.alpha - 1.0)

    def gram(self, A, B=None):
        return self.of_scaled(distances(A, B) / self.length)


def distances(A, B=None) -> np.ndarray:
    """Euclidean distance matrix; exact zeros on the diagonal when ``B`` is omitted."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    same = B is None
    B = A if same else np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    d2 = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    if same:
        np.fill_diagonal(d2, 0.0)
        d2 = 0.5 * (d2 + d2.T)
    return np.sqrt(d2)


def kernel_eval(k: Kernel, x, x2) -> float:
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    r = float(np.sqrt(np.sum((x - x2) ** 2)))
    return float(k.of_scaled(r / k.length))


def _factor(A, scale):
    """Cholesky with the jitter ladder; returns ``(L, jitter)``."""
    I = np.eye(A.shape[0])
    for j in _JITTERS:
        try:
            return cholesky(A + j * scale * I if j else A, lower=True), j * scale
        except LinAlgError:
            continue
    cond = np.linalg.cond(A)
    raise GpNumericalError(
        f"Cholesky failed even with jitter {_JITTERS[-1] * scale:.3g} "
        f"(n={A.shape[0]}, condition number ~{cond:.3g})")


@dataclass
class GpModel:
    kernel: Kernel
    noise: float
    X: np.ndarray | None = None
    y: np.ndarray | None = None
    mode: str = "exact"
    inducing: np.ndarray | None = None
    jitter: float = 0.0
    # factorisation cache
    L: np.ndarray | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)
    L_B: np.ndarray | None = field(default=None, repr=False)

    @property
    def fitted(self) -> bool:
        return self.weights is not None

    def basis(self) -> np.ndarray:
        return self.X if self.mode == "exact" else self.X[self.inducing]


def _check_xy(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"need n >= 1 rows with matching targets, got X {X.shape}, y {y.shape}")
    return X, y


def fit_exact(X, y, kernel: Kernel, noise: float) -> GpModel:
    if noise < 0:
        raise ValueError("noise level must be non-negative")
    X, y = _check_xy(X, y)
    A = kernel.gram(X)
    A[np.diag_indices_from(A)] += noise**2
    L, jitter = _factor(A, kernel.signal**2)
    w = cho_solve((L, True), y)
    return GpModel(kernel, noise, X, y, "exact", None, jitter, L, w)


def fit_sor(X, y, kernel: Kernel, noise: float, inducing) -> GpModel:
    """Subset of regressors on the rows ``inducing``.

    Works through ``B = noise^2 I + V V^T`` with ``V = L_uu^-1 K_uf`` rather
    than forming ``noise^2 K_uu + K_uf K_fu``, whose condition number is the
    square of the inducing Gram's.
    """
    if noise < 0:
        raise ValueError("noise level must be non-negative")
    X, y = _check_xy(X, y)
    inducing = np.asarray(inducing, dtype=int).reshape(-1)
    if inducing.size == 0:
        raise ValueError("inducing set is empty")
    if inducing.size > X.shape[0]:
        raise ValueError(f"inducing set ({inducing.size}) larger than training set ({X.shape[0]})")
    if inducing.min() < 0 or inducing.max() >= X.shape[0] or np.unique(inducing).size != inducing.size:
        raise ValueError("inducing indices must be distinct row indices")
    U = X[inducing]
    var = kernel.signal**2
    L, jitter = _factor(kernel.gram(U), var)
    V = solve_triangular(L, kernel.gram(U, X), lower=True)
    B = V @ V.T
    B[np.diag_indices_from(B)] += noise**2
    L_B, _ = _factor(B, var)
    w = solve_triangular(L.T, cho_solve((L_B, True), V @ y), lower=False)
    return GpModel(kernel, noise, X, y, "sor", inducing, jitter, L, w, L_B)


def predict(model: GpModel, Xs, chunk: int = 4096):
    """Posterior mean and variance of the latent function (no output noise)."""
    if not model.fitted:
        raise RuntimeError("GP model is not fitted")
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    basis = model.basis()
    mean = np.empty(Xs.shape[0])
    var = np.empty(Xs.shape[0])
    for s in range(0, Xs.shape[0], chunk):
        Ks = model.kernel.gram(basis, Xs[s:s + chunk])
        mean[s:s + chunk] = Ks.T @ model.weights
        v = solve_triangular(model.L, Ks, lower=True)
        if model.mode == "exact":
            var[s:s + chunk] = model.kernel.signal**2 - np.sum(v * v, axis=0)
        else:
            c = solve_triangular(model.L_B, v, lower=True)
            var[s:s + chunk] = model.noise**2 * np.sum(c * c, axis=0)
    return mean, np.maximum(var, 0.0)


# -- marginal likelihood ------------------------------------------------------


def log_marginal_likelihood(R, y, kernel: Kernel, noise: float, want_grad: bool = False):
    """Exact LML given the distance matrix ``R``; gradient is w.r.t.
    ``(log signal, log length, log noise)``."""
    n = y.size
    s = R / kernel.length
    K = kernel.of_scaled(s)
    A = K.copy()
    A[np.diag_indices_from(A)] += noise**2
    try:
        L = cholesky(A, lower=True)
    except LinAlgError:
        return (-np.inf, None) if want_grad else -np.inf
    a = cho_solve((L, True), y)
    lml = -0.5 * y @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi)
    if not want_grad:
        return lml
    # d lml / d theta = 0.5 * tr((a a^T - A^-1) dA/dtheta)
    Ainv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        return -np.inf, None
    Ainv = np.tril(Ainv) + np.tril(Ainv, -1).T
    dK = kernel.dlog_length(s)
    grad = np.array([
        a @ K @ a - np.sum(Ainv * K),  # dK/dlog signal = 2K
        0.5 * (a @ dK @ a - np.sum(Ainv * dK)),
        noise**2 * (a @ a - np.trace(Ainv)),
    ])
    return lml, grad


@dataclass(frozen=True)
class HyperFit:
    kernel: Kernel
    noise: float
    lml: float
    subset: np.ndarray = field(repr=False)


def optimize_hypers(X, y, kind: str, inducing_count: int | None = None, *,
                    length: float | None = None, noise: float | None = None,
                    seed: int = 0, restarts: int = 5,
                    max_iter: int = 200, alpha: float = 1.0) -> HyperFit:
    """Maximise the exact log marginal likelihood over log-parameters.

    When ``inducing_count`` is smaller than the data, the likelihood is that
    of a seeded random subset of that many rows. ``length`` pins the length
    scale and ``noise`` pins the noise level. Each of ``restarts`` seeded
    starts (the first a data-driven guess) runs box-bounded L-BFGS; the best
    end point wins.
    """
    X, y = _check_xy(X, y)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two rows to fit hyperparameters")
    rng = np.random.default_rng(seed)
    m = n if inducing_count is None else min(int(inducing_count), n)
    subset = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
    Xs, ys = X[subset], y[subset]
    R = distances(Xs)
    ref_y = max(float(np.std(ys)), float(np.sqrt(np.mean(ys * ys))), 1e-12)
    off = R[np.triu_indices(m, 1)]
    ref_l = float(np.median(off[off > 0])) if np.any(off > 0) else 1.0
    lo = np.log([1e-3 * ref_y, 1e-3 * ref_l, 1e-6 * ref_y])
    hi = np.log([1e3 * ref_y, 1e3 * ref_l, 1e1 * ref_y])
    pinned = {1: length, 2: noise}
    free = [i for i in range(3) if pinned.get(i) is None]

    def full(zf):
        z = np.empty(3)
        z[free] = zf
        for i, v in pinned.items():
            if v is not None:
                z[i] = math.log(v) if v > 0 else -np.inf
        return z

    def unpack(z):
        return Kernel(kind, math.exp(z[0]), math.exp(z[1]), alpha), math.exp(z[2])

    def negative(zf):
        k, sn = unpack(full(zf))
        f, g = log_marginal_likelihood(R, ys, k, sn, True)
        if not np.isfinite(f):
            return 1e300, np.zeros(len(free))
        return -f, -g[free]

    guess = np.log([ref_y, ref_l, 0.1 * ref_y])
    starts = [guess[free]] + [rng.uniform(lo, hi)[free] for _ in range(restarts - 1)]
    bounds = list(zip(lo[free], hi[free]))
    best = None
    for z0 in starts:
        res = minimize(negative, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options=dict(maxiter=max_iter))
        f = -float(res.fun)
        if f > -1e299 and (best is None or f > best[1]):
            best = (full(res.x), f)
    if best is None:
        raise GpNumericalError(f"all {restarts} hyperparameter restarts failed to produce a finite likelihood")
    k, sn = unpack(best[0])
    if length is not None or noise is not None:  # hand back pinned values unrounded
        k = Kernel(kind, k.signal, length if length is not None else k.length, alpha)
        sn = noise if noise is not None else sn
    return HyperFit(k, sn, best[1], subset)


def default_inducing(n: int, seed: int, count: int = 512) -> np.ndarray:
    """Seeded uniform random inducing subset of size ``min(count, n)``."""
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=min(count, n), replace=False))


# -- persistence ------------------------------------------------------------


def to_dict(model: GpModel) -> dict:
    """Prediction state only: basis rows, weights and factors (not the full data)."""
    if not model.fitted:
        raise RuntimeError("GP model is not fitted")
    k = model.kernel
    return dict(
        kernel=dict(kind=k.kind, signal=k.signal, length=k.length, alpha=k.alpha),
        noise=model.noise, mode=model.mode, jitter=model.jitter,
        basis=model.basis().tolist(), weights=model.weights.tolist(), L=model.L.tolist(),
        L_B=None if model.L_B is None else model.L_B.tolist(),
    )


def from_dict(d: dict) -> GpModel:
    basis = np.array(d["basis"], dtype=float)
    m = basis.shape[0]
    return GpModel(
        kernel=Kernel(**d["kernel"]), noise=d["noise"], X=basis, y=None, mode=d["mode"],
        inducing=None if d["mode"] == "exact" else np.arange(m), jitter=d["jitter"],
        L=np.array(d["L"], dtype=float), weights=np.array(d["weights"], dtype=float),
        L_B=None if d["L_B"] is None else np.array(d["L_B"], dtype=float),
    )
