"""Kernels and latent Gaussian field machinery.

Dense algebra throughout: Gram matrices are factorised with Cholesky plus a
small relative jitter, modes are found with Newton or BFGS iterations under a
backtracking line search, and posterior draws come from the Laplace
(Gaussian-at-the-mode) approximation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, special
from scipy.spatial.distance import cdist

from .errors import DomainError, FactorizationError, OptimizationError

logger = logging.getLogger(__name__)

JITTER = 1e-8
GRAD_TOL = 1e-6
MAX_ITER = 500


@dataclass(frozen=True)
class MaternKernel:
    """Matérn covariance with smoothness fixed at 1."""

    rho: float
    sigma2: float
    nu: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and self.sigma2 > 0):
            raise DomainError(f"Matérn parameters must be positive (rho={self.rho}, sigma2={self.sigma2})")
        if self.nu != 1.0:
            raise DomainError("only nu = 1 is supported")

    def __call__(self, d):
        return matern_nu1(d, self)

    def gram(self, a, b=None):
        return matern_nu1(cdist(a, a if b is None else b), self)


@dataclass(frozen=True)
class SquaredExpKernel:
    """Squared-exponential covariance with unit variance."""

    kappa: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise DomainError(f"kappa must be positive, got {self.kappa}")

    def __call__(self, d):
        return squared_exp(d, self)

    def gram(self, a, b=None):
        a = np.asarray(a, dtype=float).reshape(-1, 1)
        b = a if b is None else np.asarray(b, dtype=float).reshape(-1, 1)
        return squared_exp(np.abs(a - b.T), self)


def _check_distance(d):
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise DomainError("distance must be finite")
    if np.any(d < 0):
        raise DomainError("distance must be non-negative")
    return d


def matern_nu1(d, k: MaternKernel):
    """sigma2 * x * K1(x) with x = sqrt(2) d / rho; sigma2 at d = 0."""
    d = _check_distance(d)
    x = math.sqrt(2.0) * d / k.rho
    with np.errstate(invalid="ignore"):
        out = np.where(x > 0, x * special.k1(np.where(x > 0, x, 1.0)), 1.0)
    out = k.sigma2 * out
    return float(out) if out.ndim == 0 else out


def matern_nu1_dlogrho(d, k: MaternKernel):
    """Derivative of matern_nu1 with respect to log(rho): sigma2 * x**2 * K0(x)."""
    d = _check_distance(d)
    x = math.sqrt(2.0) * d / k.rho
    safe = np.where(x > 0, x, 1.0)
    return k.sigma2 * np.where(x > 0, x * x * special.k0(safe), 0.0)


def squared_exp(d, k: SquaredExpKernel):
    d = _check_distance(d)
    out = np.exp(-(d * d) / (2.0 * k.kappa**2))
    return float(out) if out.ndim == 0 else out


def squared_exp_dlogkappa(d, k: SquaredExpKernel):
    d = _check_distance(d)
    r2 = (d / k.kappa) ** 2
    return r2 * np.exp(-0.5 * r2)


# --------------------------------------------------------------------------
# factorisations


def jittered_cholesky(K: np.ndarray, jitter: float = JITTER, scale: float | None = None, retries: int = 3):
    """Lower Cholesky factor of K + nugget * I, and the nugget used.

    The nugget is ``jitter * scale`` (scale defaults to the mean diagonal) and
    is raised tenfold per retry before giving up.
    """
    n = K.shape[0]
    if scale is None:
        scale = float(np.mean(np.diag(K))) if n else 1.0
    eps = jitter
    for attempt in range(retries + 1):
        try:
            nugget = eps * scale
            return linalg.cholesky(K + nugget * np.eye(n), lower=True, check_finite=True), nugget
        except linalg.LinAlgError:
            if attempt == retries:
                break
            logger.debug("cholesky failed with jitter %g, retrying", eps)
            eps *= 10.0
    lam = float(np.linalg.eigvalsh(0.5 * (K + K.T))[0]) if np.all(np.isfinite(K)) else float("nan")
    raise FactorizationError(f"matrix is not positive definite (smallest eigenvalue {lam:.3g})", min_eigenvalue=lam)


def cholesky(K: np.ndarray, jitter: float = JITTER, scale: float | None = None, retries: int = 3) -> np.ndarray:
    return jittered_cholesky(K, jitter, scale, retries)[0]


def cholesky_derivative(L: np.ndarray, dK: np.ndarray) -> np.ndarray:
    """dL for K = L L^T given dK (forward-mode Cholesky derivative)."""
    A = linalg.solve_triangular(L, dK, lower=True)
    A = linalg.solve_triangular(L, A.T, lower=True).T
    phi = np.tril(A)
    phi[np.diag_indices_from(phi)] *= 0.5
    return L @ phi


# --------------------------------------------------------------------------
# optimisation


def _numeric_hessian(fun, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        h = rel_step * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        H[:, i] = (fun(xp)[1] - fun(xm)[1]) / (2.0 * h)
    return 0.5 * (H + H.T)


def numeric_hessian(fun, x, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the gradient of ``fun`` (which returns value, grad)."""
    return _numeric_hessian(fun, np.asarray(x, dtype=np.float64), rel_step)


@dataclass
class ModeResult:
    x: np.ndarray
    hessian: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    trace: list = field(default_factory=list)


def _newton_direction(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(H, lower=True)
        return -linalg.cho_solve(c, g)
    except linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (H + H.T))
        floor = max(1e-8, 1e-6 * float(np.max(np.abs(w))))
        w = np.maximum(np.abs(w), floor)
        return -(V @ ((V.T @ g) / w))


def find_mode(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    init,
    hess: Callable[[np.ndarray], np.ndarray] | None = None,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
) -> ModeResult:
    """Minimise a smooth objective to a stationary point.

    ``fun`` returns ``(value, gradient)``.  With ``hess`` the search uses
    (eigenvalue-modified) Newton steps, otherwise BFGS.  Convergence means the
    gradient's max-norm is below ``tol``.  The returned Hessian is ``hess`` at
    the mode if given, else central differences of the gradient.
    """
    x = np.array(init, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise OptimizationError("initial point is not finite")
    f, g = fun(x)
    if not np.isfinite(f):
        raise OptimizationError("objective is not finite at the initial point")
    B = None  # inverse-Hessian approximation for BFGS
    trace = []
    it = 0
    while True:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        trace.append((it, float(f), gnorm))
        if gnorm < tol:
            break
        if it >= max_iter:
            raise OptimizationError(
                f"no convergence after {max_iter} iterations (gradient max-norm {gnorm:.3g})",
                grad_norm=gnorm,
                trace=trace,
            )
        it += 1
        if hess is not None:
            d = _newton_direction(hess(x), g)
        else:
            if B is None:
                B = np.eye(x.size) / max(1.0, gnorm)
            d = -B @ g
        slope = float(g @ d)
        if slope >= 0:
            d = -g
            slope = float(-(g @ g))
            B = None
        step = 1.0
        accepted = False
        while step > 1e-14:
            xn = x + step * d
            fn, gn = fun(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * step * slope:
                accepted = True
                break
            # at the rounding floor, an unchanged value with a smaller gradient is still progress
            if np.isfinite(fn) and fn <= f + 1e-12 * abs(f) and np.max(np.abs(gn)) < gnorm:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if hess is None and B is not None and not np.allclose(B, np.eye(x.size) / max(1.0, gnorm)):
                B = None
                continue
            raise OptimizationError(
                f"line search failed (gradient max-norm {gnorm:.3g})", grad_norm=gnorm, trace=trace
            )
        if hess is None:
            s = xn - x
            y = gn - g
            sy = float(s @ y)
            if sy > 1e-12 * float(np.sqrt((s @ s) * (y @ y))):
                if it == 1 or B is None:
                    B = np.eye(x.size) * (sy / float(y @ y))
                rho_ = 1.0 / sy
                By = B @ y
                B = B - rho_ * (np.outer(s, By) + np.outer(By, s)) + (rho_ * rho_ * float(y @ By) + rho_) * np.outer(s, s)
        x, f, g = xn, fn, gn
    H = hess(x) if hess is not None else _numeric_hessian(fun, x)
    return ModeResult(x, 0.5 * (H + H.T), float(f), gnorm, it, trace)


def laplace_sample(mode, hessian, n: int, seed: int) -> np.ndarray:
    """``n`` draws from N(mode, hessian^-1), one row per draw."""
    mode = np.asarray(mode, dtype=np.float64)
    H = 0.5 * (np.asarray(hessian, dtype=np.float64) + np.asarray(hessian, dtype=np.float64).T)
    try:
        L = linalg.cholesky(H, lower=True)
    except linalg.LinAlgError:
        lam = float(np.linalg.eigvalsh(H)[0])
        raise FactorizationError(
            f"hessian is not positive definite (smallest eigenvalue {lam:.3g})", min_eigenvalue=lam
        ) from None
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal((n, mode.size))
    return mode + linalg.solve_triangular(L.T, z.T, lower=False).T


def grad_check(fun, point) -> float:
    """Worst relative disagreement between the analytic gradient and central differences."""
    x = np.asarray(point, dtype=np.float64)
    _, g = fun(x)
    worst = 0.0
    for i in range(x.size):
        h = 1e-5 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (fun(xp)[0] - fun(xm)[0]) / (2.0 * h)
        err = abs(fd - g[i]) / max(1.0, abs(fd), abs(g[i]))
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LatentField:
    """A fitted latent Gaussian field at training locations.

    ``mode`` and ``hessian`` refer to the optimisation vector of the model that
    produced the field; ``values`` are the field values at ``locations``.
    """

    locations: np.ndarray
    kernel: MaternKernel | SquaredExpKernel
    mode: np.ndarray
    hessian: np.ndarray
    values: np.ndarray | None = None
    intercept: float = 0.0
    info: dict = field(default_factory=dict)

    def predict(self, points) -> np.ndarray:
        """Conditional mean of intercept + field at new points.

        The factorisation nugget is treated as part of the kernel at zero
        distance, so predictions at training locations reproduce ``values``.
        """
        points = np.asarray(points, dtype=np.float64)
        locs = self.locations
        if isinstance(self.kernel, SquaredExpKernel):
            points = points.reshape(-1)
            locs = locs.reshape(-1)
        L, nugget = jittered_cholesky(self.kernel.gram(locs))
        alpha = linalg.cho_solve((L, True), self.values)
        return self.intercept + cross_covariance(self.kernel, points, locs, nugget) @ alpha


def cross_covariance(kernel, points, locs, nugget: float = 0.0) -> np.ndarray:
    """Kernel between new points and training locations, with ``nugget`` added where they coincide."""
    if isinstance(kernel, SquaredExpKernel):
        d = np.abs(np.reshape(points, (-1, 1)) - np.reshape(locs, (1, -1)))
        K = squared_exp(d, kernel)
    else:
        d = cdist(np.atleast_2d(points), np.atleast_2d(locs))
        K = matern_nu1(d, kernel)
    K = np.atleast_2d(K)
    if nugget:
        K = K + nugget * (d == 0)
    return K
