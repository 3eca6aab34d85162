"""Monthly Poisson-GP incidence surfaces from facility case counts.

For month t, cases at facility i are Poisson with mean E_i * exp(b0 + f(s_i))
where f is a zero-mean Matérn field.  Each month is fitted on its own; only
the kernel hyperparameters are shared.  The field is whitened, f = L u with
L the Cholesky factor of the site Gram matrix, so the latent prior is N(0, I).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import gammaln, logsumexp

from .catchment import FacilityPanel
from .errors import AggregationError, CompatibilityError, PartitionError, ValidationError
from .gp_core import (
    LatentField,
    MaternKernel,
    cross_covariance,
    find_mode,
    jittered_cholesky,
)
from .months import Month
from .raster import GridSpec, Raster, read_ascii_grid, write_ascii_grid

logger = logging.getLogger(__name__)

LOG_RATE_FLOOR = -20.0


@dataclass(frozen=True)
class IncidenceModelConfig:
    rho: float
    sigma2: float
    months: int | None = None

    def __post_init__(self):
        if not (self.rho > 0 and self.sigma2 > 0):
            raise ValidationError("rho and sigma2 must be positive")

    @property
    def kernel(self) -> MaternKernel:
        return MaternKernel(self.rho, self.sigma2)


class _MonthObjective:
    """Negative log posterior in (b0, u) with a flat prior on b0."""

    def __init__(self, L, E, c):
        self.L, self.E, self.c = L, E, c

    def eta(self, x):
        return x[0] + self.L @ x[1:]

    def __call__(self, x):
        eta = self.eta(x)
        mu = self.E * np.exp(eta)
        u = x[1:]
        value = float(np.sum(mu - self.c * eta) + 0.5 * u @ u)
        r = mu - self.c
        grad = np.concatenate([[r.sum()], self.L.T @ r + u])
        return value, grad

    def hess(self, x):
        w = self.E * np.exp(self.eta(x))
        Lw = self.L.T * w
        n = x.size
        H = np.empty((n, n))
        H[0, 0] = w.sum()
        H[0, 1:] = H[1:, 0] = Lw.sum(axis=1)
        H[1:, 1:] = Lw @ self.L + np.eye(n - 1)
        return H


def _month_data(panel: FacilityPanel, month: int):
    E = panel.exposure(month)
    c = panel.cases[:, month]
    keep = (E > 0) & np.isfinite(E) & np.isfinite(c)
    dropped = [panel.ids[i] for i in np.flatnonzero(~keep)]
    if dropped:
        logger.info("month %s: excluded %d facilities (zero population or missing count)", panel.months[month], len(dropped))
    return np.flatnonzero(keep), E[keep], c[keep], dropped


def fit_incidence_month(
    panel: FacilityPanel, month: int, config: IncidenceModelConfig, index: Sequence[int] | None = None
) -> LatentField:
    """Posterior mode and curvature of the month's intercept and field.

    ``index`` restricts the fit to a subset of facilities (used for hold-out).
    """
    if index is not None:
        panel = panel.subset(index)
    keep, E, c, dropped = _month_data(panel, month)
    if keep.size == 0:
        raise ValidationError(f"month {panel.months[month]}: no usable facilities")
    locs = panel.coords()[keep]
    kernel = config.kernel
    L, nugget = jittered_cholesky(kernel.gram(locs), scale=kernel.sigma2)
    obj = _MonthObjective(L, E, c)
    info = {
        "month": str(panel.months[month]),
        "facility_ids": [panel.ids[i] for i in keep],
        "excluded": dropped,
        "nugget": nugget,
    }
    n = keep.size
    if c.sum() == 0:
        # no cases anywhere: the intercept MLE is -inf, clamp it and leave the field flat
        x = np.zeros(n + 1)
        x[0] = LOG_RATE_FLOOR
        H = obj.hess(x)
        info.update(degenerate=True, iterations=0, grad_norm=float(np.max(np.abs(obj(x)[1]))))
    else:
        x0 = np.zeros(n + 1)
        x0[0] = math.log(c.sum() / E.sum())
        res = find_mode(obj, x0, hess=obj.hess)
        x, H = res.x, res.hessian
        info.update(degenerate=False, iterations=res.iterations, grad_norm=res.grad_norm)
    f = L @ x[1:]
    return LatentField(locs, kernel, x, H, values=f, intercept=float(x[0]), info=info)


def fit_incidence(panel: FacilityPanel, config: IncidenceModelConfig) -> list[LatentField]:
    return [fit_incidence_month(panel, t, config) for t in range(len(panel.months))]


def site_log_rates(field_: LatentField) -> np.ndarray:
    return np.maximum(field_.intercept + field_.values, LOG_RATE_FLOOR)


def predict_log_rate(field_: LatentField, points) -> np.ndarray:
    """GP conditional mean of b0 + f at arbitrary points, floored."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    L, nugget = jittered_cholesky(field_.kernel.gram(field_.locations), scale=field_.kernel.sigma2)
    # K^-1 f = L^-T u because f = L u
    alpha = linalg.solve_triangular(L.T, field_.mode[1:], lower=False)
    out = field_.intercept + cross_covariance(field_.kernel, points, field_.locations, nugget) @ alpha
    return np.maximum(out, LOG_RATE_FLOOR)


def predict_log_rate_moments(field_: LatentField, points) -> tuple[np.ndarray, np.ndarray]:
    """Laplace predictive mean and variance of b0 + f at new points.

    The variance combines posterior uncertainty in (b0, u) with the
    conditional GP variance given the training sites.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    kernel = field_.kernel
    L, nugget = jittered_cholesky(kernel.gram(field_.locations), scale=kernel.sigma2)
    A = linalg.solve_triangular(L, cross_covariance(kernel, points, field_.locations, nugget).T, lower=True)
    # eta* = b0 + A^T u + e, e ~ N(0, k** - |A|^2) independent of (b0, u)
    a = np.vstack([np.ones((1, points.shape[0])), A])
    cov = linalg.cho_solve(linalg.cho_factor(field_.hessian, lower=True), a)
    var = np.einsum("ij,ij->j", a, cov) + np.maximum(kernel.sigma2 - np.einsum("ij,ij->j", A, A), 0.0)
    mean = field_.intercept + A.T @ field_.mode[1:]
    return mean, var


def predict_incidence_surface(field_: LatentField, grid: GridSpec | Raster) -> Raster:
    """Log incidence (cases per person per month) at every non-missing cell centre.

    ``grid`` may be a template raster whose missing cells stay missing.
    """
    spec = grid.spec if isinstance(grid, Raster) else grid
    trained_on = field_.info.get("grid")
    if trained_on is not None and trained_on != spec:
        raise CompatibilityError("prediction grid differs from the grid the facilities were placed on")
    missing = grid.mask if isinstance(grid, Raster) else np.zeros(spec.shape, bool)
    x, y = spec.centers()
    pts = np.column_stack([x[~missing], y[~missing]])
    values = np.full(spec.shape, np.nan)
    if pts.size:
        values[~missing] = predict_log_rate(field_, pts)
    out = np.full(spec.shape, spec.nodata)
    out[~missing] = values[~missing]
    return Raster(spec, out)


# --------------------------------------------------------------------------
# hyperparameter search


def make_folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Random partition of range(n) into k test folds."""
    if k < 2:
        raise PartitionError("need at least 2 folds")
    if n < k:
        raise PartitionError(f"cannot split {n} items into {k} non-empty folds")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def poisson_loglik(counts, exposure, log_rate) -> float:
    mu = exposure * np.exp(log_rate)
    return float(np.sum(counts * np.log(mu) - mu - gammaln(counts + 1.0)))


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(40)


def poisson_predictive_loglik(counts, exposure, mean, var) -> float:
    """Sum of log E[Poisson(c; E exp(eta))] with eta ~ N(mean, var), by Gauss-Hermite quadrature."""
    counts = np.asarray(counts, dtype=np.float64)[:, None]
    eta = np.asarray(mean)[:, None] + np.sqrt(np.asarray(var))[:, None] * _GH_NODES[None, :]
    mu = np.asarray(exposure)[:, None] * np.exp(eta)
    logp = counts * np.log(mu) - mu - gammaln(counts + 1.0)
    logw = np.log(_GH_WEIGHTS / math.sqrt(2 * math.pi))
    return float(np.sum(logsumexp(logp + logw[None, :], axis=1)))


def holdout_score(panel: FacilityPanel, config: IncidenceModelConfig, folds: Sequence[np.ndarray]) -> float:
    """Held-out Poisson predictive log likelihood summed over months and folds.

    Each held-out count is scored against the Laplace predictive distribution
    of its log rate, so over-smoothed fields are not favoured by ignoring
    their predictive spread.
    """
    n = len(panel)
    total = 0.0
    for test in folds:
        test = np.asarray(test)
        if test.size == 0:
            raise PartitionError("empty fold")
        train = np.setdiff1d(np.arange(n), test)
        if train.size == 0:
            raise PartitionError("fold leaves no training facilities")
        for t in range(len(panel.months)):
            fld = fit_incidence_month(panel, t, config, index=train)
            E = panel.exposure(t)[test]
            c = panel.cases[test, t]
            ok = (E > 0) & np.isfinite(c)
            if not ok.any():
                continue
            mean, var = predict_log_rate_moments(fld, panel.coords()[test][ok])
            total += poisson_predictive_loglik(c[ok], E[ok], mean, var)
    return total


@dataclass
class SearchResult:
    rho: float
    sigma2: float
    scores: list[tuple[float, float, float]] = field(default_factory=list)


def select_hyperparameters(
    panel: FacilityPanel,
    candidates: Sequence[tuple[float, float]],
    folds: Sequence[np.ndarray] | int = 5,
    seed: int = 0,
) -> SearchResult:
    """Pick (rho, sigma2) maximising held-out predictive log likelihood.

    Ties go to the smaller sigma2, then the larger rho.
    """
    if not candidates:
        raise ValidationError("empty candidate list")
    if isinstance(folds, int):
        folds = make_folds(len(panel), folds, seed)
    if len(folds) < 2:
        raise PartitionError("need at least 2 folds")
    scores = []
    for rho, sigma2 in candidates:
        s = holdout_score(panel, IncidenceModelConfig(rho, sigma2), folds)
        scores.append((float(rho), float(sigma2), s))
        logger.info("rho=%g sigma2=%g heldout loglik=%.4f", rho, sigma2, s)
    best = max(scores, key=lambda r: (r[2], -r[1], r[0]))
    return SearchResult(best[0], best[1], scores)


# --------------------------------------------------------------------------
# surface sets


@dataclass
class IncidenceSurfaceSet:
    months: list[Month]
    surfaces: list[Raster]

    def __post_init__(self):
        if len(self.months) != len(self.surfaces):
            raise ValidationError("one surface per month required")
        if self.surfaces:
            spec = self.surfaces[0].spec
            if any(s.spec != spec for s in self.surfaces):
                raise CompatibilityError("incidence surfaces are on different grids")

    @property
    def spec(self) -> GridSpec:
        return self.surfaces[0].spec

    def index(self, month: Month) -> int:
        try:
            return self.months.index(month)
        except ValueError:
            raise ValidationError(f"no incidence surface for {month}") from None

    def get(self, month: Month) -> Raster:
        return self.surfaces[self.index(month)]

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for m, r in zip(self.months, self.surfaces):
            p = directory / f"incidence_{m.tag}.asc"
            write_ascii_grid(r, p)
            paths.append(p)
        return paths

    @classmethod
    def read(cls, directory) -> "IncidenceSurfaceSet":
        paths = sorted(Path(directory).glob("incidence_*_*.asc"))
        if not paths:
            raise ValidationError(f"no incidence surfaces in {directory}")
        months = [Month.parse(p.stem[len("incidence_"):]) for p in paths]
        return cls(months, [read_ascii_grid(p) for p in paths])


def annualize_incidence(surfaces: IncidenceSurfaceSet, population: Raster | None = None) -> dict[int, Raster]:
    """Annual cases per person: the sum over the year's 12 months of exp(log incidence)."""
    by_year: dict[int, list[Raster]] = {}
    for m, r in zip(surfaces.months, surfaces.surfaces):
        by_year.setdefault(m.year, []).append(r)
    out = {}
    for year, rasters in sorted(by_year.items()):
        if len(rasters) != 12:
            raise AggregationError(f"year {year} has {len(rasters)} monthly surfaces, expected 12")
        missing = np.zeros(rasters[0].spec.shape, bool)
        for r in rasters:
            missing |= r.mask
        if population is not None:
            if population.spec != rasters[0].spec:
                raise CompatibilityError("population grid differs from incidence grid")
            missing |= population.mask
        total = np.zeros(rasters[0].spec.shape)
        for r in rasters:
            total += np.exp(np.where(missing, 0.0, r.values))
        out[year] = rasters[0].replace(total, missing=missing)
    return out


def write_fit_report(fields: Sequence[LatentField], path) -> None:
    """One JSON object per month: intercept and convergence statistics."""
    with open(path, "w") as fh:
        for f in fields:
            rec = {
                "month": f.info.get("month"),
                "beta0": f.intercept,
                "rho": f.kernel.rho,
                "sigma2": f.kernel.sigma2,
                "n_facilities": len(f.info.get("facility_ids", [])),
                "excluded": f.info.get("excluded", []),
                "iterations": f.info.get("iterations"),
                "grad_norm": f.info.get("grad_norm"),
                "degenerate": f.info.get("degenerate", False),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
