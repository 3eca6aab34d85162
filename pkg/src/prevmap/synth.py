"""Synthetic datasets with known truth, written in the pipeline's file formats."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .catchment import Facility, FacilityPanel, FrictionSurface, SeekCurveParams, compute_catchments, write_facilities_csv
from .gp_core import MaternKernel, cholesky
from .months import Month, dynamic_path, month_range, static_path
from .prevalence import SurveyTable, write_surveys_csv
from .raster import GridSpec, Raster, cell_center, write_ascii_grid


@dataclass
class SyntheticScenario:
    nrows: int = 12
    ncols: int = 12
    cellsize: float = 1.0
    n_facilities: int = 15
    n_clusters: int = 80
    start: str = "2013-01"
    n_months: int = 24
    # incidence truth
    incidence_rho: float = 3.0
    incidence_sigma2: float = 0.25
    log_rate_mean: float = -5.0
    seasonal_amplitude: float = 0.5
    # prevalence truth, on standardised inputs
    prevalence_beta0: float = -2.0
    incidence_slope: float = 0.8
    static_covariates: tuple[str, ...] = ("aridity", "access")
    dynamic_covariates: tuple[str, ...] = ("rainfall",)
    effects: dict = field(default_factory=lambda: {"aridity": -0.4, "rainfall_lag0": 0.3})
    spatial_sigma2: float = 0.1
    spatial_rho: float = 6.0
    cluster_size: tuple[int, int] = (10, 40)
    population_mean: float = 2000.0
    population_growth: float = 0.03
    seed: int = 1

    def months(self) -> list[Month]:
        s = Month.parse(self.start)
        return month_range(s, s.shift(self.n_months - 1))

    def spec(self) -> GridSpec:
        return GridSpec(self.ncols, self.nrows, 0.0, 0.0, self.cellsize, -9999.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["static_covariates"] = list(self.static_covariates)
        d["dynamic_covariates"] = list(self.dynamic_covariates)
        d["cluster_size"] = list(self.cluster_size)
        return d


def _smooth_field(rng, coords, rho, sigma2, n=1):
    if sigma2 <= 0:
        return np.zeros((n, coords.shape[0]))
    k = MaternKernel(rho, sigma2)
    L = cholesky(k.gram(coords), scale=sigma2)
    return (L @ rng.standard_normal((coords.shape[0], n))).T


def _standardize(v):
    sd = v.std()
    return (v - v.mean()) / (sd if sd > 0 else 1.0)


def generate_synthetic(scenario: SyntheticScenario, out_dir) -> dict:
    """Write a complete dataset under ``out_dir`` and return the truth bundle.

    Files: friction.asc, population_<year>.asc, facilities.csv, surveys.csv,
    zones.asc, covariates/*.asc, truth.json.
    """
    out = Path(out_dir)
    (out / "covariates").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(scenario.seed))
    spec = scenario.spec()
    xs, ys = spec.centers()
    coords = np.column_stack([xs.ravel(), ys.ravel()])
    months = scenario.months()
    years = sorted({m.year for m in months})

    friction = Raster(spec, 10.0 * np.exp(0.3 * _smooth_field(rng, coords, 4.0, 1.0)[0]).reshape(spec.shape))
    write_ascii_grid(friction, out / "friction.asc")

    base_pop = scenario.population_mean * np.exp(0.5 * _smooth_field(rng, coords, 3.0, 1.0)[0] - 0.125)
    populations = {}
    for k, yr in enumerate(years):
        pop = Raster(spec, np.round(base_pop * (1 + scenario.population_growth) ** k, 3).reshape(spec.shape))
        populations[yr] = pop
        write_ascii_grid(pop, out / f"population_{yr}.asc")

    cells = rng.choice(spec.size, size=scenario.n_facilities, replace=False)
    facilities = [Facility(f"HF{j:03d}", int(c // spec.ncols), int(c % spec.ncols)) for j, c in enumerate(cells)]
    fr = FrictionSurface(friction)
    catchments = {
        yr: compute_catchments(fr, populations[yr], facilities, SeekCurveParams()).populations for yr in years
    }

    # true log incidence on every cell, per month
    seasonal = scenario.seasonal_amplitude * np.sin(2 * np.pi * (np.array([m.month for m in months]) - 3) / 12)
    fields = _smooth_field(rng, coords, scenario.incidence_rho, scenario.incidence_sigma2, len(months))
    log_inc = scenario.log_rate_mean + seasonal[:, None] + fields  # (T, cells)
    fac_idx = np.array([f.row * spec.ncols + f.col for f in facilities])
    site_log_rate = log_inc[:, fac_idx].T  # (F, T)
    E = np.column_stack([catchments[m.year] for m in months])
    cases = rng.poisson(E * np.exp(site_log_rate)).astype(float)
    fx = np.array([cell_center(spec, f.row, f.col) for f in facilities])
    panel = FacilityPanel([f.id for f in facilities], fx[:, 0], fx[:, 1], months, cases, {})
    write_facilities_csv(panel, out / "facilities.csv")

    # covariates: static fields, and dynamic fields from two months before the start (for lags)
    cov_values = {}
    for name in scenario.static_covariates:
        v = _smooth_field(rng, coords, 4.0, 1.0)[0]
        r = Raster(spec, np.round(v, 6).reshape(spec.shape))
        write_ascii_grid(r, static_path(out / "covariates", name))
        cov_values[name] = r.values.ravel()
    dyn_months = month_range(months[0].shift(-2), months[-1])
    for name in scenario.dynamic_covariates:
        space = _smooth_field(rng, coords, 4.0, 1.0)[0]
        phase = rng.uniform(0, 2 * np.pi)
        for m in dyn_months:
            v = space + np.sin(2 * np.pi * m.month / 12 + phase) + 0.3 * rng.standard_normal(coords.shape[0])
            r = Raster(spec, np.round(v, 6).reshape(spec.shape))
            write_ascii_grid(r, dynamic_path(out / "covariates", name, m))
            cov_values[(name, m)] = r.values.ravel()

    zones = np.where(ys.ravel() >= spec.yll + spec.nrows * spec.cellsize / 2, 1, 3) + (xs.ravel() >= spec.ncols * spec.cellsize / 2)
    write_ascii_grid(Raster(spec, zones.reshape(spec.shape).astype(float)), out / "zones.asc")

    # surveys
    spatial = _smooth_field(rng, coords, scenario.spatial_rho, scenario.spatial_sigma2)[0]
    inc_std = _standardize(log_inc)
    ccells = rng.integers(0, spec.size, scenario.n_clusters)
    ctimes = rng.integers(0, len(months), scenario.n_clusters)
    eta = np.full(scenario.n_clusters, scenario.prevalence_beta0)
    eta += scenario.incidence_slope * inc_std[ctimes, ccells] + spatial[ccells]
    for feat, b in scenario.effects.items():
        if feat in scenario.static_covariates:
            v = _standardize(cov_values[feat])[ccells]
        else:
            name, lag = feat.rsplit("_lag", 1)
            allv = np.stack([cov_values[(name, m)] for m in dyn_months])
            mu, sd = allv.mean(), allv.std()
            v = np.array([(cov_values[(name, months[t].shift(-int(lag)))][c] - mu) / sd for c, t in zip(ccells, ctimes)])
        eta += b * v
    prev = expit(eta)
    lo, hi = scenario.cluster_size
    n_tested = rng.integers(lo, hi + 1, scenario.n_clusters)
    n_pos = rng.binomial(n_tested, prev)
    cxy = coords[ccells]
    surveys = SurveyTable([f"C{i:04d}" for i in range(scenario.n_clusters)], cxy[:, 0], cxy[:, 1],
                          [months[t] for t in ctimes], n_tested, n_pos)
    write_surveys_csv(surveys, out / "surveys.csv")

    truth = {
        "scenario": scenario.to_dict(),
        "facility_ids": panel.ids,
        "catchments": {str(yr): catchments[yr].tolist() for yr in years},
        "site_log_rate": site_log_rate.tolist(),
        "cluster_prevalence": prev.tolist(),
    }
    (out / "truth.json").write_text(json.dumps(truth, sort_keys=True))
    return truth
