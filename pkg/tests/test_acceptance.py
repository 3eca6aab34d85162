"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``; the verdicts are
also repeated in the terminal summary.
"""
import math
import shutil
import time

import numpy as np
import pytest
from scipy.special import expit

from prevmap.catchment import Facility, FrictionSurface, SeekCurveParams, compute_catchments, seek_probability, \
    travel_time
from prevmap.causal_select import pc_adjacency, rcit
from prevmap.gp_core import MaternKernel, find_mode, grad_check, laplace_sample, matern_nu1
from prevmap.incidence import IncidenceModelConfig, fit_incidence, fit_incidence_month, site_log_rates
from prevmap.mapgen import annual_mean_prevalence, exceedance, iqr_map, weighted_mean_samples, weighted_series
from prevmap.months import Month, month_range
from prevmap.pipeline_cli import RunConfig, main
from prevmap.prevalence import PosteriorSampleCube, PrevalenceObjective, PriorSpec, fit_prevalence
from prevmap.raster import GridSpec, Raster

from conftest import VERDICTS
from simulate import (
    conjugate_problem,
    exhaustive_paths,
    heap_dijkstra,
    incidence_scenario,
    loop_annual_mean,
    loop_exceed,
    loop_iqr,
    loop_weighted_mean,
    matern_oracle,
    pc_screening_data,
    prevalence_design,
)

NODATA = -9999.0


def verdict(n, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail} ({elapsed:.1f} s, limit {limit:g} s)"
    print(line)
    VERDICTS.append(line)
    assert ok, line


def _surface(values):
    values = np.asarray(values, dtype=float)
    return FrictionSurface(Raster(GridSpec(values.shape[1], values.shape[0], 0, 0, 1, NODATA), values))


def test_01_seek_curve():
    t0 = time.perf_counter()
    at120 = float(seek_probability(120.0))
    limit = float(seek_probability(np.inf))
    ok = abs(at120 - 0.3) < 1e-3 and abs(limit - 0.15) < 1e-6
    verdict(1, ok, f"p(120)={at120:.5f}, p(inf)={limit:.8f}", time.perf_counter() - t0, 1)


def test_02_catchment_conservation():
    t0 = time.perf_counter()
    p = SeekCurveParams()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        nr, nc = (int(v) for v in rng.integers(8, 65, 2))
        fr = rng.uniform(0.5, 20.0, (nr, nc))
        valid = rng.uniform(size=(nr, nc)) > 0.1
        open_cells = np.argwhere(valid)
        k = int(rng.integers(1, 21))
        pick = open_cells[rng.choice(len(open_cells), k, replace=False)]
        facs = [Facility(str(i), int(r), int(c)) for i, (r, c) in enumerate(pick)]
        pop = Raster(GridSpec(nc, nr, 0, 0, 1), rng.uniform(0, 1000, (nr, nc)))
        res = compute_catchments(_surface(np.where(valid, fr, NODATA)), pop, facs)
        tmin = heap_dijkstra(fr, pick, valid)
        reach = np.isfinite(tmin)
        seek = p.alpha / (1.0 + np.exp(p.sigma_seek * tmin[reach])) + p.beta_seek
        expect = float(np.sum(pop.values[reach] * seek))
        worst = max(worst, abs(res.populations.sum() - expect) / expect)
    verdict(2, worst <= 1e-9, f"worst relative error {worst:.2e} over 50 scenarios", time.perf_counter() - t0, 30)


def test_03_shortest_paths():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        fr = rng.uniform(0.1, 10.0, (8, 8))
        src = (int(rng.integers(8)), int(rng.integers(8)))
        got = travel_time(_surface(fr), Facility("a", *src)).minutes()
        want = exhaustive_paths(fr, src)
        worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(want, 1.0))))
    verdict(3, worst <= 1e-12, f"worst relative error {worst:.2e} over 100 grids", time.perf_counter() - t0, 60)


def test_04_matern_kernel():
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 20, 1000)
    rho = np.exp(rng.uniform(np.log(0.05), np.log(50), 1000))
    s2 = np.exp(rng.uniform(np.log(1e-3), np.log(10), 1000))
    # the high-precision oracle is computed outside the timed region
    want = np.array([matern_oracle(float(a), float(b), float(c)) for a, b, c in zip(d, rho, s2)])
    t0 = time.perf_counter()
    got = np.array([matern_nu1(a, MaternKernel(float(b), float(c))) for a, b, c in zip(d, rho, s2)], dtype=float)
    origin = all(matern_nu1(0.0, MaternKernel(float(b), float(c))) == c for b, c in zip(rho, s2))
    elapsed = time.perf_counter() - t0
    worst = float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)))
    verdict(4, worst <= 1e-10 and origin, f"worst relative error {worst:.2e}, k(0)=sigma2 {origin}", elapsed, 5)


def test_05_conjugate_laplace():
    t0 = time.perf_counter()
    fun, H, mean, cov = conjugate_problem(n=20)
    res = find_mode(fun, np.zeros(20), hess=lambda f: H)
    e_mean = float(np.max(np.abs(res.x - mean)))
    e_cov = float(np.max(np.abs(np.linalg.inv(res.hessian) - cov)))
    verdict(5, max(e_mean, e_cov) <= 1e-8, f"mode error {e_mean:.1e}, covariance error {e_cov:.1e}",
            time.perf_counter() - t0, 5)


def test_06_prevalence_gradient():
    t0 = time.perf_counter()
    design, _, _ = prevalence_design(0)
    obj = PrevalenceObjective(design)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10):
        x = obj.initial_point() + 0.5 * rng.standard_normal(obj.layout.size)
        worst = max(worst, grad_check(obj, x))
    verdict(6, worst < 1e-4, f"max relative gradient error {worst:.2e} at 10 points", time.perf_counter() - t0, 60)


def test_07_incidence_recovery():
    t0 = time.perf_counter()
    cfg = IncidenceModelConfig(1.0, 0.25)
    corr = []
    for seed in range(20):
        panel, truth = incidence_scenario(seed)
        fitted = np.column_stack([site_log_rates(f) for f in fit_incidence(panel, cfg)])
        corr.append(np.corrcoef(truth.ravel(), fitted.ravel())[0, 1])
    hits = int(np.sum(np.array(corr) >= 0.9))
    pooled_err = 0.0
    for seed in range(5):
        panel, _ = incidence_scenario(seed)
        for t, fld in enumerate(fit_incidence(panel, IncidenceModelConfig(1.0, 1e-14))):
            pooled = math.log(panel.cases[:, t].sum() / panel.exposure(t).sum())
            pooled_err = max(pooled_err, abs(fld.intercept - pooled))
    verdict(7, hits >= 18 and pooled_err <= 1e-6,
            f"r>=0.9 in {hits}/20 seeds (min r {min(corr):.3f}), pooled-rate error {pooled_err:.1e}",
            time.perf_counter() - t0, 600)


def test_08_exposure_equivariance():
    from prevmap.catchment import FacilityPanel

    t0 = time.perf_counter()
    cfg = IncidenceModelConfig(1.0, 0.25)
    d_b0 = d_counts = 0.0
    for seed in range(3):
        panel, _ = incidence_scenario(seed)
        scaled = FacilityPanel(panel.ids, panel.x, panel.y, panel.months, panel.cases,
                               {yr: 10.0 * v for yr, v in panel.catchments.items()})
        for t in range(len(panel.months)):
            a = fit_incidence_month(panel, t, cfg)
            b = fit_incidence_month(scaled, t, cfg)
            d_b0 = max(d_b0, abs(b.intercept - a.intercept + math.log(10.0)))
            ca = panel.exposure(t) * np.exp(site_log_rates(a))
            cb = scaled.exposure(t) * np.exp(site_log_rates(b))
            d_counts = max(d_counts, float(np.max(np.abs(cb - ca) / ca)))
    verdict(8, d_b0 <= 1e-4 and d_counts <= 1e-6,
            f"intercept shift error {d_b0:.1e}, count relative change {d_counts:.1e}", time.perf_counter() - t0, 120)


def test_09_prevalence_recovery():
    t0 = time.perf_counter()
    hits = 0
    in_unit = True
    for seed in range(20):
        design, beta0, beta = prevalence_design(seed, n=200, N=50)
        m = fit_prevalence(design)
        sd = m.posterior_sd()
        idx = np.r_[0, np.arange(m.layout.size)[m.layout.beta]]
        truth = np.concatenate([[beta0], beta])
        hits += bool(np.all(np.abs(m.mode[idx] - truth) <= 2 * sd[idx]))
        obj = PrevalenceObjective(design)
        draws = laplace_sample(m.mode, m.hessian, 200, seed=seed)
        prev = expit(np.array([obj.linear_predictor(x) for x in draws]))
        in_unit &= bool(np.all((prev >= 0) & (prev <= 1)))
    verdict(9, hits >= 18 and in_unit, f"all fixed effects within 2 sd in {hits}/20 seeds, samples in [0,1] {in_unit}",
            time.perf_counter() - t0, 900)


def test_10_rcit_calibration():
    t0 = time.perf_counter()
    rejections = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 500))
        rejections += rcit(x, y, seed=seed) < 0.05
    kept = 0
    for seed in range(200):
        rng = np.random.default_rng(10_000 + seed)
        x = rng.standard_normal(500)
        z = x + 0.5 * rng.standard_normal(500)
        y = z + 0.5 * rng.standard_normal(500)
        kept += rcit(x, y, z, seed=seed) >= 0.05
    rate, keep_rate = rejections / 200, kept / 200
    verdict(10, 0.02 <= rate <= 0.09 and keep_rate >= 0.8,
            f"null rejection {rate:.3f}, chain non-rejection {keep_rate:.3f}", time.perf_counter() - t0, 300)


def test_11_pc_screening():
    t0 = time.perf_counter()
    exact = noisy = 0
    for seed in range(50):
        data, names = pc_screening_data(seed)
        found = pc_adjacency(data, alpha=0.01, seed=seed, names=names)
        exact += found == {"X1"}
        noisy += any(f.startswith("N") for f in found)
    verdict(11, exact >= 30 and noisy <= 5, f"exactly {{X1}} in {exact}/50, noise selected in {noisy}/50",
            time.perf_counter() - t0, 600)


def test_12_map_products():
    t0 = time.perf_counter()
    worst = 0.0
    complement = True
    year = month_range(Month(2014, 1), Month(2014, 12))
    for seed in range(5):
        rng = np.random.default_rng(seed)
        data = rng.beta(2, 8, (40, 12, 4, 5))
        data[::9, :, 0, 0] = 0.15
        spec = GridSpec(5, 4, 0, 0, 1)
        cube = PosteriorSampleCube(data, spec, year, seed)
        pop = Raster(spec, rng.uniform(0, 500, spec.shape))
        for t in range(12):
            want = np.array([loop_weighted_mean(data[s, t], pop.values) for s in range(40)])
            worst = max(worst, float(np.max(np.abs(weighted_mean_samples(data[:, t], pop) - want))))
        rows = weighted_series(cube, pop)
        worst = max(worst, abs(rows[0].mean - np.mean([loop_weighted_mean(data[s, 0], pop.values)
                                                       for s in range(40)])))
        for t in range(12):
            above, below = exceedance(data[:, t], 0.15, "above"), exceedance(data[:, t], 0.15, "below")
            worst = max(worst, float(np.max(np.abs(above - loop_exceed(data[:, t], 0.15, True)))),
                        float(np.max(np.abs(below - loop_exceed(data[:, t], 0.15, False)))))
            complement &= bool(np.all(above + below == 1.0))
            worst = max(worst, float(np.max(np.abs(iqr_map(data[:, t]) - loop_iqr(data[:, t])))))
        worst = max(worst, float(np.max(np.abs(annual_mean_prevalence(cube, 2014) - loop_annual_mean(data)))))
    verdict(12, worst <= 1e-12 and complement, f"worst deviation from oracles {worst:.1e}, complement {complement}",
            time.perf_counter() - t0, 30)


def test_13_end_to_end_determinism(tmp_path):
    import json

    t0 = time.perf_counter()
    data = tmp_path / "bundled"
    assert main(["synth", "--out-dir", str(data)]) == 0
    assert main(["run", "--config", str(data / "config.yaml")]) == 0
    first = json.loads((data / "run" / "manifest.json").read_text())["files"]
    shutil.rmtree(data / "run")
    assert main(["run", "--config", str(data / "config.yaml")]) == 0
    second = json.loads((data / "run" / "manifest.json").read_text())["files"]
    verdict(13, first == second and len(first) > 0, f"{len(first)} output digests, identical {first == second}",
            time.perf_counter() - t0, 1200)


def test_14_config_fidelity(tmp_path):
    t0 = time.perf_counter()
    priors = dict(beta0_sd=1.0, beta_sd=0.25, log_rho_mean=3.0, log_rho_sd=0.1, log_sigma_mean=0.0,
                  log_sigma_sd=0.1, log_kappa_mean=3.0, log_kappa_sd=0.1)
    cfg = RunConfig.from_dict({
        "schema_version": 1,
        "seed": 0,
        "inputs": {"friction": "f.asc", "population": {2014: "p.asc"}, "facilities": "h.csv",
                   "surveys": "s.csv", "covariate_dir": "cov"},
        "catchment": {"alpha": 0.6, "sigma": 0.00916, "beta": 0.15},
        "incidence": {"log_rho": -0.1, "log_sigma": -2.0},
        "priors": priors,
    })
    cfg.save(tmp_path / "c.yaml")
    back = RunConfig.load(tmp_path / "c.yaml")
    ok = (back == cfg
          and (back.catchment.alpha, back.catchment.sigma, back.catchment.beta) == (0.6, 0.00916, 0.15)
          and back.incidence.rho == math.exp(-0.1) and back.incidence.sigma == math.exp(-2.0)
          and all(getattr(back.priors, k) == v for k, v in priors.items())
          and back.priors == PriorSpec())
    verdict(14, ok, f"round trip exact {ok}", time.perf_counter() - t0, 1)
