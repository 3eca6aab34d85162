import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from prevmap.catchment import FacilityPanel
from prevmap.errors import AggregationError, CompatibilityError, PartitionError, ValidationError
from prevmap.gp_core import MaternKernel
from prevmap.incidence import (
    IncidenceModelConfig,
    IncidenceSurfaceSet,
    annualize_incidence,
    fit_incidence,
    fit_incidence_month,
    holdout_score,
    make_folds,
    poisson_predictive_loglik,
    predict_incidence_surface,
    predict_log_rate,
    predict_log_rate_moments,
    select_hyperparameters,
    site_log_rates,
)
from prevmap.months import Month, month_range
from prevmap.raster import GridSpec, Raster

from simulate import incidence_scenario


def _panel(x, y, cases, E, months=None):
    cases = np.asarray(cases, dtype=float)
    if cases.ndim == 1:
        cases = cases[:, None]
    months = months or month_range(Month(2014, 1), Month(2014, 1).shift(cases.shape[1] - 1))
    return FacilityPanel([f"F{i}" for i in range(len(x))], np.asarray(x, float), np.asarray(y, float), months,
                         cases, {2014: np.asarray(E, float)})


def _scaled(panel, factor):
    return FacilityPanel(panel.ids, panel.x, panel.y, panel.months, panel.cases,
                         {yr: v * factor for yr, v in panel.catchments.items()})


class TestFitMonth:
    def test_single_facility_rate(self):
        fld = fit_incidence_month(_panel([0.5], [0.5], [10], [1000]), 0, IncidenceModelConfig(1.0, 1e-12))
        assert math.exp(site_log_rates(fld)[0]) == pytest.approx(0.01, rel=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_vanishing_variance_is_pooled_glm(self, seed):
        panel, _ = incidence_scenario(seed, n_months=3)
        for t, fld in enumerate(fit_incidence(panel, IncidenceModelConfig(1.0, 1e-14))):
            pooled = math.log(panel.cases[:, t].sum() / panel.exposure(t).sum())
            assert abs(fld.intercept - pooled) < 1e-6

    def test_distant_sites_keep_their_own_rates(self):
        panel = _panel([0.0, 100.0], [0.0, 0.0], [1000, 4000], [1e5, 1e5])
        fld = fit_incidence_month(panel, 0, IncidenceModelConfig(0.1, 1.0))
        np.testing.assert_allclose(np.exp(site_log_rates(fld)), [0.01, 0.04], rtol=2e-3)

    def test_mode_is_stationary(self):
        panel, _ = incidence_scenario(3, n_months=1)
        fld = fit_incidence_month(panel, 0, IncidenceModelConfig(1.0, 0.25))
        # intercept equation: expected total equals observed total
        mu = panel.exposure(0) * np.exp(fld.intercept + fld.values)
        assert mu.sum() == pytest.approx(panel.cases[:, 0].sum(), rel=1e-8)

    def test_zero_population_facility_excluded(self):
        panel = _panel([0, 1, 2], [0, 0, 0], [5, 3, 4], [1000, 0, 800])
        fld = fit_incidence_month(panel, 0, IncidenceModelConfig(1.0, 0.25))
        assert fld.info["excluded"] == ["F1"]
        assert fld.info["facility_ids"] == ["F0", "F2"]

    def test_all_zero_counts_are_floored(self):
        fld = fit_incidence_month(_panel([0, 1], [0, 0], [0, 0], [100, 100]), 0, IncidenceModelConfig(1.0, 0.25))
        assert fld.info["degenerate"]
        np.testing.assert_array_equal(site_log_rates(fld), [-20.0, -20.0])

    def test_no_usable_facility(self):
        with pytest.raises(ValidationError):
            fit_incidence_month(_panel([0], [0], [np.nan], [100]), 0, IncidenceModelConfig(1.0, 0.25))

    def test_published_operating_point_accepted(self):
        cfg = IncidenceModelConfig(math.exp(-0.1), math.exp(-2.0) ** 2)
        assert cfg.kernel.rho == math.exp(-0.1)
        assert cfg.kernel.sigma2 == pytest.approx(math.exp(-4.0), rel=1e-15)

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValidationError):
            IncidenceModelConfig(0.0, 1.0)


class TestExposureScaling:
    @pytest.mark.parametrize("seed", range(3))
    def test_tenfold_exposure(self, seed):
        panel, _ = incidence_scenario(seed, n_months=2)
        cfg = IncidenceModelConfig(1.0, 0.25)
        for t in range(2):
            a = fit_incidence_month(panel, t, cfg)
            b = fit_incidence_month(_scaled(panel, 10.0), t, cfg)
            assert b.intercept - a.intercept == pytest.approx(-math.log(10.0), abs=1e-4)
            ca = panel.exposure(t) * np.exp(site_log_rates(a))
            cb = 10.0 * panel.exposure(t) * np.exp(site_log_rates(b))
            np.testing.assert_allclose(cb, ca, rtol=1e-6)


class TestRecovery:
    @pytest.mark.parametrize("seed", range(3))
    def test_site_log_rates_track_truth(self, seed):
        panel, truth = incidence_scenario(seed)
        fitted = np.column_stack([site_log_rates(f) for f in fit_incidence(panel, IncidenceModelConfig(1.0, 0.25))])
        assert np.corrcoef(truth.ravel(), fitted.ravel())[0, 1] >= 0.9


class TestPrediction:
    def _fit(self):
        panel, _ = incidence_scenario(1, n_months=1)
        return panel, fit_incidence_month(panel, 0, IncidenceModelConfig(1.0, 0.25))

    def test_interpolates_training_sites(self):
        panel, fld = self._fit()
        np.testing.assert_allclose(predict_log_rate(fld, fld.locations), fld.intercept + fld.values, atol=1e-8)

    def test_reverts_to_intercept_far_away(self):
        _, fld = self._fit()
        assert predict_log_rate(fld, [[1e4, 1e4]])[0] == pytest.approx(fld.intercept, abs=1e-12)

    def test_two_site_midpoint(self):
        panel = _panel([0.0, 2.0], [0.0, 0.0], [30, 80], [1000, 1000])
        fld = fit_incidence_month(panel, 0, IncidenceModelConfig(1.5, 0.4))
        k = MaternKernel(1.5, 0.4)
        K = k.gram(fld.locations)
        kstar = np.array([k(1.0), k(1.0)])
        want = fld.intercept + kstar @ np.linalg.solve(K, fld.values)
        assert predict_log_rate(fld, [[1.0, 0.0]])[0] == pytest.approx(want, abs=1e-10)

    def test_predictive_variance_limits(self):
        _, fld = self._fit()
        _, var_far = predict_log_rate_moments(fld, [[1e4, 1e4]])
        # far away: prior variance plus intercept uncertainty
        b0_var = np.linalg.inv(fld.hessian)[0, 0]
        assert var_far[0] == pytest.approx(0.25 + b0_var, rel=1e-8)
        mean, var_site = predict_log_rate_moments(fld, fld.locations[:1])
        assert var_site[0] < var_far[0]
        assert mean[0] == pytest.approx(fld.intercept + fld.values[0], abs=1e-8)

    def test_surface_respects_mask_and_grid(self):
        _, fld = self._fit()
        spec = GridSpec(10, 10, 0, 0, 1)
        tmpl = Raster(spec, np.where(np.eye(10, dtype=bool), spec.nodata, 1.0))
        surf = predict_incidence_surface(fld, tmpl)
        np.testing.assert_array_equal(surf.mask, tmpl.mask)
        fld.info["grid"] = spec
        with pytest.raises(CompatibilityError):
            predict_incidence_surface(fld, GridSpec(5, 5, 0, 0, 1))


class TestPredictiveScore:
    def test_zero_variance_is_plain_poisson(self):
        c, E, m = np.array([3.0, 0.0, 11.0]), np.array([100.0, 50.0, 400.0]), np.array([-3.0, -4.0, -3.5])
        mu = E * np.exp(m)
        want = float(np.sum(c * np.log(mu) - mu - gammaln(c + 1)))
        assert poisson_predictive_loglik(c, E, m, np.zeros(3)) == pytest.approx(want, rel=1e-12)

    def test_lognormal_mixture_oracle(self):
        from scipy import integrate, stats

        c, E, m, v = 7.0, 200.0, -3.2, 0.3
        dens, _ = integrate.quad(lambda z: stats.poisson.pmf(c, E * math.exp(m + math.sqrt(v) * z)) * stats.norm.pdf(z),
                                 -12, 12, epsabs=1e-14)
        assert poisson_predictive_loglik([c], [E], [m], [v]) == pytest.approx(math.log(dens), rel=1e-8)


class TestHyperparameterSearch:
    def test_single_candidate(self):
        panel, _ = incidence_scenario(0, n_months=2)
        res = select_hyperparameters(panel, [(0.7, 0.3)], folds=3)
        assert (res.rho, res.sigma2) == (0.7, 0.3)

    def test_tie_breaks_to_smaller_variance_then_larger_range(self, monkeypatch):
        import prevmap.incidence as inc

        monkeypatch.setattr(inc, "holdout_score", lambda panel, cfg, folds: 0.0)
        panel, _ = incidence_scenario(0, n_months=1)
        res = select_hyperparameters(panel, [(0.5, 0.5), (1.0, 0.1), (2.0, 0.1), (2.0, 0.25)], folds=2)
        assert (res.rho, res.sigma2) == (2.0, 0.1)

    def test_empty_fold(self):
        panel, _ = incidence_scenario(0, n_months=1)
        with pytest.raises(PartitionError):
            holdout_score(panel, IncidenceModelConfig(1.0, 0.25), [np.arange(5), np.array([], int)])

    def test_fold_partition(self):
        folds = make_folds(23, 5, seed=4)
        assert sorted(np.concatenate(folds).tolist()) == list(range(23))
        assert all(len(f) > 0 for f in folds)
        with pytest.raises(PartitionError):
            make_folds(3, 5, seed=0)

    def test_selects_generating_pair(self):
        cands = [(r, s) for r in (0.5, 1.0, 2.0) for s in (0.1, 0.25, 0.5)]
        hits = 0
        for seed in range(20):
            panel, _ = incidence_scenario(seed)
            res = select_hyperparameters(panel, cands, folds=5, seed=seed)
            hits += (res.rho, res.sigma2) == (1.0, 0.25)
        assert hits > 10


class TestAnnualize:
    def _set(self, values):
        spec = GridSpec(3, 2, 0, 0, 1)
        months = month_range(Month(2016, 1), Month(2016, 12))
        return IncidenceSurfaceSet(months, [Raster(spec, v) for v in values])

    def test_constant_rate(self):
        out = annualize_incidence(self._set([np.full((2, 3), math.log(0.02))] * 12))
        np.testing.assert_allclose(out[2016].values, 0.24, rtol=1e-14)

    def test_one_nonzero_month(self):
        vals = [np.full((2, 3), -700.0)] * 12
        vals[4] = np.full((2, 3), math.log(0.5))
        np.testing.assert_allclose(annualize_incidence(self._set(vals))[2016].values, 0.5, rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_direct_summation(self, seed):
        vals = np.random.default_rng(seed).normal(-4, 1, (12, 2, 3))
        got = annualize_incidence(self._set(list(vals)))[2016].values
        want = np.zeros((2, 3))
        for t in range(12):
            for i in range(2):
                for j in range(3):
                    want[i, j] += math.exp(vals[t, i, j])
        np.testing.assert_allclose(got, want, rtol=1e-13)

    def test_incomplete_year(self):
        s = self._set([np.zeros((2, 3))] * 12)
        with pytest.raises(AggregationError):
            annualize_incidence(IncidenceSurfaceSet(s.months[:11], s.surfaces[:11]))

    def test_round_trip(self, tmp_path):
        s = self._set(list(np.random.default_rng(0).normal(-4, 1, (12, 2, 3))))
        s.write(tmp_path)
        back = IncidenceSurfaceSet.read(tmp_path)
        assert back.months == s.months
        for a, b in zip(back.surfaces, s.surfaces):
            assert a == b
