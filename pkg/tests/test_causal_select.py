import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prevmap.causal_select import (
    CertaintyScores,
    bootstrap_certainty,
    candidate_sets,
    pc_adjacency,
    rcit,
    read_features_json,
    select_final,
    write_features_json,
)
from prevmap.errors import TestUndefinedError, ValidationError

from simulate import pc_screening_data


class TestRcit:
    def test_null_calibration(self):
        rejections = 0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            x, y = rng.standard_normal(500), rng.standard_normal(500)
            rejections += rcit(x, y, seed=seed) < 0.05
        assert 0.02 <= rejections / 200 <= 0.09

    def test_strong_dependence(self):
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(500)
            hits += rcit(x, x + 0.1 * rng.standard_normal(500), seed=seed) < 0.01
        assert hits == 20

    def test_nonlinear_dependence(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(500)
        # uncorrelated but dependent
        assert rcit(x, x**2 + 0.2 * rng.standard_normal(500), seed=1) < 0.01

    def test_chain_screened_off(self):
        kept = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(500)
            z = x + 0.5 * rng.standard_normal(500)
            y = z + 0.5 * rng.standard_normal(500)
            kept += rcit(x, y, z, seed=seed) > 0.05
        assert kept >= 40

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_p_value_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        x, y, z = rng.standard_normal((3, 100))
        p = rcit(x, y + 0.3 * x, z, seed=seed)
        assert 0.0 <= p <= 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x, y, z = rng.standard_normal((3, 200))
        assert rcit(x, y, z, seed=9) == rcit(x, y, z, seed=9)

    def test_constant_input(self):
        with pytest.raises(TestUndefinedError):
            rcit(np.ones(50), np.arange(50.0))


class TestPcAdjacency:
    def test_screens_off_proxy(self):
        exact = 0
        for seed in range(10):
            data, names = pc_screening_data(seed)
            exact += pc_adjacency(data, alpha=0.01, seed=seed, names=names) == {"X1"}
        assert exact >= 6

    def test_null_features(self):
        empty = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            empty += not pc_adjacency(rng.standard_normal((1000, 11)), alpha=0.01, seed=seed)
        assert empty >= 8

    def test_order_of_columns_irrelevant_for_strong_signal(self):
        data, names = pc_screening_data(0)
        perm = [2, 0, 4, 1, 3]
        swapped = np.column_stack([data[:, perm], data[:, -1]])
        a = pc_adjacency(data, 0.01, seed=0, names=names)
        b = pc_adjacency(swapped, 0.01, seed=0, names=[names[i] for i in perm])
        assert "X1" in a and "X1" in b

    def test_bad_arguments(self):
        with pytest.raises(ValidationError):
            pc_adjacency(np.zeros((10, 1)))
        with pytest.raises(ValidationError):
            pc_adjacency(np.random.default_rng(0).standard_normal((10, 3)), alpha=1.5)


class TestBootstrap:
    def test_single_repeat_is_binary(self):
        data, names = pc_screening_data(1, n=300)
        s = bootstrap_certainty(data, B=1, seed=0, names=names, max_cond_size=1)
        assert set(s.scores.tolist()) <= {0.0, 1.0}

    def test_copy_of_response_is_certain(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal(300)
        data = np.column_stack([y, rng.standard_normal(300), y])
        s = bootstrap_certainty(data, B=10, seed=1, names=["copy", "noise"], max_cond_size=1)
        assert s.as_dict()["copy"] == 1.0

    def test_seeded(self):
        data, names = pc_screening_data(2, n=200)
        a = bootstrap_certainty(data, B=5, seed=3, names=names, max_cond_size=1)
        b = bootstrap_certainty(data, B=5, seed=3, names=names, max_cond_size=1)
        np.testing.assert_array_equal(a.scores, b.scores)
        assert np.all((a.scores >= 0) & (a.scores <= 1))


scores_st = st.lists(st.floats(0, 1), min_size=1, max_size=12)


class TestCandidates:
    @settings(max_examples=200, deadline=None)
    @given(scores_st, st.lists(st.floats(0, 1), min_size=2, max_size=10))
    def test_nested(self, values, thresholds):
        s = CertaintyScores([f"f{i}" for i in range(len(values))], np.array(values), 50)
        sets = candidate_sets(s, thresholds)
        for (t1, a), (t2, b) in zip(sets, sets[1:]):
            assert t1 <= t2 and set(b) <= set(a)

    def test_threshold_out_of_range(self):
        with pytest.raises(ValidationError):
            candidate_sets(CertaintyScores(["a"], np.array([0.5]), 50), [1.5])

    def test_single_set(self):
        s = CertaintyScores(["a", "b"], np.array([0.8, 0.2]), 50)
        res = select_final(s, lambda f: 0.5, [0.5])
        assert res.members == ("a",) and res.threshold == 0.5

    def test_tie_prefers_smaller_set(self):
        s = CertaintyScores(["a", "b", "c"], np.array([0.9, 0.6, 0.3]), 50)
        res = select_final(s, lambda f: 0.4, [0.2, 0.5, 0.8])
        assert res.members == ("a",)

    def test_best_score_wins(self):
        s = CertaintyScores(["a", "b", "c"], np.array([0.9, 0.6, 0.3]), 50)
        res = select_final(s, lambda f: {1: 0.3, 2: 0.7, 3: 0.5}[len(f)], [0.2, 0.5, 0.8])
        assert res.members == ("a", "b") and res.cv_score == 0.7

    def test_all_empty_falls_back(self):
        s = CertaintyScores(["a", "b"], np.array([0.1, 0.0]), 50)
        calls = []
        res = select_final(s, lambda f: calls.append(tuple(f)) or 0.2, [0.5, 0.9])
        assert res.members == () and calls == [()]

    def test_published_final_set_representable(self, tmp_path):
        final = ("rainfall_lag0", "accessibility", "aridity_index", "distance_to_water")
        names = list(final) + ["rainfall_lag1", "lst_day_lag0"]
        s = CertaintyScores(names, np.array([0.9, 0.8, 0.7, 0.7, 0.3, 0.1]), 100)
        res = select_final(s, lambda f: 0.6 if set(f) == set(final) else 0.5, [0.2, 0.5, 0.9])
        assert set(res.members) == set(final)
        write_features_json(tmp_path / "f.json", res, s, {"alpha": 0.05})
        assert read_features_json(tmp_path / "f.json") == list(res.members)
