"""Predictor algebra, subset sampling statistics, the rank metric, and the
smoothness probe."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

import retrace as rt
from retrace import attribution, models

from helpers import rel_err, ridge_plan, small_mlp_plan


class TestTaylorPredictor:
    def test_center_identity_bitwise(self):
        rng = np.random.default_rng(0)
        pred = attribution.TaylorPredictor(rng.normal(size=20), 0.7301)
        assert pred.predict(np.ones(20)) == 0.7301

    def test_zero_influence_constant(self):
        pred = attribution.TaylorPredictor(np.zeros(5), 2.5)
        rng = np.random.default_rng(1)
        for _ in range(5):
            assert pred.predict(rng.uniform(0, 2, size=5)) == 2.5

    def test_drop_set_algebra(self):
        rng = np.random.default_rng(2)
        infl = rng.normal(size=10)
        pred = attribution.TaylorPredictor(infl, 1.0)
        w = np.ones(10)
        dropped = [2, 5, 6]
        w[dropped] = 0.0
        assert rel_err(pred.predict(w), 1.0 - infl[dropped].sum()) <= 1e-12

    def test_affinity_in_weight_difference(self):
        rng = np.random.default_rng(3)
        infl = rng.normal(size=8)
        pred = attribution.TaylorPredictor(infl, -0.4)
        w1 = rng.uniform(0, 2, size=8)
        shift = rng.normal(size=8) * 0.1
        diff_a = pred.predict(w1 + shift) - pred.predict(w1)
        w2 = rng.uniform(0, 2, size=8)
        diff_b = pred.predict(w2 + shift) - pred.predict(w2)
        assert abs(diff_a - diff_b) <= 1e-12 * max(1.0, abs(diff_a))


class TestSampleSubsets:
    def test_exact_drop_counts(self):
        subsets = attribution.sample_subsets(1000, 0.01, 16, seed=1)
        for s in subsets:
            assert int(np.sum(s.weights == 0.0)) == 10
            assert int(np.sum(s.weights == 1.0)) == 990

    def test_reproducible_from_seed(self):
        a = attribution.sample_subsets(50, 0.1, 8, seed=4)
        b = attribution.sample_subsets(50, 0.1, 8, seed=4)
        for x, y in zip(a, b):
            assert np.array_equal(x.weights, y.weights)
        c = attribution.sample_subsets(50, 0.1, 8, seed=5)
        assert any(not np.array_equal(x.weights, y.weights)
                   for x, y in zip(a, c))

    def test_drop_frequency_within_binomial_bounds(self):
        n, p, m = 100, 0.1, 10_000
        subsets = attribution.sample_subsets(n, p, m, seed=6)
        drops = np.sum([s.weights == 0.0 for s in subsets], axis=0)
        freq = drops / m
        sigma = np.sqrt(p * (1 - p) / m)
        assert np.all(np.abs(freq - p) <= 3 * sigma)

    def test_degenerate_fraction_rejected(self):
        with pytest.raises(ValueError):
            attribution.sample_subsets(100, 0.001, 4, seed=0)  # floor -> 0 drops
        with pytest.raises(ValueError):
            attribution.sample_subsets(100, 0.0, 4, seed=0)


class TestGroundTruth:
    def test_full_weights_equal_center(self):
        plan, phi = small_mlp_plan()
        center = rt.model_output(plan, phi, np.ones(plan.n_examples))
        full = attribution.SubsetSample(np.ones(plan.n_examples), 0.0, 0, 0)
        out = attribution.ground_truth(plan, phi, [full])
        assert out[0] == center

    def test_empty_subset_list(self):
        plan, phi = small_mlp_plan()
        out = attribution.ground_truth_matrix(plan, [phi], [])
        assert out.shape == (0,) or out.size == 0

    def test_ridge_matches_closed_form_per_subset(self):
        plan, phi = ridge_plan(lam=0.2, n=30, dim=3, epochs=500)
        subsets = attribution.sample_subsets(30, 0.1, 4, seed=9)
        out = attribution.ground_truth(plan, phi, subsets)
        X, y = plan.dataset.features, plan.dataset.targets
        lam = plan.rule.weight_decay
        for j, s in enumerate(subsets):
            Wd = s.weights
            H = (X * Wd[:, None]).T @ X + lam * np.eye(3)
            theta = np.linalg.solve(H, X.T @ (Wd * y))
            expected = models.measure(phi, plan.model, theta)
            assert abs(out[j] - expected) <= 1e-8 * max(1.0, abs(expected))

    def test_parallel_matches_serial(self):
        plan, phi = small_mlp_plan()
        subsets = attribution.sample_subsets(plan.n_examples, 0.2, 4, seed=3)
        serial = attribution.ground_truth(plan, phi, subsets, workers=1)
        parallel = attribution.ground_truth(plan, phi, subsets, workers=2)
        assert np.array_equal(serial, parallel)

    def test_resampled_schedule_mode_runs(self):
        plan, phi = small_mlp_plan()
        subsets = attribution.sample_subsets(plan.n_examples, 0.2, 2, seed=3)
        out = attribution.ground_truth(plan, phi, subsets, resample_batches=True)
        assert out.shape == (2,)
        assert np.all(np.isfinite(out))


class TestLds:
    def test_identical_vectors(self):
        assert attribution.lds([1.0, 2.0, 3.0], [10.0, 20.0, 30.0]) == 1.0

    def test_reversed_order(self):
        assert attribution.lds([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]) == -1.0

    def test_hand_computed_example(self):
        # ranks (1,2,3,4) vs (1,3,2,4): sum d^2 = 2, rho = 1 - 12/60 = 0.8
        assert_allclose(attribution.lds([1, 2, 3, 4], [1, 3, 2, 4]), 0.8,
                        rtol=1e-15)

    def test_ties_use_average_ranks(self):
        rho = attribution.lds([1.0, 1.0, 2.0], [1.0, 2.0, 3.0])
        # ranks (1.5, 1.5, 3) vs (1, 2, 3): Pearson on those ranks
        r1 = np.array([1.5, 1.5, 3.0])
        r2 = np.array([1.0, 2.0, 3.0])
        expected = np.corrcoef(r1, r2)[0, 1]
        assert_allclose(rho, expected, rtol=1e-12)

    def test_constant_vector_is_undefined(self):
        with pytest.raises(rt.UndefinedMetricError):
            attribution.lds([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=20)
        b = rng.normal(size=20)
        base = attribution.lds(a, b)
        assert attribution.lds(np.exp(a), b) == base
        assert attribution.lds(3 * a + 5, b) == base


class TestBootstrap:
    def test_ci_brackets_point_estimate(self):
        rng = np.random.default_rng(12)
        true = rng.normal(size=40)
        pred = true + 0.3 * rng.normal(size=40)
        rho = attribution.lds(pred, true)
        ci = attribution.bootstrap_lds_ci(pred, true, num_resamples=500, seed=1)
        assert ci["low"] <= rho <= ci["high"]
        assert ci["low"] >= -1.0 and ci["high"] <= 1.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(13)
        a, b = rng.normal(size=30), rng.normal(size=30)
        c1 = attribution.bootstrap_lds_ci(a, b, seed=7)
        c2 = attribution.bootstrap_lds_ci(a, b, seed=7)
        assert c1 == c2

    def test_report_flags_undefined(self):
        report = attribution.LdsReport.build("t", "magic", 0.01,
                                             np.ones(4), np.arange(4.0))
        assert report.spearman is None
        assert "undefined" in report.undefined_reason


class TestSmoothnessProbe:
    def test_zero_epsilon_gives_zero_delta(self):
        plan, phi = small_mlp_plan(n=8, epochs=1)
        probe = attribution.smoothness_probe(plan, phi, 0, [0.0, 1e-3, 2e-3])
        assert probe.deltas[0] == 0.0

    def test_smooth_config_doubling_and_slope(self):
        plan, phi = small_mlp_plan(n=10, epochs=3)
        probe = attribution.smoothness_probe(plan, phi, 2, [1e-3, 2e-3, 4e-3])
        assert len(probe.doubling_pairs) == 2
        for _, _, _, ratio in probe.doubling_pairs:
            assert 1.8 <= ratio <= 2.2
        _, store = rt.train_recorded(plan, np.ones(plan.n_examples))
        influence, _ = rt.replay_metagradient(plan, phi, store)
        assert rel_err(probe.slope_estimate, influence.values[2]) <= 1e-3

    def test_grid_without_pairs_rejected(self):
        plan, phi = small_mlp_plan(n=8, epochs=1)
        with pytest.raises(ValueError):
            attribution.smoothness_probe(plan, phi, 0, [1e-3, 3e-3])


def _diverging_plan():
    """Unstable quadratic: the parameter error multiplies by a huge factor
    every step, overflowing after a few dozen steps."""
    ds = rt.synthetic("linear", 3, 10, 2)
    model = rt.ModelFamily("weighted-linear-regression", feature_dim=2)
    rule = rt.UpdateRule("sgd", rt.LrSchedule.constant(1e8))
    sched = rt.BatchSchedule.from_seed(0, 10, 10, 40)
    plan = rt.TrainPlan(ds, model, rule, sched)
    phi = rt.MeasurementFn("test-loss-on-example", ds.example(0))
    return plan, phi


class TestDivergenceReporting:
    def test_ground_truth_names_the_subset(self):
        plan, phi = _diverging_plan()
        subsets = attribution.sample_subsets(plan.n_examples, 0.2, 3, seed=1)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(rt.TrainingDivergedError, match="subset 0"):
                attribution.ground_truth(plan, phi, subsets)

    def test_probe_names_the_grid_point(self):
        # stable at the all-ones weighting (|1 - 4 lr| < 1) but violently
        # unstable once the single example is upweighted by a huge epsilon
        ds = rt.Dataset(np.array([[2.0]]), np.array([1.0]), "regression")
        model = rt.ModelFamily("weighted-linear-regression", feature_dim=1)
        rule = rt.UpdateRule("sgd", rt.LrSchedule.constant(0.4))
        sched = rt.BatchSchedule(tuple(np.array([0]) for _ in range(50)))
        plan = rt.TrainPlan(ds, model, rule, sched)
        phi = rt.MeasurementFn("test-loss-on-example", ds.example(0))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(rt.TrainingDivergedError, match="epsilon"):
                attribution.smoothness_probe(plan, phi, 0, [5e6, 1e7])
