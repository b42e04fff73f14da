"""Model-family primitives: exact values, finite-difference oracles, and
structural properties (linearity, Hessian symmetry, closed forms)."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

import retrace as rt
from retrace import models

from helpers import (central_diff_grad, central_diff_grad_5pt, mlp_family,
                     random_example, rel_err)

LINEAR = rt.ModelFamily("weighted-linear-regression", feature_dim=1)
LOGISTIC = rt.ModelFamily("logistic-regression", feature_dim=1)


class TestLoss:
    def test_linear_at_origin(self):
        z = rt.Example([1.0], 1.0)
        assert rt.loss(LINEAR, np.zeros(1), z) == 0.5

    def test_linear_exact_fit(self):
        z = rt.Example([1.0], 1.0)
        assert rt.loss(LINEAR, np.ones(1), z) == 0.0

    def test_logistic_uniform_prediction(self):
        z = rt.Example([1.0], 1.0)
        assert_allclose(rt.loss(LOGISTIC, np.zeros(1), z), math.log(2), rtol=1e-15)

    def test_rejects_overflow(self):
        model = rt.ModelFamily("weighted-linear-regression", feature_dim=1)
        z = rt.Example([1e200], 1.0)
        with np.errstate(over="ignore"), pytest.raises(rt.NumericalOverflowError):
            rt.loss(model, np.array([1e200]), z)


class TestGrad:
    def test_linear_at_origin(self):
        z = rt.Example([1.0], 1.0)
        assert_allclose(rt.grad(LINEAR, np.zeros(1), z), [-1.0], rtol=0)

    def test_zero_residual_gives_zero(self):
        rng = np.random.default_rng(0)
        model = rt.ModelFamily("weighted-linear-regression", feature_dim=3)
        theta = rng.normal(size=3)
        x = rng.normal(size=3)
        z = rt.Example(x, float(theta @ x))
        assert_allclose(rt.grad(model, theta, z), np.zeros(3), atol=0)

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        model = mlp_family(dim=2, hidden=(4,))
        theta = rng.normal(size=model.param_dim)
        z = random_example(rng, 2)
        fd = central_diff_grad(lambda t: rt.loss(model, t, z), theta, h=1e-5)
        assert rel_err(rt.grad(model, theta, z), fd) <= 1e-7


class TestHvp:
    def test_linear_closed_form(self):
        rng = np.random.default_rng(2)
        model = rt.ModelFamily("weighted-linear-regression", feature_dim=4)
        theta, v = rng.normal(size=4), rng.normal(size=4)
        z = random_example(rng, 4)
        # closed form (x . v) x; backends may reassociate the inner dot, so
        # agreement is at rounding level rather than bitwise
        expected = (z.features @ v) * z.features
        assert_allclose(rt.hvp(model, theta, z, v), expected, rtol=1e-13)

    def test_zero_direction(self):
        rng = np.random.default_rng(3)
        model = mlp_family()
        theta = rng.normal(size=model.param_dim)
        z = random_example(rng, 2)
        assert_allclose(rt.hvp(model, theta, z, np.zeros(model.param_dim)),
                        np.zeros(model.param_dim), atol=0)

    def test_mlp_matches_gradient_differences(self):
        rng = np.random.default_rng(4)
        model = mlp_family(dim=2, hidden=(4,))
        theta = rng.normal(size=model.param_dim)
        v = rng.normal(size=model.param_dim)
        z = random_example(rng, 2)
        h = 1e-4
        fd = (rt.grad(model, theta + h * v, z)
              - rt.grad(model, theta - h * v, z)) / (2 * h)
        assert rel_err(rt.hvp(model, theta, z, v), fd) <= 1e-5


class TestGradDot:
    def test_zero_direction(self):
        rng = np.random.default_rng(5)
        model = mlp_family()
        theta = rng.normal(size=model.param_dim)
        z = random_example(rng, 2)
        assert rt.grad_dot(model, theta, z, np.zeros(model.param_dim)) == 0.0

    def test_linear_hand_value(self):
        z = rt.Example([1.0], 1.0)
        assert rt.grad_dot(LINEAR, np.zeros(1), z, np.array([2.0])) == -2.0

    def test_equals_explicit_dot(self):
        rng = np.random.default_rng(6)
        model = mlp_family(dim=3, hidden=(5, 4))
        theta = rng.normal(size=model.param_dim)
        v = rng.normal(size=model.param_dim)
        z = random_example(rng, 3)
        expected = rt.grad(model, theta, z) @ v
        assert rel_err(rt.grad_dot(model, theta, z, v), expected) <= 1e-12


class TestMeasure:
    def test_exact_fit_measures_zero(self):
        z = rt.Example([1.0], 2.0)
        phi = rt.MeasurementFn("test-loss-on-example", z)
        theta = np.array([2.0])
        assert rt.measure(phi, LINEAR, theta) == 0.0
        assert_allclose(rt.measure_grad(phi, LINEAR, theta), [0.0], atol=0)

    def test_mean_of_singleton_equals_example(self):
        ds = rt.Dataset(np.array([[1.5]]), np.array([0.5]), "regression")
        phi_mean = rt.MeasurementFn("mean-test-loss", ds)
        phi_one = rt.MeasurementFn("test-loss-on-example", ds.example(0))
        theta = np.array([0.3])
        assert rt.measure(phi_mean, LINEAR, theta) == rt.measure(phi_one, LINEAR, theta)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        model = mlp_family(dim=2, hidden=(4,))
        ds = rt.synthetic("curved", 9, 6, 2)
        phi = rt.MeasurementFn("mean-test-loss", ds)
        theta = rng.normal(size=model.param_dim)
        fd = central_diff_grad(lambda t: rt.measure(phi, model, t), theta, h=1e-5)
        assert rel_err(rt.measure_grad(phi, model, theta), fd) <= 1e-7


def _model_instances():
    rng = np.random.default_rng(20)
    families = [
        rt.ModelFamily("weighted-linear-regression", feature_dim=3),
        rt.ModelFamily("logistic-regression", feature_dim=3),
        mlp_family(dim=3, hidden=(4,)),
        mlp_family(dim=3, hidden=(5,), task="classification"),
    ]
    for trial in range(100):
        model = families[trial % len(families)]
        theta = rng.normal(size=model.param_dim)
        z = random_example(rng, 3, classification=model.task_kind == "classification")
        yield model, theta, z, rng


class TestProperties:
    def test_grad_agrees_with_fd_over_random_instances(self):
        # the 5-point oracle resolves ~1e-12 of the gradient scale; the
        # denominator floor sits at 1e-6 of the scale, far above that
        for model, theta, z, _ in _model_instances():
            fd = central_diff_grad_5pt(lambda t: rt.loss(model, t, z), theta)
            assert rel_err(rt.grad(model, theta, z), fd, floor_scale=1e-6) <= 1e-5

    def test_hvp_agrees_with_fd_over_random_instances(self):
        for model, theta, z, rng in _model_instances():
            v = rng.normal(size=model.param_dim)
            h = 1e-4
            fd = (rt.grad(model, theta + h * v, z)
                  - rt.grad(model, theta - h * v, z)) / (2 * h)
            assert rel_err(rt.hvp(model, theta, z, v), fd, floor_scale=1e-6) <= 1e-5

    def test_hvp_linearity(self):
        rng = np.random.default_rng(21)
        model = mlp_family(dim=3, hidden=(4,))
        theta = rng.normal(size=model.param_dim)
        z = random_example(rng, 3)
        u = rng.normal(size=model.param_dim)
        v = rng.normal(size=model.param_dim)
        a, b = 1.7, -0.4
        combined = rt.hvp(model, theta, z, a * u + b * v)
        separate = a * np.asarray(rt.hvp(model, theta, z, u)) \
            + b * np.asarray(rt.hvp(model, theta, z, v))
        assert rel_err(combined, separate) <= 1e-13

    def test_hvp_operator_symmetry(self):
        for model, theta, z, rng in _model_instances():
            u = rng.normal(size=model.param_dim)
            v = rng.normal(size=model.param_dim)
            left = u @ rt.hvp(model, theta, z, v)
            right = v @ rt.hvp(model, theta, z, u)
            assert abs(left - right) <= 1e-10 * max(1.0, abs(left))

    def test_linear_closed_forms_exact(self):
        rng = np.random.default_rng(22)
        model = rt.ModelFamily("weighted-linear-regression", feature_dim=5)
        for _ in range(20):
            theta = rng.normal(size=5)
            z = random_example(rng, 5)
            v = rng.normal(size=5)
            residual = theta @ z.features - z.target
            assert_allclose(rt.grad(model, theta, z), residual * z.features,
                            rtol=1e-13, atol=1e-300)
            assert_allclose(rt.hvp(model, theta, z, v),
                            (z.features @ v) * z.features, rtol=1e-13,
                            atol=1e-300)


class TestBatchOps:
    def test_batch_matches_per_sample_sum(self):
        rng = np.random.default_rng(23)
        model = mlp_family(dim=3, hidden=(4,))
        theta = rng.normal(size=model.param_dim)
        X = rng.normal(size=(6, 3))
        y = rng.normal(size=6)
        w = rng.uniform(0.2, 2.0, size=6)
        v = rng.normal(size=model.param_dim)
        per_grad = sum(w[i] * rt.grad(model, theta, rt.Example(X[i], y[i]))
                       for i in range(6))
        assert rel_err(models.batch_weighted_grad(model, theta, X, y, w),
                       per_grad) <= 1e-13
        per_hvp = sum(w[i] * rt.hvp(model, theta, rt.Example(X[i], y[i]), v)
                      for i in range(6))
        assert rel_err(models.batch_hvp_sum(model, theta, X, y, v, w),
                       per_hvp) <= 1e-13
        dots = models.batch_grad_dots(model, theta, X, y, v)
        for i in range(6):
            assert rel_err(dots[i],
                           rt.grad_dot(model, theta, rt.Example(X[i], y[i]), v)) <= 1e-13


class TestModelFamily:
    def test_param_dim(self):
        assert rt.ModelFamily("weighted-linear-regression", 7).param_dim == 7
        model = mlp_family(dim=2, hidden=(8,))
        assert model.param_dim == 8 * 3 + 1 * 9  # (2+1)*8 + (8+1)*1

    def test_rejects_mismatched_params(self):
        with pytest.raises(ValueError):
            rt.loss(LINEAR, np.zeros(2), rt.Example([1.0], 1.0))

    def test_mlp_needs_task(self):
        with pytest.raises(ValueError):
            rt.ModelFamily("mlp", feature_dim=2, hidden=(4,))

    def test_init_is_seeded(self):
        model = mlp_family()
        assert np.array_equal(model.init_params(5), model.init_params(5))
        assert not np.array_equal(model.init_params(5), model.init_params(6))


class TestThreadSafety:
    def test_concurrent_calls_give_identical_results(self):
        # the primitives are pure functions: hammering them from a thread
        # pool must reproduce the serial results exactly
        from concurrent.futures import ThreadPoolExecutor

        rng = np.random.default_rng(30)
        model = mlp_family(dim=3, hidden=(6,))
        theta = rng.normal(size=model.param_dim)
        X = rng.normal(size=(16, 3))
        y = rng.normal(size=16)
        v = rng.normal(size=model.param_dim)
        w = rng.uniform(0.5, 1.5, size=16)

        expected = models.batch_hvp_sum(model, theta, X, y, v, w)
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(
                lambda _: models.batch_hvp_sum(model, theta, X, y, v, w),
                range(64)))
        for r in results:
            assert np.array_equal(r, expected)
