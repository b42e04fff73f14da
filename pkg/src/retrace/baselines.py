"""Reference estimators: the retraining oracle, the convex closed form, and
two linearize-at-the-end baselines.

* :func:`fd_influence` is the brute-force oracle: central differences of the
  model output under 2N retrainings. It is exact up to O(h^2) truncation and
  exists to check the reverse-mode result, so it never shares code with it.
* :func:`convex_ij_influence` is the classical closed form for ridge
  regression, obtained by implicit differentiation at the exact minimizer.
* :func:`trak_lite` and :func:`grad_dot_influence` linearize around the final
  parameters only; their outputs are rank-meaningful scores, not calibrated
  influence values.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import models, training
from .errors import RetraceError, TrainingDivergedError
from .replay import InfluenceVector

# Always-on Tikhonov term for the projected Gram matrix, relative to its
# mean diagonal: deterministic, and large enough to tame rank deficiency.
TRAK_GRAM_RIDGE = 1e-8


def _fd_coordinate(args):
    plan, measurement, i, h = args
    n = plan.n_examples
    w_plus = training.ones_weights(n)
    w_plus[i] += h
    w_minus = training.ones_weights(n)
    w_minus[i] -= h
    try:
        f_plus = training.model_output(plan, measurement, w_plus)
        f_minus = training.model_output(plan, measurement, w_minus)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(
            exc.step, f"coordinate {i}: {exc}") from None
    return (f_plus - f_minus) / (2.0 * h)


def fd_influence(plan: training.TrainPlan, measurement: models.MeasurementFn,
                 step: float = 1e-4, workers: int = 1) -> InfluenceVector:
    """Central-difference influence: coordinate i costs two retrainings."""
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    n = plan.n_examples
    center = training.model_output(plan, measurement, training.ones_weights(n))
    tasks = [(plan, measurement, i, step) for i in range(n)]
    if workers <= 1:
        values = [_fd_coordinate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(_fd_coordinate, tasks))
    return InfluenceVector(np.asarray(values), center, plan.fingerprint(),
                           "", method="fd")


def _require_ridge_plan(plan: training.TrainPlan):
    if plan.model.kind != models.KIND_LINEAR:
        raise RetraceError("closed-form influence needs weighted linear regression")
    if any(len(b) != plan.dataset.n for b in plan.schedule.batches):
        raise RetraceError("closed-form influence needs full-batch training")
    if plan.rule.kind != "sgd":
        raise RetraceError("closed-form influence assumes plain gradient descent")


def convex_ij_influence(plan: training.TrainPlan,
                        measurement: models.MeasurementFn) -> InfluenceVector:
    """Implicit-differentiation influence for the ridge task.

    The ridge coefficient is the rule's weight decay: for plain gradient
    descent the decoupled decay step equals the gradient of the L2 penalty
    0.5 * lam * ||theta||^2, so the trained objective is
    sum_i w_i * l_i(theta) + 0.5 * lam * ||theta||^2 and the Hessian at the
    all-ones weighting is X^T X + lam I. Each coordinate is
    -grad_phi(theta*) . H^{-1} grad l(z_i; theta*) at the exact minimizer.
    """
    _require_ridge_plan(plan)
    X = plan.dataset.features
    y = plan.dataset.targets
    lam = plan.rule.weight_decay
    d = X.shape[1]

    if lam == 0.0 and np.linalg.matrix_rank(X) < d:
        raise RetraceError("singular Hessian: rank-deficient design with zero ridge")
    H = X.T @ X + lam * np.eye(d)
    theta_star = np.linalg.solve(H, X.T @ y)

    phi_grad = models.measure_grad(measurement, plan.model, theta_star)
    residuals = X @ theta_star - y
    q = np.linalg.solve(H, phi_grad)
    values = -residuals * (X @ q)
    center = models.measure(measurement, plan.model, theta_star)
    return InfluenceVector(values, center, plan.fingerprint(), "",
                           method="convex-ij")


def _center_params(plan, center_params):
    if center_params is None:
        return training.train(plan, training.ones_weights(plan.n_examples)).params
    return np.asarray(center_params, dtype=np.float64)


def trak_lite(plan: training.TrainPlan, measurement: models.MeasurementFn,
              projection_dim: int, seed: int, center_params=None) -> np.ndarray:
    """Single-model projected-kernel scores from the final parameters.

    Per-sample training gradients and the measurement gradient are projected
    through a seeded sign matrix; scores follow the projected-kernel form
    -phi_test^T (Phi^T Phi + lam I)^{-1} Phi^T per sample, with the
    documented relative ridge ``TRAK_GRAM_RIDGE`` on the Gram matrix. Only
    the ranking of the scores is meaningful.
    """
    if projection_dim < 1:
        raise ValueError("projection_dim must be >= 1")
    params = _center_params(plan, center_params)
    model = plan.model
    X, y = plan.dataset.features, plan.dataset.targets
    p_dim = model.param_dim

    rng = np.random.default_rng(seed)
    proj = (2.0 * rng.integers(0, 2, size=(p_dim, projection_dim)) - 1.0)
    proj /= np.sqrt(projection_dim)

    # row i of Phi is the projected gradient of sample i; each column needs
    # only grad . direction, so no per-sample gradient is materialized
    phi_rows = np.stack(
        [models.batch_grad_dots(model, params, X, y, proj[:, j])
         for j in range(projection_dim)],
        axis=1,
    )
    phi_test = proj.T @ models.measure_grad(measurement, model, params)

    gram = phi_rows.T @ phi_rows
    lam = TRAK_GRAM_RIDGE * (np.trace(gram) / projection_dim + 1.0)
    solved = np.linalg.solve(gram + lam * np.eye(projection_dim), phi_test)
    return -(phi_rows @ solved)


def grad_dot_influence(plan: training.TrainPlan, measurement: models.MeasurementFn,
                       center_params=None) -> np.ndarray:
    """Kernel baseline without any curvature: -grad l(z_i) . grad phi at the
    final parameters."""
    params = _center_params(plan, center_params)
    X, y = plan.dataset.features, plan.dataset.targets
    test_grad = models.measure_grad(measurement, plan.model, params)
    return -models.batch_grad_dots(plan.model, params, X, y, test_grad)
