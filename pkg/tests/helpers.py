"""Shared test fixtures and independent numerical oracles.

The finite-difference helpers here are the oracles for analytic gradients,
HVPs, and optimizer adjoints; they deliberately share no code with the
library paths they check.
"""

import numpy as np

import retrace as rt
from retrace import optim


def central_diff_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return out


def central_diff_grad_5pt(f, x, h=1e-4):
    """Fourth-order central differences; resolves coordinates down to about
    1e-12 of the function scale, where the 3-point stencil stops near 1e-10."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) \
            / (12.0 * h)
    return out


def state_to_vec(state):
    return np.concatenate([state.params, *state.moments]) if state.moments \
        else state.params.copy()


def vec_to_state(vec, template):
    p = len(template.params)
    params = vec[:p]
    moments = tuple(vec[p * (k + 1):p * (k + 2)]
                    for k in range(len(template.moments)))
    return optim.OptimizerState(params, moments, template.step_index)


def adjoint_to_vec(adj):
    return np.concatenate([adj.params, *adj.moments]) if adj.moments \
        else adj.params.copy()


def fd_vjp_state(rule, state, g, delta_next, total_steps, h=1e-6):
    """FD oracle for the state adjoint: d/ds of <apply(s, g), delta_next>."""
    d_vec = adjoint_to_vec(delta_next)

    def inner(s_vec):
        s = vec_to_state(s_vec, state)
        return float(state_to_vec(optim.apply(rule, s, g, total_steps)) @ d_vec)

    return central_diff_grad(inner, state_to_vec(state), h=h)


def fd_vjp_grad(rule, state, g, delta_next, total_steps, h=1e-6):
    """FD oracle for the gradient adjoint: d/dg of <apply(s, g), delta_next>."""
    d_vec = adjoint_to_vec(delta_next)

    def inner(g_vec):
        return float(state_to_vec(optim.apply(rule, state, g_vec, total_steps)) @ d_vec)

    return central_diff_grad(inner, np.asarray(g, dtype=np.float64), h=h)


def rel_err(actual, expected, floor_scale=1e-12):
    """Max relative error with a scale-aware floor on the denominator."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = np.max(np.abs(expected)) if expected.size else 0.0
    denom = np.maximum(np.abs(expected), floor_scale * max(scale, 1e-300))
    return float(np.max(np.abs(actual - expected) / denom))


def dataset_regression(seed=0, n=12, dim=3):
    return rt.synthetic("linear", seed, n, dim)


def dataset_classification(seed=0, n=12, dim=3):
    return rt.synthetic("blobs", seed, n, dim)


def random_example(rng, dim, classification=False):
    target = float(rng.integers(0, 2)) if classification else float(rng.normal())
    return rt.Example(rng.normal(size=dim), target)


def mlp_family(dim=2, hidden=(4,), task="regression"):
    return rt.ModelFamily("mlp", feature_dim=dim, hidden=hidden, task_kind=task)


def small_mlp_plan(seed=3, n=16, dim=2, hidden=(4,), rule=None, batch_size=5,
                   epochs=3, init_seed=7):
    """A small smooth regression plan used across replay tests."""
    train, test = rt.synthetic_split("curved", seed, n, 4, dim)
    model = mlp_family(dim=dim, hidden=hidden)
    rule = rule or rt.UpdateRule("sgd", rt.LrSchedule.constant(0.1))
    sched = rt.BatchSchedule.from_seed(11, train.n, batch_size=batch_size,
                                       epochs=epochs)
    plan = rt.TrainPlan(train, model, rule, sched, init_seed=init_seed)
    phi = rt.MeasurementFn("test-loss-on-example", test.example(0))
    return plan, phi


def ridge_plan(lam=0.1, n=40, dim=4, epochs=300, seed=7, lr=None):
    """Full-batch gradient descent on a ridge task, run well past convergence."""
    train, test = rt.synthetic_split("linear", seed, n, 4, dim)
    model = rt.ModelFamily("weighted-linear-regression", feature_dim=dim)
    if lr is None:
        H = train.features.T @ train.features + lam * np.eye(dim)
        lr = 1.8 / float(np.linalg.eigvalsh(H)[-1])
    rule = rt.UpdateRule("sgd", rt.LrSchedule.constant(lr), weight_decay=lam)
    sched = rt.BatchSchedule.from_seed(0, train.n, batch_size=train.n,
                                       epochs=epochs)
    plan = rt.TrainPlan(train, model, rule, sched)
    phi = rt.MeasurementFn("test-loss-on-example", test.example(0))
    return plan, phi


def closed_form_ridge(plan):
    """Weighted least squares minimizer at w = 1 with the plan's ridge term."""
    X, y = plan.dataset.features, plan.dataset.targets
    lam = plan.rule.weight_decay
    H = X.T @ X + lam * np.eye(X.shape[1])
    return np.linalg.solve(H, X.T @ y)
