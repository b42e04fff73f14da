"""Model families and their differentiable per-sample primitives.

Every family supplies four primitives on a single example z = (x, y):

* ``loss``      l(z; theta)
* ``grad``      the exact parameter gradient of the loss
* ``hvp``       H(z; theta) v, the Hessian-vector product
* ``grad_dot``  grad . v without materializing the gradient

plus batch-fused variants used by the training and replay loops. All
second-order quantities are analytic (closed forms for the linear families,
forward-over-reverse composition for the MLP); finite differences appear
only in tests. Non-finite outputs are rejected, never clamped.

Families:

* ``weighted-linear-regression``: l = 0.5 (theta.x - y)^2, no bias term.
* ``logistic-regression``: binary labels, single logit theta.x.
* ``mlp``: tanh hidden layers (twice differentiable with bounded second
  derivative, which the replay adjoint requires), linear scalar output.
  Regression uses the squared head; 2-class tasks use the sigmoid
  cross-entropy head on the logit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ._reference import HEAD_BINARY_CE, HEAD_SQUARED
from .backend import kernels
from .datasets import TASK_CLASSIFICATION, TASK_REGRESSION, Dataset, Example
from .errors import NumericalOverflowError

KIND_LINEAR = "weighted-linear-regression"
KIND_LOGISTIC = "logistic-regression"
KIND_MLP = "mlp"

# MLP weight initialization: Glorot-normal, std = sqrt(2 / (fan_in + fan_out)),
# biases zero. Linear families initialize at the origin (seed unused).
_GLOROT_GAIN = 2.0


@dataclass(frozen=True)
class ModelFamily:
    kind: str
    feature_dim: int
    hidden: tuple = field(default=())
    task_kind: str = ""

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        hidden = tuple(int(h) for h in self.hidden)
        object.__setattr__(self, "hidden", hidden)
        if self.kind == KIND_LINEAR:
            task = TASK_REGRESSION
        elif self.kind == KIND_LOGISTIC:
            task = TASK_CLASSIFICATION
        elif self.kind == KIND_MLP:
            if not hidden:
                raise ValueError("mlp needs at least one hidden layer")
            if any(h < 1 for h in hidden):
                raise ValueError("hidden widths must be >= 1")
            task = self.task_kind
            if task not in (TASK_REGRESSION, TASK_CLASSIFICATION):
                raise ValueError("mlp requires task_kind regression or classification")
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "task_kind", task)
        if self.kind != KIND_MLP and self.hidden:
            raise ValueError(f"{self.kind} takes no hidden widths")

    @property
    def widths(self) -> np.ndarray:
        return np.asarray((self.feature_dim, *self.hidden, 1), dtype=np.int64)

    @property
    def param_dim(self) -> int:
        if self.kind != KIND_MLP:
            return self.feature_dim
        widths = self.widths
        return int(np.sum(widths[1:] * (widths[:-1] + 1)))

    @property
    def head(self) -> int:
        return HEAD_SQUARED if self.task_kind == TASK_REGRESSION else HEAD_BINARY_CE

    def init_params(self, seed: int) -> np.ndarray:
        if self.kind != KIND_MLP:
            return np.zeros(self.feature_dim)
        rng = np.random.default_rng(seed)
        widths = self.widths
        parts = []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            std = np.sqrt(_GLOROT_GAIN / float(n_in + n_out))
            parts.append(std * rng.normal(size=(int(n_out), int(n_in))).ravel())
            parts.append(np.zeros(int(n_out)))
        return np.concatenate(parts)

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "feature_dim": self.feature_dim,
            "hidden": list(self.hidden),
            "task_kind": self.task_kind,
        }


def _check_params(model: ModelFamily, params: np.ndarray) -> np.ndarray:
    params = np.ascontiguousarray(params, dtype=np.float64)
    if params.shape != (model.param_dim,):
        raise ValueError(
            f"params length {params.shape} does not match param_dim {model.param_dim}"
        )
    return params


def _check_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NumericalOverflowError(f"non-finite {what}")
    return value


def _as_batch(X, y, v=None, w=None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    out = [X, y]
    if v is not None:
        out.append(np.ascontiguousarray(v, dtype=np.float64))
    if w is not None:
        out.append(np.ascontiguousarray(w, dtype=np.float64))
    return out


# ----------------------------------------------------------------------
# batch-fused primitives (one call per minibatch)
# ----------------------------------------------------------------------

def batch_losses(model, params, X, y) -> np.ndarray:
    params = _check_params(model, params)
    X, y = _as_batch(X, y)
    if model.kind == KIND_MLP:
        out = kernels.mlp_losses(params, model.widths, model.head, X, y)
    else:
        out = kernels.glm_losses(params, X, y, model.head)
    return _check_finite(out, "loss")


def batch_weighted_grad(model, params, X, y, w) -> np.ndarray:
    """Sum over the batch of w_i * grad(z_i), reduced in a fixed order."""
    params = _check_params(model, params)
    X, y, w = _as_batch(X, y, w=w)
    if model.kind == KIND_MLP:
        out = kernels.mlp_weighted_grad(params, model.widths, model.head, X, y, w)
    else:
        out = kernels.glm_weighted_grad(params, X, y, w, model.head)
    return _check_finite(out, "gradient")


def batch_grad_dots(model, params, X, y, v) -> np.ndarray:
    """Per-sample grad(z_i) . v, computed by a forward tangent sweep."""
    params = _check_params(model, params)
    X, y, v = _as_batch(X, y, v=v)
    if model.kind == KIND_MLP:
        out = kernels.mlp_grad_dots(params, model.widths, model.head, X, y, v)
    else:
        out = kernels.glm_grad_dots(params, X, y, v, model.head)
    return _check_finite(out, "gradient dot")


def batch_hvp_sum(model, params, X, y, v, w) -> np.ndarray:
    """Sum over the batch of w_i * H(z_i) v (forward-over-reverse for the MLP)."""
    params = _check_params(model, params)
    X, y, v, w = _as_batch(X, y, v=v, w=w)
    if model.kind == KIND_MLP:
        out = kernels.mlp_hvp_sum(params, model.widths, model.head, X, y, v, w)
    else:
        out = kernels.glm_hvp_sum(params, X, y, v, w, model.head)
    return _check_finite(out, "hvp")


# ----------------------------------------------------------------------
# per-sample operations
# ----------------------------------------------------------------------

def _single(example: Example):
    return example.features[None, :], np.array([example.target])


def loss(model, params, example: Example) -> float:
    X, y = _single(example)
    return float(batch_losses(model, params, X, y)[0])


def grad(model, params, example: Example) -> np.ndarray:
    X, y = _single(example)
    return batch_weighted_grad(model, params, X, y, np.ones(1))


def hvp(model, params, example: Example, v) -> np.ndarray:
    X, y = _single(example)
    return batch_hvp_sum(model, params, X, y, v, np.ones(1))


def grad_dot(model, params, example: Example, v) -> float:
    X, y = _single(example)
    return float(batch_grad_dots(model, params, X, y, v)[0])


# ----------------------------------------------------------------------
# measurement functions
# ----------------------------------------------------------------------

MEASURE_EXAMPLE = "test-loss-on-example"
MEASURE_MEAN = "mean-test-loss"


@dataclass(frozen=True)
class MeasurementFn:
    """A deterministic scalar readout of trained parameters.

    ``scale`` multiplies the measurement (and therefore its gradient and the
    influence vector); it exists so that the linearity of the whole reverse
    pass in the measurement can be exercised directly.
    """

    kind: str
    payload: object
    scale: float = 1.0

    def __post_init__(self):
        if self.kind == MEASURE_EXAMPLE:
            if not isinstance(self.payload, Example):
                raise ValueError("test-loss-on-example needs an Example payload")
        elif self.kind == MEASURE_MEAN:
            if not isinstance(self.payload, Dataset):
                raise ValueError("mean-test-loss needs a Dataset payload")
        else:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if not np.isfinite(self.scale):
            raise ValueError("scale must be finite")

    def _arrays(self):
        if self.kind == MEASURE_EXAMPLE:
            X, y = _single(self.payload)
        else:
            X, y = self.payload.features, self.payload.targets
        return X, y

    def describe(self) -> dict:
        X, y = self._arrays()
        return {
            "kind": self.kind,
            "scale": self.scale,
            "digest": hashlib.sha256(X.tobytes() + y.tobytes()).hexdigest(),
        }


def measure(m: MeasurementFn, model: ModelFamily, params) -> float:
    X, y = m._arrays()
    values = batch_losses(model, params, X, y)
    return float(m.scale * values.mean())


def measure_grad(m: MeasurementFn, model: ModelFamily, params) -> np.ndarray:
    X, y = m._arrays()
    w = np.full(X.shape[0], m.scale / X.shape[0])
    return batch_weighted_grad(model, params, X, y, w)
