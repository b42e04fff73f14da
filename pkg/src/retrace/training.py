"""Deterministic training: fixed init, fixed batch order, weighted gradients.

A :class:`TrainPlan` pins every degree of freedom except the data weights w,
so the map w -> final state is a pure function: two runs with the same plan
and w are bit-identical. The per-step gradient is the *weighted sum*
g_t = sum_{i in B_t} w_i * grad l(z_i), never a mean; batch-size
normalization, when wanted, belongs in the learning rate.

The batch schedule is derived from (seed, N, batch_size, epochs) alone and
is independent of w: an example with w_i = 0 still occupies its slots and
contributes nothing, which is what keeps the output differentiable in w.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import checkpoints, models, optim
from .datasets import Dataset
from .errors import NumericalOverflowError, TrainingDivergedError

@dataclass(frozen=True)
class BatchSchedule:
    """Minibatch index lists B_0 .. B_{T-1}, a pure function of its recipe."""

    batches: tuple
    seed: int = -1
    batch_size: int = -1
    epochs: int = -1

    def __post_init__(self):
        batches = tuple(np.ascontiguousarray(b, dtype=np.int64) for b in self.batches)
        for b in batches:
            if b.ndim != 1 or len(b) == 0:
                raise ValueError("each batch must be a non-empty 1-d index list")
        object.__setattr__(self, "batches", batches)

    def __len__(self) -> int:
        return len(self.batches)

    @classmethod
    def from_seed(cls, seed: int, n: int, batch_size: int, epochs: int) -> "BatchSchedule":
        """Seeded per-epoch shuffles chopped into batches; a short final batch
        per epoch is kept rather than dropped."""
        if batch_size < 1 or epochs < 0 or n < 1:
            raise ValueError("need batch_size >= 1, epochs >= 0, n >= 1")
        rng = np.random.default_rng(seed)
        batches = []
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                batches.append(order[lo:lo + batch_size])
        return cls(tuple(batches), seed=seed, batch_size=batch_size, epochs=epochs)

    def max_index(self) -> int:
        return max(int(b.max()) for b in self.batches) if self.batches else -1

    def describe(self) -> dict:
        if self.seed >= 0:
            return {"seed": self.seed, "batch_size": self.batch_size,
                    "epochs": self.epochs, "steps": len(self)}
        digest = hashlib.sha256()
        for b in self.batches:
            digest.update(b.tobytes())
        return {"explicit_digest": digest.hexdigest(), "steps": len(self)}


@dataclass(frozen=True)
class TrainPlan:
    dataset: Dataset
    model: models.ModelFamily
    rule: optim.UpdateRule
    schedule: BatchSchedule
    init_seed: int = 0

    def __post_init__(self):
        if self.model.feature_dim != self.dataset.feature_dim:
            raise ValueError("model feature_dim does not match the dataset")
        if self.model.task_kind != self.dataset.task_kind:
            raise ValueError(
                f"model task {self.model.task_kind!r} does not match "
                f"dataset task {self.dataset.task_kind!r}"
            )
        if self.schedule.max_index() >= self.dataset.n:
            raise ValueError("schedule indexes past the end of the dataset")

    @property
    def total_steps(self) -> int:
        return len(self.schedule)

    @property
    def n_examples(self) -> int:
        return self.dataset.n

    def initial_state(self) -> optim.OptimizerState:
        return optim.initial_state(self.rule, self.model.init_params(self.init_seed))

    def describe(self) -> dict:
        ds = self.dataset
        return {
            "dataset": {
                "source": ds.source,
                "n": ds.n,
                "feature_dim": ds.feature_dim,
                "task_kind": ds.task_kind,
                "digest": hashlib.sha256(
                    ds.features.tobytes() + ds.targets.tobytes()
                ).hexdigest(),
            },
            "model": self.model.describe(),
            "rule": self.rule.describe(),
            "schedule": self.schedule.describe(),
            "init_seed": self.init_seed,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def ones_weights(n: int) -> np.ndarray:
    """The reference point 1_N at which the influence function is defined."""
    return np.ones(n)


def check_weights(plan: TrainPlan, w) -> np.ndarray:
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape != (plan.n_examples,):
        raise ValueError(f"data weights must have shape ({plan.n_examples},)")
    if not np.all(np.isfinite(w)):
        raise ValueError("data weights must be finite")
    return w


def weighted_grad(plan: TrainPlan, state: optim.OptimizerState, w: np.ndarray,
                  t: int) -> np.ndarray:
    """g_t(s_t, w) = sum_{i in B_t} w_i * grad l(z_i; s_t)."""
    batch = plan.schedule.batches[t]
    X = plan.dataset.features[batch]
    y = plan.dataset.targets[batch]
    return models.batch_weighted_grad(plan.model, state.params, X, y, w[batch])


def train_step(plan: TrainPlan, state: optim.OptimizerState, w: np.ndarray,
               t: int) -> optim.OptimizerState:
    try:
        g = weighted_grad(plan, state, w, t)
    except NumericalOverflowError:
        raise TrainingDivergedError(t, f"non-finite gradient at step {t}") from None
    return optim.apply(plan.rule, state, g, plan.total_steps)


def train(plan: TrainPlan, w) -> optim.OptimizerState:
    """Run the full plan; deterministic, bit-identical across repeats."""
    w = check_weights(plan, w)
    state = plan.initial_state()
    for t in range(plan.total_steps):
        state = train_step(plan, state, w, t)
    return state


def train_recorded(plan: TrainPlan, w, policy: str = "logarithmic",
                   spill_dir=None) -> tuple:
    """Train while populating a checkpoint store under the retention policy.

    Returns (final state, store). The store always retains step 0 and the
    final state; which interior states it keeps is the policy's business.
    """
    w = check_weights(plan, w)
    store = checkpoints.CheckpointStore(plan.total_steps,
                                        checkpoints.policy_by_name(policy),
                                        spill_dir=spill_dir)
    state = plan.initial_state()
    store.record(0, state)
    for t in range(plan.total_steps):
        state = train_step(plan, state, w, t)
        store.record(t + 1, state)
    return state, store


def model_output(plan: TrainPlan, measurement: models.MeasurementFn, w) -> float:
    """f(w) = measurement applied to the parameters trained under w."""
    final = train(plan, w)
    return models.measure(measurement, plan.model, final.params)
