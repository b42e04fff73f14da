"""Predictive layer: Taylor estimates, retraining ground truth, rank scores.

The estimator is affine in the data weights,

    prediction(w) = center + influence . (w - 1_N),

so it is exact at the center by construction. Its quality is scored by the
Spearman correlation between predicted and retrained outputs over sampled
binary subsets (average ranks for ties; a correlation over a constant
vector is *undefined* and reported as such, never coerced to zero).
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import models, training
from .errors import TrainingDivergedError, UndefinedMetricError
from .replay import InfluenceVector


@dataclass(frozen=True)
class TaylorPredictor:
    influence: np.ndarray
    center_output: float

    @classmethod
    def from_influence(cls, iv: InfluenceVector) -> "TaylorPredictor":
        return cls(np.asarray(iv.values, dtype=np.float64), iv.center_output)

    @classmethod
    def from_scores(cls, scores: np.ndarray, center_output: float) -> "TaylorPredictor":
        return cls(np.asarray(scores, dtype=np.float64), float(center_output))

    def predict(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != self.influence.shape:
            raise ValueError("weight vector length does not match the influence")
        return float(self.center_output + self.influence @ (w - 1.0))

    def predict_many(self, weight_rows) -> np.ndarray:
        return np.array([self.predict(w) for w in weight_rows])


@dataclass(frozen=True)
class SubsetSample:
    """A binary weighting with exactly floor(p * N) zeros."""

    weights: np.ndarray
    drop_fraction: float
    seed: int
    index: int

    @property
    def dropped(self) -> np.ndarray:
        return np.flatnonzero(self.weights == 0.0)


def sample_subsets(n_examples: int, drop_fraction: float, num_subsets: int,
                   seed: int) -> list:
    """Uniform fixed-size drop sets, reproducible from the seed."""
    k = int(np.floor(drop_fraction * n_examples))
    if not 0.0 < drop_fraction < 1.0 or k < 1:
        raise ValueError(
            f"drop fraction {drop_fraction} drops {k} of {n_examples} examples; "
            "need at least one"
        )
    rng = np.random.default_rng(seed)
    subsets = []
    for j in range(num_subsets):
        w = np.ones(n_examples)
        w[rng.choice(n_examples, size=k, replace=False)] = 0.0
        subsets.append(SubsetSample(w, drop_fraction, seed, j))
    return subsets


def _subset_outputs(args):
    plan, measurements, weights, subset_index, resample_seed = args
    if resample_seed is not None:
        plan = _resampled_plan(plan, weights, resample_seed)
    try:
        final = training.train(plan, weights)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(
            exc.step, f"subset {subset_index}: {exc}") from None
    return [models.measure(m, plan.model, final.params) for m in measurements]


def _resampled_plan(plan: training.TrainPlan, weights: np.ndarray,
                    seed: int) -> training.TrainPlan:
    """Sensitivity mode: rebuild the batch schedule over surviving indices
    instead of letting dropped examples ride along with weight zero."""
    sched = plan.schedule
    if sched.seed < 0:
        raise ValueError("resampling requires a seed-derived batch schedule")
    surviving = np.flatnonzero(weights > 0.0)
    inner = training.BatchSchedule.from_seed(seed, len(surviving),
                                             sched.batch_size, sched.epochs)
    remapped = tuple(surviving[b] for b in inner.batches)
    return dataclasses.replace(plan, schedule=training.BatchSchedule(remapped))


def ground_truth_matrix(plan: training.TrainPlan, measurements, subsets,
                        workers: int = 1, resample_batches: bool = False) -> np.ndarray:
    """Retrain once per subset; returns outputs with shape (subsets, measurements).

    Rows are ordered by subset index regardless of worker completion order.
    By default every retraining reuses the plan's batch schedule over the
    full index range (dropped examples contribute nothing); pass
    ``resample_batches=True`` for the schedule-resampling sensitivity mode.
    """
    tasks = [
        (plan, list(measurements), s.weights, s.index,
         (1_000_003 * s.index + s.seed) if resample_batches else None)
        for s in subsets
    ]
    if workers <= 1:
        rows = [_subset_outputs(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_subset_outputs, tasks))
    return np.asarray(rows, dtype=np.float64)


def ground_truth(plan: training.TrainPlan, measurement, subsets,
                 workers: int = 1, resample_batches: bool = False) -> np.ndarray:
    return ground_truth_matrix(plan, [measurement], subsets, workers=workers,
                               resample_batches=resample_batches)[:, 0]


def lds(predicted, true_values) -> float:
    """Spearman rank correlation with average ranks for ties."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true_values = np.asarray(true_values, dtype=np.float64)
    if predicted.shape != true_values.shape or predicted.ndim != 1:
        raise ValueError("predicted and true vectors must share a 1-d shape")
    if len(predicted) < 2:
        raise ValueError("need at least two subsets to correlate")
    r_pred = rankdata(predicted)
    r_true = rankdata(true_values)
    if np.ptp(r_pred) == 0.0 or np.ptp(r_true) == 0.0:
        raise UndefinedMetricError("rank correlation undefined: zero rank variance")
    r_pred = r_pred - r_pred.mean()
    r_true = r_true - r_true.mean()
    return float((r_pred @ r_true)
                 / np.sqrt((r_pred @ r_pred) * (r_true @ r_true)))


def bootstrap_lds_ci(predicted, true_values, num_resamples: int = 1000,
                     seed: int = 0, alpha: float = 0.05) -> dict:
    """Percentile bootstrap over subset pairs. Resamples whose rank
    correlation is undefined (constant resample) are skipped and counted."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true_values = np.asarray(true_values, dtype=np.float64)
    m = len(predicted)
    rng = np.random.default_rng(seed)
    stats = []
    skipped = 0
    for _ in range(num_resamples):
        idx = rng.integers(0, m, size=m)
        try:
            stats.append(lds(predicted[idx], true_values[idx]))
        except UndefinedMetricError:
            skipped += 1
    if not stats:
        raise UndefinedMetricError("every bootstrap resample was degenerate")
    lo, hi = np.percentile(stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return {"low": float(lo), "high": float(hi), "skipped": skipped,
            "resamples": num_resamples}


@dataclass
class LdsReport:
    task_id: str
    method: str
    drop_fraction: float
    num_subsets: int
    predicted: np.ndarray
    true_values: np.ndarray
    spearman: float | None
    ci_low: float | None
    ci_high: float | None
    undefined_reason: str = ""

    @classmethod
    def build(cls, task_id: str, method: str, drop_fraction: float,
              predicted, true_values, bootstrap_seed: int = 0,
              num_resamples: int = 1000) -> "LdsReport":
        predicted = np.asarray(predicted, dtype=np.float64)
        true_values = np.asarray(true_values, dtype=np.float64)
        try:
            rho = lds(predicted, true_values)
            ci = bootstrap_lds_ci(predicted, true_values, seed=bootstrap_seed,
                                  num_resamples=num_resamples)
            return cls(task_id, method, drop_fraction, len(predicted), predicted,
                       true_values, rho, ci["low"], ci["high"])
        except UndefinedMetricError as exc:
            return cls(task_id, method, drop_fraction, len(predicted), predicted,
                       true_values, None, None, None, undefined_reason=str(exc))


@dataclass
class SmoothnessProbe:
    """The response of the model output to upweighting one example."""

    example_index: int
    epsilons: np.ndarray
    deltas: np.ndarray
    center_output: float
    doubling_pairs: list  # (eps, delta(eps), delta(2 eps), ratio)
    slope_estimate: float | None


def smoothness_probe(plan: training.TrainPlan, measurement, example_index: int,
                     epsilons) -> SmoothnessProbe:
    """Measure delta(eps) = f(1 + eps e_i) - f(1) by actual retraining.

    The grid must contain at least one (eps, 2 eps) pair; the local slope is
    extrapolated from the smallest pair by Richardson (2 s(eps) - s(2 eps)
    with s(e) = delta(e) / e), which cancels the quadratic term.
    """
    eps = np.asarray(sorted(float(e) for e in epsilons), dtype=np.float64)
    if len(eps) == 0 or np.any(~np.isfinite(eps)):
        raise ValueError("need a finite, non-empty epsilon grid")
    n = plan.n_examples
    if not 0 <= example_index < n:
        raise ValueError("example index out of range")

    center = training.model_output(plan, measurement, training.ones_weights(n))
    deltas = np.empty_like(eps)
    for j, e in enumerate(eps):
        if e == 0.0:
            deltas[j] = 0.0
            continue
        w = training.ones_weights(n)
        w[example_index] += e
        try:
            deltas[j] = training.model_output(plan, measurement, w) - center
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(
                exc.step, f"epsilon {e:g}: {exc}") from None

    by_eps = {float(e): float(d) for e, d in zip(eps, deltas)}
    pairs = []
    for e in eps:
        if e <= 0.0:
            continue
        twice = 2.0 * e
        match = [v for v in by_eps if np.isclose(v, twice, rtol=1e-9, atol=0.0)]
        if match:
            d1, d2 = by_eps[float(e)], by_eps[match[0]]
            ratio = d2 / d1 if d1 != 0.0 else np.nan
            pairs.append((float(e), d1, d2, float(ratio)))
    if not pairs:
        raise ValueError("epsilon grid contains no (eps, 2*eps) pair")

    e0, d1, d2, _ = pairs[0]
    slope = 2.0 * (d1 / e0) - d2 / (2.0 * e0)
    return SmoothnessProbe(example_index, eps, deltas, center, pairs, float(slope))
