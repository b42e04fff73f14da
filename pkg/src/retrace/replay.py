"""Reverse pass over the training trajectory: the exact influence function.

The model output f(w) = measurement(train(plan, w)) is differentiated at
w = 1_N by propagating a state adjoint backwards through all T steps:

* the adjoint starts as the measurement gradient on the parameter block of
  the final state (moments carry zero adjoint);
* at step t, with the state s_t in hand, the adjoint of the step with
  respect to the aggregated gradient g_t yields a vector u_t; each batch
  member contributes grad l(z_i; s_t) . u_t to its influence entry, and the
  dependence of g_t on the parameters routes sum_i H(z_i) u_t back into the
  parameter adjoint alongside the optimizer's own state adjoint.

States are served by a checkpoint store. Steps whose states were not
retained are rematerialized by replaying forward from the nearest retained
ancestor, recursively over binary segments, so a pass touches at most
O(log T) live states while spending at most T * ceil(log2 T) + T recompute
steps. Every rematerialized state is bit-identical to the one the forward
pass produced, so the influence vector does not depend on the retention
policy, bit for bit.

Influence contributions are summed in descending step order with plain
float64 addition; ``compensated=True`` switches to Kahan summation for very
long runs (batches must not repeat an index within a step in that mode).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from . import models, optim, training
from .checkpoints import CheckpointStore
from .errors import (BudgetViolationError, CheckpointMissingError,
                     NonFiniteAdjointError, NumericalOverflowError)

# Documented constant for the live-state audit: a pass may hold at most
# LIVE_STATE_CONSTANT * ceil(log2 T) states. The recursive schedule needs
# about log2(T) + 2; the headroom keeps the bound insensitive to edge cases.
LIVE_STATE_CONSTANT = 4


@dataclass
class InfluenceVector:
    """The gradient of the model output with respect to the data weights,
    evaluated at the all-ones weighting."""

    values: np.ndarray
    center_output: float
    plan_fingerprint: str
    measurement_fingerprint: str
    method: str = "magic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass
class ReplayBudget:
    """Cost counters for one reverse pass.

    ``recompute_steps_total`` counts forward training steps replayed for
    rematerialization only; the cost of the reverse chain itself is reported
    as wall time (``reverse_seconds``) and not audited, since the cost claim
    being audited is denominated in training steps.
    """

    total_steps: int
    forward_steps_total: int = 0
    recompute_steps_total: int = 0
    peak_live_states: int = 0
    reverse_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "forward_steps_total": self.forward_steps_total,
            "recompute_steps_total": self.recompute_steps_total,
            "peak_live_states": self.peak_live_states,
            "reverse_seconds": self.reverse_seconds,
        }


def ceil_log2(n: int) -> int:
    return (n - 1).bit_length() if n >= 1 else 0


class _LiveStates:
    """Per-pass view over a store: anchors are read without mutation, local
    rematerializations live here, and both count toward the live watermark."""

    def __init__(self, store: CheckpointStore):
        self.store = store
        self.anchors = set(store.retained_steps())
        self.consumed = set()
        self.local = {}
        self.live = len(self.anchors)
        self.peak = self.live
        self.recompute_steps = 0

    def has(self, t: int) -> bool:
        return t in self.local or (t in self.anchors and t not in self.consumed)

    def get(self, t: int) -> optim.OptimizerState:
        if t in self.local:
            return self.local[t]
        if t in self.anchors and t not in self.consumed:
            return self.store.get(t)
        raise CheckpointMissingError(t)

    def put(self, t: int, state: optim.OptimizerState) -> None:
        self.local[t] = state
        self.live += 1
        self.peak = max(self.peak, self.live)

    def release(self, t: int) -> None:
        if t in self.local:
            del self.local[t]
            self.live -= 1
        elif t in self.anchors and t not in self.consumed:
            self.consumed.add(t)
            self.live -= 1


def _reverse_segment(live: _LiveStates, lo: int, hi: int, step_fn, on_step) -> None:
    """Visit steps hi-1 .. lo in order, given that the state at lo is live."""
    if hi - lo == 1:
        on_step(lo, live.get(lo))
        live.release(lo)
        return
    mid = (lo + hi) // 2
    if not live.has(mid):
        state = live.get(lo)
        for k in range(lo, mid):
            state = step_fn(state, k)
        live.recompute_steps += mid - lo
        live.put(mid, state)
    _reverse_segment(live, mid, hi, step_fn, on_step)
    _reverse_segment(live, lo, mid, step_fn, on_step)


class _Accumulator:
    def __init__(self, n: int, compensated: bool):
        self.values = np.zeros(n)
        self.compensated = compensated
        self._comp = np.zeros(n) if compensated else None

    def add_at(self, idx: np.ndarray, vals: np.ndarray) -> None:
        if not self.compensated:
            np.add.at(self.values, idx, vals)
            return
        y = vals - self._comp[idx]
        t = self.values[idx] + y
        self._comp[idx] = (t - self.values[idx]) - y
        self.values[idx] = t


def replay_batch_adjoint(plan: training.TrainPlan, state: optim.OptimizerState,
                         t: int, delta_next: optim.StateAdjoint):
    """The single-step reverse kernel at w = 1_N.

    Returns (batch indices, per-example influence contributions, advanced
    adjoint). Contributions are supported only on the step's minibatch.
    """
    total = plan.total_steps
    batch = plan.schedule.batches[t]
    X = plan.dataset.features[batch]
    y = plan.dataset.targets[batch]
    w_batch = np.ones(len(batch))

    g = models.batch_weighted_grad(plan.model, state.params, X, y, w_batch)
    u = optim.vjp_grad(plan.rule, state, g, delta_next, total)
    contributions = models.batch_grad_dots(plan.model, state.params, X, y, u)
    delta = optim.vjp_state(plan.rule, state, g, delta_next, total)
    delta.params = delta.params + models.batch_hvp_sum(
        plan.model, state.params, X, y, u, w_batch
    )
    return batch, contributions, delta


def replay_metagradient(plan: training.TrainPlan,
                        measurement: models.MeasurementFn,
                        store: CheckpointStore,
                        compensated: bool = False):
    """Exact influence function of the data weights via one reverse pass.

    The store must come from recording a training run of this plan at
    w = 1_N (``train_recorded``); the rematerialization replays use the same
    all-ones weighting.
    """
    T = plan.total_steps
    n = plan.n_examples
    ones = training.ones_weights(n)
    live = _LiveStates(store)

    final = live.get(T)
    if len(final.params) != plan.model.param_dim:
        raise CheckpointMissingError(T)
    center = models.measure(measurement, plan.model, final.params)
    delta = optim.StateAdjoint(
        models.measure_grad(measurement, plan.model, final.params),
        tuple(np.zeros_like(m) for m in final.moments),
    )
    live.release(T)

    acc = _Accumulator(n, compensated)
    current = {"delta": delta}

    def on_step(t: int, state: optim.OptimizerState) -> None:
        # an overflow inside the step kernels is an adjoint blow-up too:
        # both signal a non-smooth configuration, reported with the step
        try:
            batch, contributions, advanced = replay_batch_adjoint(
                plan, state, t, current["delta"]
            )
        except NumericalOverflowError:
            raise NonFiniteAdjointError(t) from None
        acc.add_at(batch, contributions)
        if not advanced.is_finite():
            raise NonFiniteAdjointError(t)
        current["delta"] = advanced

    started = time.perf_counter()
    if T > 0:
        step_fn = lambda s, k: training.train_step(plan, s, ones, k)
        _reverse_segment(live, 0, T, step_fn, on_step)
    elapsed = time.perf_counter() - started

    budget = ReplayBudget(
        total_steps=T,
        forward_steps_total=store.forward_steps_total,
        recompute_steps_total=live.recompute_steps,
        peak_live_states=live.peak,
        reverse_seconds=elapsed,
    )
    influence = InfluenceVector(
        values=acc.values,
        center_output=center,
        plan_fingerprint=plan.fingerprint(),
        measurement_fingerprint=_measurement_fingerprint(measurement),
    )
    return influence, budget


def _measurement_fingerprint(measurement: models.MeasurementFn) -> str:
    blob = json.dumps(measurement.describe(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def audit_budget(budget: ReplayBudget, total_steps: int | None = None,
                 live_constant: int = LIVE_STATE_CONSTANT) -> dict:
    """Check the pass against the cost envelope; raise on violation.

    Bounds: recompute steps <= T * ceil(log2 T) + T, and peak live states
    <= live_constant * max(1, ceil(log2 T)) (the max() keeps the degenerate
    T <= 1 cases meaningful, where at least one state must be live).
    """
    T = budget.total_steps if total_steps is None else total_steps
    log_t = ceil_log2(T)
    recompute_bound = T * log_t + T
    live_bound = live_constant * max(1, log_t)
    report = {
        "total_steps": T,
        "recompute_steps_total": budget.recompute_steps_total,
        "recompute_bound": recompute_bound,
        "peak_live_states": budget.peak_live_states,
        "live_bound": live_bound,
        "live_constant": live_constant,
        "reverse_seconds": budget.reverse_seconds,
        "ok": (budget.recompute_steps_total <= recompute_bound
               and budget.peak_live_states <= live_bound),
    }
    if not report["ok"]:
        raise BudgetViolationError(
            f"replay budget violated: recompute {budget.recompute_steps_total} "
            f"(bound {recompute_bound}), peak live {budget.peak_live_states} "
            f"(bound {live_bound})"
        )
    return report


def influence_to_csv(path, influence: InfluenceVector,
                     include_method: bool = False) -> None:
    """Write (index, value) rows; float text is shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if include_method:
            writer.writerow(["index", "value", "method"])
            for i, v in enumerate(influence.values):
                writer.writerow([i, repr(float(v)), influence.method])
        else:
            writer.writerow(["index", "value"])
            for i, v in enumerate(influence.values):
                writer.writerow([i, repr(float(v))])


def influence_from_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        pairs = [(int(row["index"]), float(row["value"])) for row in reader]
    pairs.sort()
    return np.array([v for _, v in pairs])


def scaled(measurement: models.MeasurementFn, factor: float) -> models.MeasurementFn:
    """The measurement multiplied by a constant (the influence scales with it)."""
    return models.MeasurementFn(measurement.kind, measurement.payload,
                                scale=measurement.scale * factor)
