"""Update rules: forward application and exact vector-Jacobian products.

Each rule advances the full optimizer state s_t = (params, moments) given an
aggregated gradient g, and exposes the two adjoints the reverse pass chains
together:

* :func:`vjp_state` -- the adjoint with respect to the incoming state,
  holding g fixed (the explicit dependence of the step on s_t);
* :func:`vjp_grad` -- the adjoint with respect to g.

Conventions, chosen once and differentiated as written:

* momentum is heavy-ball with the velocity updated first,
  u' = mu * u + g, then params -= lr * u';
* adam is the three-row update without bias correction, with eps_root added
  under the square root so the inverse root stays bounded on v >= 0:
      m' = b1 * m + (1 - b1) * g
      v' = b2 * v + (1 - b2) * g^2
      params -= lr * m' / (sqrt(v' + eps_root) + eps)
* weight decay is decoupled: params -= lr * wd * params, applied in the same
  step and differentiated like every other term (for plain sgd this equals
  the classical L2 penalty gradient).

Learning rates come from a schedule that is a pure function of the step
index, so identical inputs always produce bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TrainingDivergedError

RULE_SGD = "sgd"
RULE_MOMENTUM = "sgd-momentum"
RULE_ADAM = "adam"

SCHEDULE_CONSTANT = "constant"
SCHEDULE_ONE_CYCLE = "one-cycle-linear"


@dataclass(frozen=True)
class LrSchedule:
    """Learning rate as a pure function of (step index, total steps)."""

    kind: str = SCHEDULE_CONSTANT
    lr: float = 0.1
    max_lr: float = 0.1
    start_mult: float = 1e-6
    end_mult: float = 0.1
    peak_frac: float = 0.25

    def __post_init__(self):
        if self.kind == SCHEDULE_CONSTANT:
            if self.lr <= 0:
                raise ValueError("constant learning rate must be positive")
        elif self.kind == SCHEDULE_ONE_CYCLE:
            if self.max_lr <= 0 or self.start_mult <= 0 or self.end_mult <= 0:
                raise ValueError("one-cycle rates and multipliers must be positive")
            if not 0.0 < self.peak_frac < 1.0:
                raise ValueError("peak_frac must lie in (0, 1)")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, lr: float) -> "LrSchedule":
        return cls(kind=SCHEDULE_CONSTANT, lr=lr)

    @classmethod
    def one_cycle(cls, max_lr: float, start_mult: float = 1e-6,
                  end_mult: float = 0.1, peak_frac: float = 0.25) -> "LrSchedule":
        return cls(kind=SCHEDULE_ONE_CYCLE, max_lr=max_lr, start_mult=start_mult,
                   end_mult=end_mult, peak_frac=peak_frac)

    def lr_at(self, t: int, total_steps: int) -> float:
        if self.kind == SCHEDULE_CONSTANT:
            return self.lr
        # linear ramp start_mult -> 1 over the first peak_frac of training,
        # then 1 -> end_mult; progress spans the run endpoints exactly
        progress = t / (total_steps - 1) if total_steps > 1 else 0.0
        if progress <= self.peak_frac:
            mult = self.start_mult + (1.0 - self.start_mult) * (progress / self.peak_frac)
        else:
            tail = (progress - self.peak_frac) / (1.0 - self.peak_frac)
            mult = 1.0 + (self.end_mult - 1.0) * tail
        return self.max_lr * mult

    def describe(self) -> dict:
        if self.kind == SCHEDULE_CONSTANT:
            return {"kind": self.kind, "lr": self.lr}
        return {
            "kind": self.kind,
            "max_lr": self.max_lr,
            "start_mult": self.start_mult,
            "end_mult": self.end_mult,
            "peak_frac": self.peak_frac,
        }


@dataclass(frozen=True)
class UpdateRule:
    kind: str = RULE_SGD
    schedule: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eps_root: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in (RULE_SGD, RULE_MOMENTUM, RULE_ADAM):
            raise ValueError(f"unknown update rule {self.kind!r}")
        if self.kind == RULE_MOMENTUM and not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.kind == RULE_ADAM:
            if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
                raise ValueError("beta1, beta2 must lie in [0, 1)")
            if self.eps_root <= 0.0:
                raise ValueError("eps_root must be positive")
            if self.eps < 0.0:
                raise ValueError("eps must be non-negative")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")

    @property
    def num_moment_blocks(self) -> int:
        return {RULE_SGD: 0, RULE_MOMENTUM: 1, RULE_ADAM: 2}[self.kind]

    def init_moments(self, param_dim: int) -> tuple:
        return tuple(np.zeros(param_dim) for _ in range(self.num_moment_blocks))

    def describe(self) -> dict:
        out = {"kind": self.kind, "schedule": self.schedule.describe(),
               "weight_decay": self.weight_decay}
        if self.kind == RULE_MOMENTUM:
            out["momentum"] = self.momentum
        if self.kind == RULE_ADAM:
            out.update(beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                       eps_root=self.eps_root)
        return out


@dataclass(frozen=True)
class OptimizerState:
    """The full iterate: parameters plus rule-dependent moment blocks."""

    params: np.ndarray
    moments: tuple
    step_index: int

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.params))
                    and all(np.all(np.isfinite(m)) for m in self.moments))


@dataclass
class StateAdjoint:
    """Cotangent with the same block structure as :class:`OptimizerState`."""

    params: np.ndarray
    moments: tuple

    @classmethod
    def zeros_like(cls, state: OptimizerState) -> "StateAdjoint":
        return cls(np.zeros_like(state.params),
                   tuple(np.zeros_like(m) for m in state.moments))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.params))
                    and all(np.all(np.isfinite(m)) for m in self.moments))


def initial_state(rule: UpdateRule, params: np.ndarray) -> OptimizerState:
    return OptimizerState(np.asarray(params, dtype=np.float64),
                          rule.init_moments(len(params)), 0)


def _adam_intermediates(rule, state, g):
    m, v = state.moments
    m_new = rule.beta1 * m + (1.0 - rule.beta1) * g
    v_new = rule.beta2 * v + (1.0 - rule.beta2) * g * g
    root = np.sqrt(v_new + rule.eps_root)
    denom = root + rule.eps
    return m_new, v_new, root, denom


def apply(rule: UpdateRule, state: OptimizerState, g: np.ndarray,
          total_steps: int) -> OptimizerState:
    """One optimizer step s_{t+1} = h_t(s_t, g). Pure; never mutates inputs."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.params.shape:
        raise ValueError("gradient shape does not match parameters")
    t = state.step_index
    if t >= total_steps:
        raise ValueError(f"step index {t} out of range for {total_steps} steps")
    lr = rule.schedule.lr_at(t, total_steps)

    if rule.kind == RULE_SGD:
        params = state.params - lr * g
        moments = ()
    elif rule.kind == RULE_MOMENTUM:
        (u,) = state.moments
        u_new = rule.momentum * u + g
        params = state.params - lr * u_new
        moments = (u_new,)
    else:
        m_new, v_new, _, denom = _adam_intermediates(rule, state, g)
        params = state.params - lr * (m_new / denom)
        moments = (m_new, v_new)

    if rule.weight_decay != 0.0:
        params = params - lr * rule.weight_decay * state.params

    new = OptimizerState(params, moments, t + 1)
    if not new.is_finite():
        raise TrainingDivergedError(t)
    return new


def vjp_state(rule: UpdateRule, state: OptimizerState, g: np.ndarray,
              delta_next: StateAdjoint, total_steps: int) -> StateAdjoint:
    """Adjoint of :func:`apply` with respect to the incoming state, g held fixed."""
    lr = rule.schedule.lr_at(state.step_index, total_steps)
    decay = 1.0 - lr * rule.weight_decay
    dp = delta_next.params

    if rule.kind == RULE_SGD:
        return StateAdjoint(decay * dp, ())
    if rule.kind == RULE_MOMENTUM:
        (du,) = delta_next.moments
        adj_u = rule.momentum * (du - lr * dp)
        return StateAdjoint(decay * dp, (adj_u,))

    dm, dv = delta_next.moments
    m_new, _, root, denom = _adam_intermediates(rule, state, g)
    # total adjoints at the new moments, folding in their effect on params
    am = dm - lr * dp / denom
    av = dv + lr * dp * m_new / (2.0 * denom * denom * root)
    return StateAdjoint(decay * dp, (rule.beta1 * am, rule.beta2 * av))


def vjp_grad(rule: UpdateRule, state: OptimizerState, g: np.ndarray,
             delta_next: StateAdjoint, total_steps: int) -> np.ndarray:
    """Adjoint of :func:`apply` with respect to the aggregated gradient g."""
    lr = rule.schedule.lr_at(state.step_index, total_steps)
    dp = delta_next.params

    if rule.kind == RULE_SGD:
        return -lr * dp
    if rule.kind == RULE_MOMENTUM:
        (du,) = delta_next.moments
        return du - lr * dp
    dm, dv = delta_next.moments
    m_new, _, root, denom = _adam_intermediates(rule, state, g)
    am = dm - lr * dp / denom
    av = dv + lr * dp * m_new / (2.0 * denom * denom * root)
    return (1.0 - rule.beta1) * am + 2.0 * (1.0 - rule.beta2) * g * av


def with_schedule(rule: UpdateRule, schedule: LrSchedule) -> UpdateRule:
    return replace(rule, schedule=schedule)
