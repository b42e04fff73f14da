"""retrace: exact influence functions for iterative training.

Training a model is a deterministic program once its seeds are pinned; this
package differentiates that program. A reverse pass over the recorded
trajectory yields the exact gradient of any scalar measurement of the final
model with respect to per-example data weights, using a logarithmic-memory
checkpoint schedule. On top sit the affine predictor for counterfactual
weightings, a retraining ground-truth harness with rank-correlation
scoring, and reference baselines.
"""

from .attribution import (LdsReport, SmoothnessProbe, SubsetSample,
                          TaylorPredictor, bootstrap_lds_ci, ground_truth,
                          ground_truth_matrix, lds, sample_subsets,
                          smoothness_probe)
from .backend import BACKEND, available_backends
from .baselines import (convex_ij_influence, fd_influence, grad_dot_influence,
                        trak_lite)
from .checkpoints import (CheckpointStore, LogarithmicRetention, RetainAll,
                          policy_by_name, read_state, read_vector, spine_steps,
                          write_state, write_vector)
from .datasets import (Dataset, Example, GENERATORS, synthetic, synthetic_split,
                       TASK_CLASSIFICATION, TASK_REGRESSION)
from .errors import (BudgetViolationError, CheckpointMissingError, ConfigError,
                     NonFiniteAdjointError, NumericalOverflowError, RetraceError,
                     TrainingDivergedError, UndefinedMetricError)
from .models import (MeasurementFn, ModelFamily, batch_grad_dots, batch_hvp_sum,
                     batch_losses, batch_weighted_grad, grad, grad_dot, hvp,
                     loss, measure, measure_grad)
from .optim import (LrSchedule, OptimizerState, StateAdjoint, UpdateRule, apply,
                    vjp_grad, vjp_state)
from .replay import (InfluenceVector, ReplayBudget, audit_budget,
                     influence_from_csv, influence_to_csv, replay_batch_adjoint,
                     replay_metagradient, scaled)
from .training import (BatchSchedule, TrainPlan, model_output, ones_weights,
                       train, train_recorded, train_step, weighted_grad)

__version__ = "0.1.0"
