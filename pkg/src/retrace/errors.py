"""Exception taxonomy. Each class maps onto a distinct CLI exit code."""


class RetraceError(Exception):
    """Base class for all library errors."""


class ConfigError(RetraceError):
    """Invalid or unparseable experiment configuration."""


class NumericalOverflowError(RetraceError):
    """A model primitive produced a non-finite value (rejected, never clamped)."""


class TrainingDivergedError(RetraceError):
    """Training produced a non-finite optimizer state."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class CheckpointMissingError(RetraceError):
    """The checkpoint store could not supply a required state."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"no retained or recoverable state for step {step}")


class NonFiniteAdjointError(RetraceError):
    """The reverse pass produced a non-finite adjoint (non-smooth configuration)."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite adjoint at step {step}")


class BudgetViolationError(RetraceError):
    """Replay cost counters exceeded the audited envelope."""


class UndefinedMetricError(RetraceError):
    """A rank statistic is undefined (zero rank variance)."""
