"""Exception types shared across the package."""


class GpControlError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(GpControlError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DimensionError(GpControlError, ValueError):
    """Array shapes are inconsistent with each other or with a model."""


class NotPsdError(GpControlError, ValueError):
    """A matrix required to be positive semidefinite is not."""


class NumericalError(GpControlError, RuntimeError):
    """A numerically unrecoverable condition (failed factorization, blow-up)."""

    def __init__(self, message, condition=None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class DivergedRolloutError(NumericalError):
    """Predicted state covariance blew up during a rollout."""

    def __init__(self, step, trace, limit):
        super().__init__(
            f"rollout diverged at step {step}: covariance trace {trace:.3e} "
            f"exceeds limit {limit:.3e}"
        )
        self.step = step
        self.trace = trace
        self.limit = limit
