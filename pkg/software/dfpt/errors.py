from typing import Any


class DfptError(Exception):
    """Base class for failures of the response machinery."""


class InfeasibleError(DfptError):
    """The requested problem has no solution (e.g. too many electrons)."""


class ConvergenceError(DfptError, RuntimeError):
    """
    An iterative method ran out of iterations or stagnated.

    `partial` holds the best state reached, `history` the residual history
    and `reports` any per-solve reports gathered before the failure.
    """

    def __init__(
        self,
        message: str,
        *,
        partial: Any = None,
        history: list[float] | None = None,
        reports: list | None = None,
    ):
        super().__init__(message)
        self.partial = partial
        self.history = history if history is not None else []
        self.reports = reports if reports is not None else []


class DegenerateShiftError(DfptError, ValueError):
    """The extra-band block of the Schur complement is (nearly) singular."""


class InvalidShiftError(DfptError, ValueError):
    """The shifted Sternheimer operator is not positive definite."""


class BudgetExhaustedError(DfptError):
    """The adaptive band selection hit its budget before reaching the target."""

    def __init__(self, message: str, *, trace: Any = None, partial: Any = None):
        super().__init__(message)
        self.trace = trace
        self.partial = partial
