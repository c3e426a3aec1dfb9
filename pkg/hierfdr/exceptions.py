"""Exception types raised by hierfdr."""

from typing import Any, Sequence


class HierFdrError(Exception):
    """Base class for every error raised by this package."""


class DataError(HierFdrError, ValueError):
    """Input data is malformed or inconsistent."""


class ConfigError(HierFdrError, ValueError):
    """Settings fail validation or name something unknown."""


class ConvergenceError(HierFdrError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    Attributes:
        partial: the last iterate, packaged the way a successful return is.
        kkt_violation: optimality slack of the partial iterate.
    """

    def __init__(self, message: str, partial: Any, kkt_violation: float):
        super().__init__(message)
        self.partial = partial
        self.kkt_violation = kkt_violation


class InfeasibleProgramError(HierFdrError, RuntimeError):
    """One or more decorrelating programs stayed infeasible.

    Attributes:
        columns: indices of the columns that failed.
    """

    def __init__(self, message: str, columns: Sequence[int]):
        super().__init__(message)
        self.columns = list(columns)


class StudyAbortedError(HierFdrError, RuntimeError):
    """Too many simulation replicates failed."""
