"""
Exception hierarchy shared by the numerical core and the CLI.
Each class knows the process exit code the CLI maps it to.
"""

from typing import Optional, Sequence


class RearrangementError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class DomainError(RearrangementError):
    """An argument lies outside the domain of an operation."""


class InvariantError(RearrangementError):
    """A data structure violates one of its invariants."""


class AdmissibilityError(InvariantError):
    """eta * q pushes theta outside its legal range."""


class ContractError(RearrangementError):
    """A caller broke an operation's precondition."""


class ResolutionError(RearrangementError):
    """A grid is too coarse for the requested frequency or depth."""

    exit_code = 2


class PrecisionError(RearrangementError):
    """Monte-Carlo noise is too large relative to a hypothesis bound."""

    exit_code = 2

    def __init__(self, message: str, entry: Optional[str] = None):
        super().__init__(message)
        self.entry = entry


class SolverFailure(RearrangementError):
    """The block sampler exhausted its retry budget."""

    exit_code = 3

    def __init__(self, message: str, stage: tuple, best_signs: Optional[Sequence[int]] = None,
                 best_ratio: float = float("inf")):
        super().__init__(message)
        self.stage = stage
        self.best_signs = None if best_signs is None else list(best_signs)
        self.best_ratio = best_ratio


USAGE_EXIT_CODE = 64
