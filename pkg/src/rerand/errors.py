"""Exception hierarchy.

Everything raised on purpose by the library derives from ``RerandError`` so
callers (and the CLI) can separate bad input from invalid designs.
"""

from __future__ import annotations


class RerandError(Exception):
    """Base class for library errors."""


class DomainError(RerandError, ValueError):
    """An argument lies outside the domain of the operation."""


class NotPositiveDefiniteError(DomainError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(
            f"matrix is not positive definite: pivot {pivot} is {value:.6g}"
        )


class SingularDesignError(DomainError):
    """Regression design matrix is rank deficient."""


class MetricMismatchError(DomainError):
    """Balance metric is incompatible with the covariates supplied."""


class EmptyAcceptanceSetError(DomainError):
    """No candidate assignment satisfies the acceptance rule."""


class InfeasibleTargetError(DomainError):
    """Requested minimum p-value cannot be reached with the candidate set."""

    def __init__(self, target: float, smallest: float):
        self.target = target
        self.smallest = smallest
        super().__init__(
            f"target minimum p-value {target:g} is infeasible; "
            f"smallest achievable is {smallest:.6g}"
        )


class InadmissibleAssignmentError(RerandError):
    """Observed assignment is not a member of the acceptance set.

    A randomization test against such a set is invalid, so this is kept
    apart from plain input errors.
    """
