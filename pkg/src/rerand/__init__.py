"""Rerandomization designs with exact randomization inference.

Build acceptance sets of balanced treatment assignments, test constant-effect
nulls against them, invert those tests into fiducial intervals, and choose
the acceptance probability that best trades balance against test power.
"""

__version__ = "0.1.0"

from .balance import AcceptanceSet, Metric, build_acceptance_set, variance_remaining
from .errors import (
    DomainError,
    EmptyAcceptanceSetError,
    InadmissibleAssignmentError,
    InfeasibleTargetError,
    RerandError,
)
from .inference import (
    FiducialInterval,
    OutcomeVector,
    RandomizationTestResult,
    fiducial_interval,
    randomization_test,
)
from .randset import AssignmentVector, DesignSpace, count_randomizations, enumerate_assignments
from .threshold import (
    PriorSpec,
    apriori_p_a,
    design_expected_pvalue,
    heuristic_p_a,
    implied_lambda,
    kasy_degenerate_set,
)

__all__ = [
    "AcceptanceSet",
    "AssignmentVector",
    "DesignSpace",
    "DomainError",
    "EmptyAcceptanceSetError",
    "FiducialInterval",
    "InadmissibleAssignmentError",
    "InfeasibleTargetError",
    "Metric",
    "OutcomeVector",
    "PriorSpec",
    "RandomizationTestResult",
    "RerandError",
    "apriori_p_a",
    "build_acceptance_set",
    "count_randomizations",
    "design_expected_pvalue",
    "enumerate_assignments",
    "fiducial_interval",
    "heuristic_p_a",
    "implied_lambda",
    "kasy_degenerate_set",
    "randomization_test",
    "variance_remaining",
]
