"""Exact randomization tests over an acceptance set, and what follows from them.

The test of ``H0: tau = tau0`` (constant additive effect) imputes control
outcomes ``Y0* = Y_obs - tau0 * W_obs``, re-assigns treatment over every member
``w'`` of the acceptance set and compares ``tau_hat(w') - tau0`` with the observed
value. For a member ``w'`` that statistic is linear in ``tau0``::

    tau_hat(w') - tau0 = a(w') - tau0 * b(w')

where ``a`` is the difference in means of ``Y_obs`` under ``w'`` and ``b`` the
difference in means of the observed indicator ``W_obs`` under ``w'``. The
reference distribution is therefore built once and re-evaluated cheaply for
any ``tau0``, which is what the interval search relies on.

p-values count the observed assignment and use a weak inequality, so they
live on the lattice ``{j / |A|}`` and never fall below ``1 / |A|``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from ._rng import as_generator
from .balance import AcceptanceSet
from .errors import DomainError, InadmissibleAssignmentError
from .randset import AssignmentVector, rank_matrix, sample_treated

EXACT_LIMIT = 10**6
SUBSAMPLE_SIZE = 10**5
TIE_RTOL = 1e-9
ALTERNATIVES = ("two-sided", "greater", "less")


@dataclass(frozen=True)
class OutcomeVector:
    y_obs: np.ndarray
    w_obs: AssignmentVector

    def __post_init__(self):
        y = np.asarray(self.y_obs, dtype=float)
        if y.ndim != 1 or y.shape[0] != self.w_obs.n:
            raise DomainError("outcome length does not match the assignment")
        if not np.all(np.isfinite(y)):
            raise DomainError("outcomes contain missing or non-finite values")
        object.__setattr__(self, "y_obs", y)


@dataclass
class RandomizationTestResult:
    p_value: float
    tau_hat: float
    tau0: float
    reference_size: int
    min_p_value: float
    alternative: str = "two-sided"
    extreme_count: int = 0
    exact: bool = True
    statistic_distribution: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "p_value": self.p_value,
            "tau_hat": self.tau_hat,
            "tau0": self.tau0,
            "reference_size": self.reference_size,
            "min_p_value": self.min_p_value,
            "alternative": self.alternative,
            "extreme_count": self.extreme_count,
            "exact": self.exact,
        }


@dataclass
class FiducialInterval:
    lower: float
    upper: float
    alpha: float
    method: str
    tau_hat: float = math.nan
    reference_size: int = 0

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.lower) or math.isinf(self.upper)

    def __contains__(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "alpha": self.alpha,
            "method": self.method,
            "tau_hat": self.tau_hat,
            "reference_size": self.reference_size,
        }


def diff_in_means(y: OutcomeVector) -> float:
    mask = y.w_obs.bits.astype(bool)
    return float(y.y_obs[mask].mean() - y.y_obs[~mask].mean())


def minimum_p_value(reference_size: int) -> float:
    if reference_size < 1:
        raise DomainError("reference set must hold at least one assignment")
    return 1.0 / reference_size


def min_p_value_curve(n_candidates: int, p_a_grid) -> list[tuple[float, float]]:
    """``(p_a, 1 / ceil(p_a * n_candidates))`` for each grid value."""
    from .balance import accept_count

    out = []
    for p in p_a_grid:
        p = float(p)
        if not 0.0 < p <= 1.0:
            raise DomainError(f"p_a must lie in (0, 1], got {p}")
        out.append((p, 1.0 / accept_count(p, n_candidates)))
    return out


class ReferenceDistribution:
    """Linear-in-``tau0`` reference statistics for one observed experiment."""

    def __init__(self, y: OutcomeVector, treated: np.ndarray, alternative: str = "two-sided"):
        if alternative not in ALTERNATIVES:
            raise DomainError(f"alternative must be one of {ALTERNATIVES}")
        self.alternative = alternative
        n, t = y.w_obs.n, y.w_obs.n_treated
        treated = np.asarray(treated, dtype=np.int64)
        m = treated.shape[0]
        ind = np.zeros((m, n))
        ind[np.arange(m)[:, None], treated] = 1.0
        wbits = y.w_obs.bits.astype(float)
        s_y = ind @ y.y_obs
        s_w = ind @ wbits
        self.a = s_y / t - (y.y_obs.sum() - s_y) / (n - t)
        self.b = s_w / t - (t - s_w) / (n - t)
        self.tau_hat = diff_in_means(y)
        self.size = m
        self._scale = float(np.max(np.abs(y.y_obs))) if n else 0.0

    def _tol(self, tau0: float) -> float:
        return TIE_RTOL * max(self._scale + abs(tau0), 1e-300)

    def statistics(self, tau0: float) -> np.ndarray:
        """``tau_hat(w') - tau0`` for every reference member."""
        return self.a - tau0 * self.b

    def count(self, tau0: float) -> int:
        s = self.statistics(tau0)
        obs = self.tau_hat - tau0
        tol = self._tol(tau0)
        if self.alternative == "two-sided":
            hit = np.abs(s) >= abs(obs) - tol
        elif self.alternative == "greater":
            hit = s >= obs - tol
        else:
            hit = s <= obs + tol
        return int(np.count_nonzero(hit))

    def p_value(self, tau0: float) -> float:
        return self.count(tau0) / self.size


def _reference_treated(y: OutcomeVector, aset: AcceptanceSet, max_exact: int, seed):
    pos = aset.position_of(y.w_obs)
    if pos is None:
        raise InadmissibleAssignmentError(
            f"observed assignment {y.w_obs} is not in the acceptance set; "
            "a randomization test over this set would be invalid"
        )
    if aset.size <= max_exact:
        return aset.treated_matrix(), True
    warnings.warn(
        f"acceptance set has {aset.size} members; using a uniform subsample of "
        f"{SUBSAMPLE_SIZE} plus the observed assignment",
        RuntimeWarning,
        stacklevel=3,
    )
    rng = as_generator(seed)
    others = np.delete(np.arange(aset.size), pos)
    pick = np.sort(rng.choice(others, size=SUBSAMPLE_SIZE - 1, replace=False))
    from .randset import treated_matrix

    rows = np.concatenate([[pos], pick])
    return treated_matrix(aset.space, aset.indices[rows]), False


def randomization_test(
    y: OutcomeVector,
    aset: AcceptanceSet,
    tau0: float = 0.0,
    *,
    alternative: str = "two-sided",
    keep_distribution: bool = False,
    max_exact: int = EXACT_LIMIT,
    seed=None,
) -> RandomizationTestResult:
    """Exact test of ``H0: tau = tau0`` against the acceptance set.

    Raises :class:`InadmissibleAssignmentError` if the observed assignment
    could not have been produced by the rerandomization rule.
    """
    treated, exact = _reference_treated(y, aset, max_exact, seed)
    ref = ReferenceDistribution(y, treated, alternative)
    cnt = ref.count(float(tau0))
    dist = ref.statistics(float(tau0)) + tau0 if keep_distribution else None
    return RandomizationTestResult(
        p_value=cnt / ref.size,
        tau_hat=ref.tau_hat,
        tau0=float(tau0),
        reference_size=ref.size,
        min_p_value=minimum_p_value(ref.size),
        alternative=alternative,
        extreme_count=cnt,
        exact=exact,
        statistic_distribution=dist,
    )


# -- fiducial intervals -----------------------------------------------------


def _accepts(ref: ReferenceDistribution, tau0: float, alpha: float) -> bool:
    # p >= alpha on the count lattice, guarded against alpha * size round-off
    return ref.count(tau0) >= alpha * ref.size - 1e-9


def _outer_scale(ref: ReferenceDistribution, y: OutcomeVector) -> float:
    spread = float(np.ptp(y.y_obs))
    width = 10.0 * abs(ref.tau_hat) + 10.0 * spread
    return width if width > 0 else 1.0


def _far_out(ref: ReferenceDistribution, y: OutcomeVector) -> float:
    return 1e8 * (_outer_scale(ref, y) + abs(ref.tau_hat))


def _endpoint_bisect(ref, alpha, direction, base, far, tol, grid_points):
    center = ref.tau_hat
    far = center + direction * far
    if _accepts(ref, far, alpha):
        return direction * math.inf
    h = base
    while _accepts(ref, center + direction * h, alpha):
        h *= 2.0
    grid = center + direction * np.linspace(0.0, h, grid_points + 1)
    ok = np.array([_accepts(ref, g, alpha) for g in grid])
    last = int(np.flatnonzero(ok)[-1])
    inside, outside = grid[last], grid[last + 1]
    while abs(outside - inside) > tol:
        mid = 0.5 * (inside + outside)
        if _accepts(ref, mid, alpha):
            inside = mid
        else:
            outside = mid
    return float(inside)


def _endpoint_robbins_monro(ref, alpha, direction, base, far, iterations, step):
    center = ref.tau_hat
    far = center + direction * far
    if _accepts(ref, far, alpha):
        return direction * math.inf
    c = step if step is not None else 0.5 * base
    x = center
    for j in range(1, iterations + 1):
        # push outward while H0 is retained, inward once it is rejected;
        # the residual is rescaled to [-1, 1] so both moves have equal reach
        r = ref.p_value(x) - alpha
        r = r / (1.0 - alpha) if r >= 0 else r / alpha
        x += direction * (c / j) * r
        # never cross the point estimate into the opposite tail
        x = center + direction * max(0.0, direction * (x - center))
    return float(x)


def fiducial_interval(
    y: OutcomeVector,
    aset: AcceptanceSet,
    alpha: float = 0.05,
    method: str = "grid_bisection",
    *,
    tol: float = 1e-4,
    grid_points: int = 512,
    iterations: int = 5000,
    step: float | None = None,
    max_exact: int = EXACT_LIMIT,
    seed=None,
) -> FiducialInterval:
    """Interval of ``tau0`` values not rejected at level ``alpha``.

    An endpoint is infinite when the test cannot reject at level ``alpha``
    however far ``tau0`` is pushed in that direction; in particular every
    acceptance set with ``1 / |A| > alpha`` gives ``(-inf, inf)``.

    ``grid_bisection`` expands a bracket from the point estimate, scans it on
    a grid to find the outermost retained value, then bisects to ``tol``.
    ``robbins_monro`` runs a stochastic-approximation style search with step
    ``step / j`` at iteration ``j``.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    treated, _ = _reference_treated(y, aset, max_exact, seed)
    ref = ReferenceDistribution(y, treated, "two-sided")
    if minimum_p_value(ref.size) > alpha:
        return FiducialInterval(-math.inf, math.inf, alpha, method, ref.tau_hat, ref.size)
    base = _outer_scale(ref, y)
    far = _far_out(ref, y)
    if method == "grid_bisection":
        lo = _endpoint_bisect(ref, alpha, -1.0, base, far, tol, grid_points)
        hi = _endpoint_bisect(ref, alpha, +1.0, base, far, tol, grid_points)
    elif method == "robbins_monro":
        lo = _endpoint_robbins_monro(ref, alpha, -1.0, base, far, iterations, step)
        hi = _endpoint_robbins_monro(ref, alpha, +1.0, base, far, iterations, step)
    else:
        raise DomainError(f"unknown interval method {method!r}")
    return FiducialInterval(lo, hi, alpha, method, ref.tau_hat, ref.size)


# -- diagnostics ------------------------------------------------------------


@dataclass
class WaitingTimeSummary:
    p_a: float
    analytic_mean: float
    sample_mean: float
    quantiles: dict
    draws: int

    def to_dict(self) -> dict:
        return {
            "p_a": self.p_a,
            "analytic_mean": self.analytic_mean,
            "sample_mean": self.sample_mean,
            "quantiles": self.quantiles,
            "draws": self.draws,
        }


def waiting_time_stats(p_a: float, draws: int = 10_000, seed=None) -> WaitingTimeSummary:
    """Geometric number of uniform proposals until the first acceptance."""
    if not 0.0 < p_a <= 1.0:
        raise DomainError(f"p_a must lie in (0, 1], got {p_a}")
    analytic = 1.0 / p_a
    if draws <= 0:
        return WaitingTimeSummary(p_a, analytic, math.nan, {}, 0)
    waits = as_generator(seed).geometric(p_a, size=int(draws))
    qs = {str(q): float(np.quantile(waits, q)) for q in (0.5, 0.9, 0.99)}
    return WaitingTimeSummary(p_a, analytic, float(waits.mean()), qs, int(draws))


@dataclass
class UniformityReport:
    chi2: float
    dof: int
    p_value: float
    accepted: int
    proposals: int
    counts: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "chi2": self.chi2,
            "dof": self.dof,
            "p_value": self.p_value,
            "accepted": self.accepted,
            "proposals": self.proposals,
        }


def uniformity_check(
    aset: AcceptanceSet, draws: int = 10_000, seed=None, batch: int = 65536
) -> UniformityReport:
    """Rejection-sample into ``aset`` and test the hits for uniformity.

    Proposals are uniform over all candidates; a proposal is kept when its
    enumeration index is a member. ``draws`` counts kept proposals.
    """
    if aset.size > 10**4:
        raise DomainError("uniformity check bins every member; keep |A| <= 10^4")
    rng = as_generator(seed)
    members = aset.indices
    order = np.argsort(members)
    sorted_members = members[order]
    counts = np.zeros(aset.size, dtype=np.int64)
    kept = proposals = 0
    while kept < draws:
        idx = rank_matrix(aset.space, sample_treated(aset.space, batch, rng))
        pos = np.searchsorted(sorted_members, idx)
        pos = np.minimum(pos, sorted_members.size - 1)
        hit = sorted_members[pos] == idx
        hit_pos = order[pos[hit]]
        take = min(hit_pos.size, draws - kept)
        if take < hit_pos.size:
            # stop at the proposal that delivered the last required hit
            proposals += int(np.flatnonzero(hit)[take - 1]) + 1 if take else 0
        else:
            proposals += batch
        np.add.at(counts, hit_pos[:take], 1)
        kept += take
    dof = aset.size - 1
    if dof == 0:
        return UniformityReport(0.0, 0, 1.0, kept, proposals, counts)
    expected = kept / aset.size
    stat = float(((counts - expected) ** 2).sum() / expected)
    return UniformityReport(stat, dof, numerics.chi2_sf(stat, dof), kept, proposals, counts)
