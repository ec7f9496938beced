"""Covariate balance scores and acceptance sets.

Two scores are available:

``m``
    absolute difference of treated and control means for a single
    covariate (the square root of the quadratic loss);
``mahalanobis``
    ``M = n p (1 - p) d' Cov(x)^-1 d`` with ``d`` the mean difference and
    ``p`` the treated fraction. Under multivariate normal covariates ``M`` is
    approximately chi-squared with k degrees of freedom.

Batch scoring whitens the covariates once with the Cholesky factor of the
full-sample covariance, so each candidate costs one indicator product.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from . import numerics
from .errors import EmptyAcceptanceSetError, MetricMismatchError, DomainError
from .randset import (
    AssignmentVector,
    DesignSpace,
    count_randomizations,
    iter_index_batches,
    rank,
    treated_matrix,
)

TIE_RTOL = 1e-9
DEFAULT_BATCH = 32768
MEMBER_BUDGET = 10**7


class Metric(str, Enum):
    ABS_MEAN_DIFF = "m"
    MAHALANOBIS = "mahalanobis"

    @classmethod
    def parse(cls, value) -> "Metric":
        if isinstance(value, cls):
            return value
        aliases = {"m": cls.ABS_MEAN_DIFF, "abs_mean_diff": cls.ABS_MEAN_DIFF,
                   "mahalanobis": cls.MAHALANOBIS, "mahalanobis_m": cls.MAHALANOBIS,
                   "M": cls.MAHALANOBIS}
        try:
            return aliases[value]
        except KeyError:
            raise DomainError(f"unknown balance metric {value!r}") from None


def as_covariates(x) -> np.ndarray:
    """Validate a covariate matrix and return it as a 2-D float array."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DomainError("covariates must be a matrix")
    if x.shape[0] < 2 or x.shape[1] < 1:
        raise DomainError(f"covariates need n >= 2 rows and k >= 1 columns, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("covariates contain missing or non-finite values")
    return x


def _group_means(x: np.ndarray, w: AssignmentVector):
    if w.n != x.shape[0]:
        raise DomainError("assignment length does not match covariate rows")
    mask = w.bits.astype(bool)
    return x[mask].mean(axis=0), x[~mask].mean(axis=0)


def abs_mean_diff(x, w: AssignmentVector) -> float:
    x = as_covariates(x)
    if x.shape[1] != 1:
        raise MetricMismatchError(f"abs_mean_diff needs one covariate, got k={x.shape[1]}")
    mt, mc = _group_means(x, w)
    return float(abs(mt[0] - mc[0]))


def mahalanobis_m(x, w: AssignmentVector, cov_factor: np.ndarray | None = None) -> float:
    """Mahalanobis balance of a single assignment.

    ``cov_factor`` is the Cholesky factor of the sample covariance of ``x``;
    it is computed when omitted.
    """
    x = as_covariates(x)
    if cov_factor is None:
        cov_factor = numerics.cholesky(numerics.sample_covariance(x))
    mt, mc = _group_means(x, w)
    d = mt - mc
    p = w.n_treated / w.n
    return float(max(w.n * p * (1 - p) * d @ numerics.cho_solve(cov_factor, d), 0.0))


class BalanceScorer:
    """Batch scorer bound to one covariate matrix and design.

    The covariance is factored at construction and reused for every batch.
    """

    def __init__(self, x, space: DesignSpace, metric=Metric.MAHALANOBIS):
        self.x = as_covariates(x)
        self.space = space
        self.metric = Metric.parse(metric)
        n, k = self.x.shape
        if n != space.n:
            raise DomainError(f"covariates have {n} rows but the design has {space.n} units")
        if self.metric is Metric.ABS_MEAN_DIFF:
            if k != 1:
                raise MetricMismatchError(f"metric 'm' needs one covariate, got k={k}")
            self._z = self.x - self.x.mean(axis=0)
            self._factor = 1.0
            sd = float(np.std(self.x))
            self.scale = sd if sd > 0 else 1.0
        else:
            self.cov_factor = numerics.cholesky(numerics.sample_covariance(self.x))
            centered = self.x - self.x.mean(axis=0)
            self._z = numerics.solve_lower(self.cov_factor, centered.T).T
            p = space.n_treated / n
            self._factor = n * p * (1 - p)
            self.scale = 1.0
        self._total = self._z.sum(axis=0)

    @property
    def tie_tol(self) -> float:
        return TIE_RTOL * self.scale

    def score_treated(self, treated: np.ndarray) -> np.ndarray:
        treated = np.asarray(treated, dtype=np.int64)
        b = treated.shape[0]
        ind = np.zeros((b, self.space.n))
        ind[np.arange(b)[:, None], treated] = 1.0
        return self.score_indicator(ind)

    def score_indicator(self, ind: np.ndarray) -> np.ndarray:
        """Scores for rows of a 0/1 treatment indicator matrix."""
        n, t = self.space.n, self.space.n_treated
        s_t = ind @ self._z
        d = s_t / t - (self._total - s_t) / (n - t)
        if self.metric is Metric.ABS_MEAN_DIFF:
            return np.abs(d[:, 0])
        return self._factor * np.einsum("ij,ij->i", d, d)

    def score(self, w: AssignmentVector) -> float:
        return float(self.score_treated(np.asarray([w.treated]))[0])


def _batches(space: DesignSpace, batch_size: int):
    total = count_randomizations(space)
    return [(lo, min(lo + batch_size, total)) for lo in range(0, total, batch_size)]


def iter_score_batches(
    space: DesignSpace,
    x,
    metric=Metric.MAHALANOBIS,
    *,
    batch_size: int = DEFAULT_BATCH,
    threads: int = 1,
    scorer: BalanceScorer | None = None,
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(first_index, scores)`` blocks in enumeration order.

    Blocks have fixed boundaries, so the output does not depend on
    ``threads``; workers only change which block is computed when.
    """
    scorer = scorer or BalanceScorer(x, space, metric)

    def work(bounds):
        lo, hi = bounds
        _, treated = next(iter_index_batches(space, lo, hi, hi - lo))
        return lo, scorer.score_treated(treated)

    slices = _batches(space, batch_size)
    if threads <= 1 or len(slices) <= 1:
        for bounds in slices:
            yield work(bounds)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # bounded look-ahead keeps memory at O(threads * batch_size)
        pending = []
        for bounds in slices:
            pending.append(pool.submit(work, bounds))
            if len(pending) >= 2 * threads:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()


def score_stream(space: DesignSpace, x, metric=Metric.MAHALANOBIS, **kw) -> Iterator[tuple[int, float]]:
    """One ``(index, score)`` pair per candidate, in enumeration order."""
    for lo, scores in iter_score_batches(space, x, metric, **kw):
        for i, s in enumerate(scores.tolist()):
            yield lo + i, s


def score_all(space: DesignSpace, x, metric=Metric.MAHALANOBIS, **kw) -> np.ndarray:
    """All candidate scores as one array (materialized; mind the size)."""
    parts = [s for _, s in iter_score_batches(space, x, metric, **kw)]
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class AcceptanceSet:
    """Acceptable candidates, sorted by ``(score, index)``.

    Members are stored as enumeration indices; :meth:`treated_matrix`
    materializes them on demand.
    """

    space: DesignSpace
    metric: Metric
    rule: str
    rule_value: float
    threshold_a: float
    indices: np.ndarray
    scores: np.ndarray
    n_candidates: int
    tie_count: int | None = None
    _treated: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.indices) == 0:
            raise EmptyAcceptanceSetError("acceptance set is empty")

    @property
    def size(self) -> int:
        return int(len(self.indices))

    def __len__(self) -> int:
        return self.size

    @property
    def realized_p_a(self) -> float:
        return self.size / self.n_candidates

    @property
    def min_p_value(self) -> float:
        return 1.0 / self.size

    def treated_matrix(self) -> np.ndarray:
        if self._treated is None:
            self._treated = treated_matrix(self.space, self.indices)
        return self._treated

    def assignment(self, position: int) -> AssignmentVector:
        return AssignmentVector(self.space.n, tuple(int(i) for i in self.treated_matrix()[position]))

    def position_of(self, w: AssignmentVector) -> int | None:
        try:
            idx = rank(self.space, w)
        except DomainError:
            return None
        hits = np.flatnonzero(self.indices == idx)
        return int(hits[0]) if hits.size else None

    def __contains__(self, w: AssignmentVector) -> bool:
        return self.position_of(w) is not None

    def summary(self) -> dict:
        return {
            "n_candidates": self.n_candidates,
            "threshold_a": float(self.threshold_a),
            "realized_p_a": self.realized_p_a,
            "members": self.size,
            "min_p_value": self.min_p_value,
        }


def _sorted_members(indices: np.ndarray, scores: np.ndarray):
    order = np.lexsort((indices, scores))
    return indices[order], scores[order]


def accept_count(p_a: float, n_candidates: int) -> int:
    """``ceil(p_a * n_candidates)``, robust to float round-off, at least 1."""
    x = float(p_a) * n_candidates
    return max(1, math.ceil(x - 1e-9 * max(1.0, x)))


def build_acceptance_set(
    space: DesignSpace,
    x,
    metric=Metric.MAHALANOBIS,
    *,
    p_a: float | None = None,
    threshold: float | None = None,
    batch_size: int = DEFAULT_BATCH,
    threads: int = 1,
    member_budget: int = MEMBER_BUDGET,
) -> AcceptanceSet:
    """Acceptance set under exactly one of the rules ``p_a`` or ``threshold``.

    ``p_a`` keeps the ``ceil(p_a * n_candidates)`` best candidates plus every
    candidate tied with the worst kept score. ``threshold`` keeps all scores
    ``<= threshold``. Ties are judged with a relative tolerance of 1e-9 so that
    mirror-image assignments with mathematically equal scores stay together.
    """
    if (p_a is None) == (threshold is None):
        raise DomainError("give exactly one of p_a or threshold")
    metric = Metric.parse(metric)
    scorer = BalanceScorer(x, space, metric)
    tol = scorer.tie_tol
    n_cand = count_randomizations(space)
    kw = dict(batch_size=batch_size, threads=threads, scorer=scorer)

    if threshold is not None:
        threshold = float(threshold)
        if threshold < 0:
            raise DomainError("threshold must be non-negative")
        keep_i, keep_s = [], []
        for lo, s in iter_score_batches(space, x, metric, **kw):
            hit = np.flatnonzero(s <= threshold + tol)
            keep_i.append(hit + lo)
            keep_s.append(s[hit])
        idx = np.concatenate(keep_i).astype(np.int64)
        sc = np.concatenate(keep_s)
        if idx.size == 0:
            raise EmptyAcceptanceSetError(
                f"no candidate has score <= {threshold:g}; lower bound is above the threshold"
            )
        if idx.size > member_budget:
            raise DomainError(f"acceptance set of {idx.size} members exceeds the budget {member_budget}")
        idx, sc = _sorted_members(idx, sc)
        return AcceptanceSet(space, metric, "threshold", threshold, threshold, idx, sc, n_cand)

    p_a = float(p_a)
    if not 0.0 < p_a <= 1.0:
        raise DomainError(f"p_a must lie in (0, 1], got {p_a}")
    m = accept_count(p_a, n_cand)
    if m > member_budget:
        raise DomainError(f"acceptance set of {m} members exceeds the budget {member_budget}")
    best_i = np.zeros(0, dtype=np.int64)
    best_s = np.zeros(0)
    for lo, s in iter_score_batches(space, x, metric, **kw):
        cand_i = np.concatenate([best_i, np.arange(lo, lo + s.size, dtype=np.int64)])
        cand_s = np.concatenate([best_s, s])
        if cand_s.size > m:
            kth = np.partition(cand_s, m - 1)[m - 1]
            keep = cand_s <= kth + tol
            cand_i, cand_s = cand_i[keep], cand_s[keep]
        best_i, best_s = cand_i, cand_s
    kth = np.partition(best_s, m - 1)[m - 1] if best_s.size >= m else best_s.max()
    keep = best_s <= kth + tol
    idx, sc = _sorted_members(best_i[keep], best_s[keep])
    return AcceptanceSet(space, metric, "top_fraction", p_a, float(sc[-1]), idx, sc, n_cand)


def acceptance_from_scores(
    space: DesignSpace, metric, scores: np.ndarray, p_a: float, tol: float
) -> AcceptanceSet:
    """Top-fraction acceptance set from precomputed enumeration-order scores."""
    n_cand = scores.size
    m = accept_count(p_a, n_cand)
    kth = np.partition(scores, m - 1)[m - 1]
    idx = np.flatnonzero(scores <= kth + tol).astype(np.int64)
    idx, sc = _sorted_members(idx, scores[idx])
    return AcceptanceSet(space, Metric.parse(metric), "top_fraction", float(p_a), float(sc[-1]), idx, sc, n_cand)


# -- threshold / acceptance-probability duality -----------------------------


def analytic_p_a_from_threshold(a: float, k: int) -> float:
    """Acceptance probability of ``M <= a`` under the chi-squared(k) law."""
    return numerics.chi2_cdf(a, k)


def analytic_threshold_from_p_a(p_a: float, k: int) -> float:
    return numerics.chi2_quantile(p_a, k)


def analytic_variance_remaining(p_a: float, k: int) -> float:
    """Fraction of mean-difference variance left after accepting ``M <= a``.

    With ``a`` the chi-squared(k) quantile at ``p_a`` this is
    ``P(chi2_{k+2} <= a) / P(chi2_k <= a)``.
    """
    if not 0.0 < p_a <= 1.0:
        raise DomainError(f"p_a must lie in (0, 1], got {p_a}")
    if p_a >= 1.0:
        return 1.0
    a = numerics.chi2_quantile(p_a, k)
    denom = numerics.chi2_cdf(a, k)
    if denom <= 0.0:
        return 0.0
    return min(1.0, numerics.chi2_cdf(a, k + 2) / denom)


def _quadratic(scores: np.ndarray, metric: Metric) -> np.ndarray:
    # m is a root; the variance ratio lives on the squared scale
    return scores**2 if metric is Metric.ABS_MEAN_DIFF else scores


def empirical_variance_curve(
    scores: np.ndarray, metric, p_a_values, tol: float
) -> np.ndarray:
    """Mean quadratic imbalance over each top-fraction set, relative to all."""
    metric = Metric.parse(metric)
    q_sorted = np.sort(_quadratic(np.asarray(scores, dtype=float), metric))
    s_sorted = np.sort(np.asarray(scores, dtype=float))
    total_mean = q_sorted.mean()
    csum = np.cumsum(q_sorted)
    out = []
    for p in np.atleast_1d(p_a_values):
        m = accept_count(p, s_sorted.size)
        boundary = s_sorted[m - 1]
        size = int(np.searchsorted(s_sorted, boundary + tol, side="right"))
        mean_in = csum[size - 1] / size
        out.append(1.0 if total_mean == 0 else mean_in / total_mean)
    return np.asarray(out)


def variance_remaining(
    p_a: float,
    k: int | None = None,
    mode: str = "analytic",
    *,
    x=None,
    space: DesignSpace | None = None,
    metric=Metric.MAHALANOBIS,
    acceptance: AcceptanceSet | None = None,
) -> float:
    """Remaining covariate mean-difference variance at acceptance ``p_a``.

    ``mode="analytic"`` uses the chi-squared ratio; ``mode="empirical"``
    averages the enumerated scores over the acceptance set (or over the
    supplied ``acceptance``) relative to all candidates.
    """
    if mode == "analytic":
        if k is None:
            raise DomainError("analytic mode needs the covariate count k")
        return analytic_variance_remaining(p_a, k)
    if mode != "empirical":
        raise DomainError(f"unknown variance mode {mode!r}")
    if x is None or space is None:
        raise DomainError("empirical mode needs covariates and a design space")
    metric = Metric.parse(metric)
    scorer = BalanceScorer(x, space, metric)
    scores = score_all(space, x, metric, scorer=scorer)
    if acceptance is not None:
        total = _quadratic(scores, metric).mean()
        inner = _quadratic(acceptance.scores, acceptance.metric).mean()
        return 1.0 if total == 0 else float(inner / total)
    return float(empirical_variance_curve(scores, metric, [p_a], scorer.tie_tol)[0])
