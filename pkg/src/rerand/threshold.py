"""Choosing the acceptance probability ``p_a``.

Three procedures are provided:

* :func:`apriori_p_a` picks the smallest acceptance set whose minimum p-value
  still reaches a target;
* :func:`heuristic_p_a` trades the minimum p-value against the remaining
  covariate imbalance with a weight ``lambda``;
* :func:`design_expected_pvalue` simulates experiments under prior beliefs and
  picks the ``p_a`` with the smallest expected p-value.

:func:`kasy_degenerate_set` is the limiting single-assignment design.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import numerics
from ._rng import child_rng, root_of
from .balance import (
    AcceptanceSet,
    BalanceScorer,
    Metric,
    accept_count,
    analytic_variance_remaining,
    empirical_variance_curve,
    score_all,
)
from .errors import DomainError, InfeasibleTargetError
from .numerics import MVNSpec
from .randset import DesignSpace, candidate_indicator, count_randomizations

DEFAULT_HEURISTIC_GRID = 512


# -- a-priori threshold -----------------------------------------------------


@dataclass(frozen=True)
class AprioriChoice:
    p_a: float
    reference_size: int
    n_candidates: int

    @property
    def min_p_value(self) -> float:
        return 1.0 / self.reference_size


def apriori_p_a(beta_target: float, n_candidates: int) -> AprioriChoice:
    """Smallest ``p_a`` whose minimum p-value does not exceed ``beta_target``."""
    if not 0.0 < beta_target <= 1.0:
        raise DomainError(f"beta_target must lie in (0, 1], got {beta_target}")
    inv = 1.0 / beta_target
    size = max(1, math.ceil(inv - 1e-9 * inv))
    if size > n_candidates:
        raise InfeasibleTargetError(beta_target, 1.0 / n_candidates)
    return AprioriChoice(size / n_candidates, size, int(n_candidates))


# -- heuristic tradeoff -----------------------------------------------------


def heuristic_grid(n_candidates: int, points: int = DEFAULT_HEURISTIC_GRID) -> np.ndarray:
    """Log-spaced feasible ``p_a`` values from ``1/n_candidates`` to 1."""
    lo = 1.0 / n_candidates
    grid = np.geomspace(lo, 1.0, max(int(points), 2))
    grid[0], grid[-1] = lo, 1.0
    return np.unique(grid)


@dataclass
class HeuristicChoice:
    p_a: float
    lam: float
    grid: np.ndarray = field(repr=False)
    min_p: np.ndarray = field(repr=False)
    variance: np.ndarray = field(repr=False)
    objective: np.ndarray = field(repr=False)

    def rows(self):
        return [(float(p), float(o), 0.0) for p, o in zip(self.grid, self.objective)]


def _heuristic_components(k, n_candidates, v_mode, grid, x, space, metric):
    e = np.array([1.0 / accept_count(p, n_candidates) for p in grid])
    if v_mode == "analytic":
        if k is None:
            raise DomainError("analytic variance needs the covariate count k")
        v = np.array([analytic_variance_remaining(p, k) for p in grid])
    elif v_mode == "empirical":
        if x is None or space is None:
            raise DomainError("empirical variance needs covariates and a design space")
        scorer = BalanceScorer(x, space, metric)
        scores = score_all(space, x, metric, scorer=scorer)
        v = empirical_variance_curve(scores, metric, grid, scorer.tie_tol)
    else:
        raise DomainError(f"unknown variance mode {v_mode!r}")
    return e, v


def _argmin_prefer_larger(values: np.ndarray) -> int:
    best = np.min(values)
    hits = np.flatnonzero(values <= best + 1e-15 * max(1.0, abs(best)))
    return int(hits[-1])


def heuristic_p_a(
    lam: float,
    k: int | None,
    n_candidates: int,
    v_mode: str = "analytic",
    *,
    x=None,
    space: DesignSpace | None = None,
    metric=Metric.MAHALANOBIS,
    grid_size: int = DEFAULT_HEURISTIC_GRID,
    grid=None,
) -> HeuristicChoice:
    """Minimize ``lam * min_p(p_a) + (1 - lam) * v(p_a)`` over a dense grid.

    The minimum p-value is a step function of the acceptance count, so the
    search is exhaustive over the grid rather than gradient based. Exact ties
    go to the larger ``p_a``.
    """
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    grid = heuristic_grid(n_candidates, grid_size) if grid is None else np.asarray(grid, dtype=float)
    e, v = _heuristic_components(k, n_candidates, v_mode, grid, x, space, Metric.parse(metric))
    obj = lam * e + (1.0 - lam) * v
    best = _argmin_prefer_larger(obj)
    return HeuristicChoice(float(grid[best]), float(lam), grid, e, v, obj)


def implied_lambda(
    p_a_chosen: float,
    k: int | None,
    n_candidates: int,
    v_mode: str = "analytic",
    *,
    x=None,
    space: DesignSpace | None = None,
    metric=Metric.MAHALANOBIS,
    grid_size: int = DEFAULT_HEURISTIC_GRID,
    grid=None,
) -> tuple[float, float] | None:
    """Interval of weights ``lam`` for which ``p_a_chosen`` is a grid minimizer.

    Returns ``None`` when no weight in [0, 1] selects it.
    """
    if not 1.0 / n_candidates - 1e-15 <= p_a_chosen <= 1.0:
        raise DomainError("p_a_chosen is not feasible")
    grid = heuristic_grid(n_candidates, grid_size) if grid is None else np.asarray(grid, dtype=float)
    if not np.any(np.isclose(grid, p_a_chosen, rtol=1e-12, atol=0)):
        grid = np.unique(np.append(grid, p_a_chosen))
    e, v = _heuristic_components(k, n_candidates, v_mode, grid, x, space, Metric.parse(metric))
    c = int(np.argmin(np.abs(grid - p_a_chosen)))
    lo, hi = 0.0, 1.0
    slack = 1e-12
    # lam * (de - dv) <= -dv for every competitor q, with d* = value(c) - value(q)
    de = e[c] - e
    dv = v[c] - v
    coef = de - dv
    rhs = -dv + slack
    for a, b in zip(coef, rhs):
        if abs(a) <= 1e-300:
            if b < 0:
                return None
        elif a > 0:
            hi = min(hi, b / a)
        else:
            lo = max(lo, b / a)
    if lo > hi:
        return None
    return (max(0.0, lo), min(1.0, hi))


# -- prior-informed expected p-value ----------------------------------------


@dataclass
class World:
    """One simulated experiment: covariates and both potential outcomes."""

    x: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    tau: float


class WorldSource(Protocol):
    fixed_covariates: bool

    def draw(self, rng: np.random.Generator) -> World: ...


@dataclass
class PriorSpec:
    """Beliefs about the outcome model used to score designs.

    ``covariates`` is either a fixed ``(n, k)`` matrix (the usual design-stage
    situation) or an :class:`MVNSpec` from which unit rows are drawn.
    ``tau_sd = 0`` gives a point mass at ``tau_mean``.
    """

    beta: MVNSpec
    tau_mean: float = 0.0
    tau_sd: float = 10.0
    noise_sd: float = 1.0
    covariates: np.ndarray | MVNSpec | None = None
    n: int | None = None

    def __post_init__(self):
        if self.noise_sd < 0 or self.tau_sd < 0:
            raise DomainError("prior standard deviations must be non-negative")
        if isinstance(self.covariates, MVNSpec):
            if self.covariates.dim != self.beta.dim:
                raise DomainError("covariate and coefficient dimensions disagree")
        elif self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[1] != self.beta.dim:
                raise DomainError("covariate and coefficient dimensions disagree")
            self.covariates = x
            self.n = x.shape[0]

    @classmethod
    def noninformative(cls, k: int, covariates=None, sd: float = 10.0, noise_sd: float = 1.0, n=None):
        """Zero-mean Gaussian priors with standard deviation ``sd`` per coefficient."""
        return cls(MVNSpec.isotropic(k, sd), 0.0, sd, noise_sd, covariates, n)

    @classmethod
    def point_mass(cls, beta, tau: float, noise_sd: float, covariates=None, n=None):
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        spec = MVNSpec(beta, np.zeros((beta.size, beta.size)))
        return cls(spec, float(tau), 0.0, noise_sd, covariates, n)

    @property
    def k(self) -> int:
        return self.beta.dim

    @property
    def fixed_covariates(self) -> bool:
        return not isinstance(self.covariates, MVNSpec)

    def with_covariates(self, x) -> "PriorSpec":
        return PriorSpec(self.beta, self.tau_mean, self.tau_sd, self.noise_sd, x)

    def draw(self, rng: np.random.Generator) -> World:
        if isinstance(self.covariates, MVNSpec):
            if self.n is None:
                raise DomainError("random covariates need the unit count n")
            x = draw_mvn_rows(self.covariates, self.n, rng)
        elif self.covariates is None:
            raise DomainError("prior has no covariates")
        else:
            x = self.covariates
        beta = draw_mvn_rows(self.beta, 1, rng)[0]
        tau = self.tau_mean + self.tau_sd * rng.standard_normal()
        n = x.shape[0]
        base = x @ beta
        y0 = base + self.noise_sd * rng.standard_normal(n)
        y1 = base + tau + self.noise_sd * rng.standard_normal(n)
        return World(x, y0, y1, float(tau))


def draw_mvn_rows(spec: MVNSpec, rows: int, rng: np.random.Generator) -> np.ndarray:
    """``rows`` draws from ``spec``; degenerate (PSD) covariances are allowed."""
    z = rng.standard_normal((rows, spec.dim))
    if not np.any(spec.cov):
        return np.broadcast_to(spec.mean, (rows, spec.dim)).copy()
    try:
        root = numerics.cholesky(spec.cov)
    except DomainError:
        vals, vecs = np.linalg.eigh(spec.cov)
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return spec.mean + z @ root.T


@dataclass
class DesignCurve:
    p_a: np.ndarray
    expected_p_value: np.ndarray
    stderr: np.ndarray
    set_size: np.ndarray
    mc_iters: int
    argmin_p_a: float
    warnings: list = field(default_factory=list)
    per_iteration: np.ndarray | None = field(default=None, repr=False)

    @property
    def min_expected_p_value(self) -> float:
        return float(self.expected_p_value[np.argmin(np.abs(self.p_a - self.argmin_p_a))])

    def rows(self):
        return [
            (float(p), float(v), float(s))
            for p, v, s in zip(self.p_a, self.expected_p_value, self.stderr)
        ]

    def to_dict(self) -> dict:
        return {
            "argmin_p_a": self.argmin_p_a,
            "min_expected_p_value": self.min_expected_p_value,
            "mc_iters": self.mc_iters,
            "points": [
                {"p_a": p, "expected_p_value": v, "stderr": s, "mean_set_size": float(m)}
                for (p, v, s), m in zip(self.rows(), self.set_size)
            ],
            "warnings": list(self.warnings),
        }


def design_grid(n_candidates: int, points: int = 16, min_count: int = 1) -> np.ndarray:
    """Acceptance probabilities for geometrically spaced acceptance counts.

    Counts run from ``min_count`` to ``n_candidates``; duplicates after
    rounding are dropped, so small designs get fewer points.
    """
    lo = max(1, min(int(min_count), n_candidates))
    counts = np.unique(np.round(np.geomspace(lo, n_candidates, max(points, 2))).astype(np.int64))
    return counts / n_candidates


class CandidateOrdering:
    """Candidates of one covariate realization sorted by ``(score, index)``."""

    def __init__(self, space: DesignSpace, x, metric, grid: np.ndarray):
        scorer = BalanceScorer(x, space, metric)
        full = candidate_indicator(space)
        scores = scorer.score_indicator(full)
        order = np.lexsort((np.arange(scores.size), scores))
        sorted_scores = scores[order]
        n = space.n
        self.ind = full[order]
        tol = scorer.tie_tol
        sizes = []
        for p in grid:
            m = accept_count(p, scores.size)
            sizes.append(int(np.searchsorted(sorted_scores, sorted_scores[m - 1] + tol, side="right")))
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.n = n
        self.t = space.n_treated


def _pvalues_for_world(world: World, ordering: CandidateOrdering, u: float) -> np.ndarray:
    """Two-sided p-value at ``tau0 = 0`` for each grid set, CRN draw ``u``."""
    n, t = ordering.n, ordering.t
    out = np.empty(ordering.sizes.size)
    delta = world.y1 - world.y0
    for j, m in enumerate(ordering.sizes):
        pos = min(int(u * m), m - 1)
        w = ordering.ind[pos]
        y = world.y0 + delta * w
        s = ordering.ind[:m] @ y
        stat = s / t - (y.sum() - s) / (n - t)
        obs = stat[pos]
        tol = 1e-9 * max(float(np.max(np.abs(y))), 1e-300)
        out[j] = np.count_nonzero(np.abs(stat) >= abs(obs) - tol) / m
    return out


def expected_pvalue_curve(
    source: WorldSource,
    space: DesignSpace,
    p_a_grid,
    mc_iters: int,
    seed=None,
    *,
    metric=Metric.MAHALANOBIS,
    threads: int = 1,
) -> DesignCurve:
    """Monte-Carlo expected p-value of the test of no effect, per ``p_a``.

    Iteration ``i`` draws its world from ``child_rng(root, i)``; the same world
    and the same uniform assignment draw are shared by every grid point.
    """
    if mc_iters < 1:
        raise DomainError("mc_iters must be at least 1")
    metric = Metric.parse(metric)
    grid = np.asarray(p_a_grid, dtype=float)
    notes = []
    ok = (grid > 0) & (grid <= 1)
    if not ok.all():
        for p in grid[~ok]:
            msg = f"skipped infeasible grid point p_a={p!r}"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        grid = grid[ok]
    if grid.size == 0:
        raise DomainError("no feasible grid points")
    order = np.argsort(grid, kind="stable")
    grid = grid[order]
    root = root_of(seed)
    fixed: CandidateOrdering | None = None
    if source.fixed_covariates:
        probe = source.draw(child_rng(root, 0))
        fixed = CandidateOrdering(space, probe.x, metric, grid)

    def one(i: int):
        rng = child_rng(root, i)
        world = source.draw(rng)
        u = rng.random()
        ordering = fixed if fixed is not None else CandidateOrdering(space, world.x, metric, grid)
        return _pvalues_for_world(world, ordering, u), ordering.sizes

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(mc_iters)))
    else:
        results = [one(i) for i in range(mc_iters)]
    pvals = np.vstack([r[0] for r in results])
    sizes = np.vstack([r[1] for r in results]).mean(axis=0)
    mean = pvals.mean(axis=0)
    se = pvals.std(axis=0, ddof=1) / math.sqrt(mc_iters) if mc_iters > 1 else np.zeros_like(mean)
    best = _argmin_prefer_larger(mean)
    return DesignCurve(grid, mean, se, sizes, mc_iters, float(grid[best]), notes, pvals)


def design_expected_pvalue(
    prior: PriorSpec,
    space: DesignSpace,
    p_a_grid=None,
    mc_iters: int = 200,
    seed=None,
    *,
    metric=Metric.MAHALANOBIS,
    threads: int = 1,
) -> DesignCurve:
    """Expected p-value curve under ``prior`` and its minimizing ``p_a``."""
    if prior.fixed_covariates and prior.covariates is not None and prior.covariates.shape[0] != space.n:
        raise DomainError("prior covariates do not match the design size")
    if not prior.fixed_covariates and prior.n is None:
        prior = PriorSpec(prior.beta, prior.tau_mean, prior.tau_sd, prior.noise_sd, prior.covariates, space.n)
    if p_a_grid is None:
        p_a_grid = design_grid(count_randomizations(space))
    return expected_pvalue_curve(prior, space, p_a_grid, mc_iters, seed, metric=metric, threads=threads)


# -- deterministic limit ----------------------------------------------------


def kasy_degenerate_set(space: DesignSpace, x, metric=Metric.MAHALANOBIS) -> AcceptanceSet:
    """Acceptance set holding only the best-balanced assignment.

    Ties for the best score go to the lowest enumeration index;
    ``tie_count`` reports how many candidates shared that score.
    """
    metric = Metric.parse(metric)
    scorer = BalanceScorer(x, space, metric)
    scores = score_all(space, x, metric, scorer=scorer)
    best = scores.min()
    tied = np.flatnonzero(scores <= best + scorer.tie_tol)
    idx = np.array([tied[0]], dtype=np.int64)
    return AcceptanceSet(
        space, metric, "kasy", 1.0 / scores.size, float(scores[tied[0]]), idx,
        scores[idx], scores.size, tie_count=int(tied.size),
    )


def expected_wait(p_a: float) -> float:
    """Mean number of uniform proposals until one is accepted."""
    if not 0.0 < p_a <= 1.0:
        raise DomainError(f"p_a must lie in (0, 1], got {p_a}")
    return 1.0 / p_a


SourceFactory = Callable[[np.ndarray], WorldSource]
