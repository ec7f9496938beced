"""Simulation studies for threshold selectors.

Two sources of synthetic experiments are provided: a linear data-generating
process with Gaussian covariates, and an imputation model fitted by OLS to
real trial data whose covariate profiles are held fixed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._rng import child_rng, root_of
from .balance import Metric
from .errors import DomainError
from .numerics import MVNSpec, OLSFit, ols_fit
from .randset import DesignSpace, count_randomizations
from .threshold import (
    CandidateOrdering,
    PriorSpec,
    World,
    design_expected_pvalue,
    design_grid,
    draw_mvn_rows,
    expected_pvalue_curve,
)

BASELINE_DRAWS = 1000


# -- linear data-generating process -----------------------------------------


@dataclass
class LinearDGP:
    """``Y(0) = X beta + e0`` and ``Y(1) = tau + X beta + e1``.

    ``noise`` is a variance when ``noise_is_variance`` (the default), else a
    standard deviation.
    """

    n: int
    tau: float
    beta: np.ndarray = field(default_factory=lambda: np.ones(2))
    noise: float = 0.1
    noise_is_variance: bool = True
    covariate_sd: np.ndarray | None = None

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.n < 2:
            raise DomainError("need at least two units")
        if self.noise < 0:
            raise DomainError("noise must be non-negative")
        sd = np.ones(self.k) if self.covariate_sd is None else np.atleast_1d(np.asarray(self.covariate_sd, float))
        if sd.shape != (self.k,) or np.any(sd <= 0):
            raise DomainError("covariate_sd must be positive with one entry per coefficient")
        self.covariate_sd = sd

    @property
    def k(self) -> int:
        return self.beta.size

    @property
    def noise_sd(self) -> float:
        return math.sqrt(self.noise) if self.noise_is_variance else float(self.noise)

    @property
    def covariate_spec(self) -> MVNSpec:
        return MVNSpec(np.zeros(self.k), np.diag(self.covariate_sd**2))

    fixed_covariates = False

    def draw_covariates(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((self.n, self.k)) * self.covariate_sd

    def outcomes(self, x: np.ndarray, rng: np.random.Generator) -> World:
        base = x @ self.beta
        sd = self.noise_sd
        y0 = base + sd * rng.standard_normal(self.n)
        y1 = base + self.tau + sd * rng.standard_normal(self.n)
        return World(x, y0, y1, float(self.tau))

    def draw(self, rng: np.random.Generator) -> World:
        return self.outcomes(self.draw_covariates(rng), rng)

    def given(self, x) -> "_FixedX":
        """The same process with covariates held at ``x``."""
        return _FixedX(self, np.asarray(x, dtype=float))


@dataclass
class _FixedX:
    dgp: LinearDGP
    x: np.ndarray
    fixed_covariates = True

    def draw(self, rng: np.random.Generator) -> World:
        return self.dgp.outcomes(self.x, rng)


def simulate_potential_outcomes(dgp: LinearDGP, seed=None):
    """Covariates and both potential outcome vectors, deterministic in ``seed``."""
    rng = child_rng(root_of(seed), "outcomes")
    world = dgp.draw(rng)
    return world.x, world.y0, world.y1


def true_optimal_p_a(
    dgp, space: DesignSpace, p_a_grid, mc_iters: int, seed=None, *, metric=Metric.MAHALANOBIS, threads=1
) -> float:
    """Expected p-value minimizer under the true process, averaging over covariate draws."""
    return expected_pvalue_curve(dgp, space, p_a_grid, mc_iters, seed, metric=metric, threads=threads).argmin_p_a


# -- selector study ---------------------------------------------------------


@dataclass
class StudyConfig:
    n_grid: tuple = (6, 12, 18)
    tau_grid: tuple = (0.1, 1.0)
    replications: int = 200
    p_a_grid: tuple | None = None
    grid_points: int = 12
    seed: int | None = None
    design_mc_iters: int = 200
    truth_mc_iters: int = 100_000
    beta: tuple = (1.0, 1.0)
    noise: float = 0.1
    noise_is_variance: bool = True
    prior_sd: float = 10.0
    prior_noise_sd: float = 1.0
    baseline_draws: int = BASELINE_DRAWS

    def __post_init__(self):
        if not self.n_grid or not self.tau_grid:
            raise DomainError("n_grid and tau_grid must be nonempty")
        if self.replications < 1:
            raise DomainError("replications must be at least 1")
        for n in self.n_grid:
            if n < 4 or n % 2:
                raise DomainError(f"study sizes must be even and at least 4, got {n}")

    def grid_for(self, n_candidates: int) -> np.ndarray:
        if self.p_a_grid is not None:
            return np.asarray(self.p_a_grid, dtype=float)
        return design_grid(n_candidates, self.grid_points)

    def prior(self) -> PriorSpec:
        return PriorSpec.noninformative(len(self.beta), sd=self.prior_sd, noise_sd=self.prior_noise_sd)


@dataclass
class CellReport:
    n: int
    tau: float
    true_optimal_p_a: float
    selected: np.ndarray = field(repr=False)
    bias: float
    rmse: float
    baseline_rmse: float
    tau_dev_selected: float
    tau_dev_full: float

    @property
    def relative_rmse(self) -> float:
        return self.rmse / self.baseline_rmse

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "tau": self.tau,
            "true_optimal_p_a": self.true_optimal_p_a,
            "mean_selected_p_a": float(self.selected.mean()),
            "bias": self.bias,
            "rmse": self.rmse,
            "baseline_rmse": self.baseline_rmse,
            "relative_rmse": self.relative_rmse,
            "mean_abs_tau_dev_selected": self.tau_dev_selected,
            "mean_abs_tau_dev_full": self.tau_dev_full,
        }


@dataclass
class EvaluationReport:
    cells: list[CellReport]
    replications: int

    def cell(self, n: int, tau: float) -> CellReport:
        for c in self.cells:
            if c.n == n and math.isclose(c.tau, tau):
                return c
        raise KeyError((n, tau))

    def to_dict(self) -> dict:
        return {"replications": self.replications, "cells": [c.to_dict() for c in self.cells]}

    def rows(self):
        return [(c.n, c.tau, c.bias, c.rmse, c.baseline_rmse, c.relative_rmse) for c in self.cells]


def uniform_baseline_rmse(target: float, n_candidates: int, draws: int, rng) -> float:
    """RMSE of ``p_a ~ Uniform(1/n_candidates, 1]`` around ``target``."""
    lo = 1.0 / n_candidates
    u = lo + (1.0 - lo) * (1.0 - rng.random(draws))
    return float(np.sqrt(np.mean((u - target) ** 2)))


def _mean_abs_tau_dev(world: World, ordering: CandidateOrdering, m: int) -> float:
    """Exact mean ``|tau_hat - tau|`` over the first ``m`` ordered candidates."""
    ind = ordering.ind[:m]
    t, n = ordering.t, ordering.n
    y = world.y0 + (world.y1 - world.y0) * ind
    s = np.einsum("ij,ij->i", y, ind)
    tau_hat = s / t - (y.sum(axis=1) - s) / (n - t)
    return float(np.mean(np.abs(tau_hat - world.tau)))


def run_selector_study(config: StudyConfig, prior: PriorSpec | None = None, *, threads: int = 1) -> EvaluationReport:
    """Bias and relative RMSE of the prior-informed selector in each ``(n, tau)`` cell.

    Each replication draws one covariate realization, scores the design curve
    under ``prior`` with those covariates fixed, and records the chosen
    ``p_a``. The target is the true expected p-value minimizer.
    """
    prior = config.prior() if prior is None else prior
    root = root_of(config.seed)
    cells = []
    for ci, n in enumerate(config.n_grid):
        space = DesignSpace.complete(n, n // 2)
        n_cand = count_randomizations(space)
        grid = config.grid_for(n_cand)
        for ti, tau in enumerate(config.tau_grid):
            dgp = LinearDGP(n, tau, np.asarray(config.beta), config.noise, config.noise_is_variance)
            truth_seed = int(child_rng(root, ci, ti, "truth").integers(2**63))
            target = true_optimal_p_a(dgp, space, grid, config.truth_mc_iters, truth_seed)

            def replicate(r, dgp=dgp, space=space, grid=grid, ci=ci, ti=ti):
                rng = child_rng(root, ci, ti, "rep", r)
                x = dgp.draw_covariates(rng)
                design_seed = int(rng.integers(2**63))
                curve = design_expected_pvalue(
                    prior.with_covariates(x), space, grid, config.design_mc_iters, design_seed
                )
                world = dgp.outcomes(x, rng)
                ordering = CandidateOrdering(space, x, Metric.MAHALANOBIS, np.array([curve.argmin_p_a, 1.0]))
                dev_sel = _mean_abs_tau_dev(world, ordering, int(ordering.sizes[0]))
                dev_full = _mean_abs_tau_dev(world, ordering, int(ordering.sizes[1]))
                return curve.argmin_p_a, dev_sel, dev_full

            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    out = list(pool.map(replicate, range(config.replications)))
            else:
                out = [replicate(r) for r in range(config.replications)]
            selected = np.array([o[0] for o in out])
            err = selected - target
            base_rng = child_rng(root, ci, ti, "baseline")
            cells.append(
                CellReport(
                    n=n,
                    tau=float(tau),
                    true_optimal_p_a=float(target),
                    selected=selected,
                    bias=float(err.mean()),
                    rmse=float(np.sqrt(np.mean(err**2))),
                    baseline_rmse=uniform_baseline_rmse(target, n_cand, config.baseline_draws, base_rng),
                    tau_dev_selected=float(np.mean([o[1] for o in out])),
                    tau_dev_full=float(np.mean([o[2] for o in out])),
                )
            )
    return EvaluationReport(cells, config.replications)


# -- semi-synthetic imputation ----------------------------------------------


@dataclass
class ImputationModel:
    """OLS outcome model with a treatment indicator, fitted on full data.

    Each draw samples coefficients from ``MVN(coef, coef_cov)``; both
    potential outcomes of a unit share its fitted residual, so the unit-level
    effect equals the drawn treatment coefficient.
    """

    fit: OLSFit
    covariates: np.ndarray
    residuals: np.ndarray

    @property
    def k(self) -> int:
        return self.covariates.shape[1]

    @property
    def tau_hat(self) -> float:
        return float(self.fit.coef[-1])

    def source(self, indices) -> "ImputedSource":
        return ImputedSource(self, np.asarray(indices, dtype=np.int64))


@dataclass
class ImputedSource:
    model: ImputationModel
    indices: np.ndarray
    fixed_covariates = True

    @property
    def x(self) -> np.ndarray:
        return self.model.covariates[self.indices]

    def draw(self, rng: np.random.Generator) -> World:
        fit = self.model.fit
        coef = draw_mvn_rows(MVNSpec(fit.coef, fit.coef_cov), 1, rng)[0]
        x = self.x
        y0 = coef[0] + x @ coef[1:-1] + self.model.residuals[self.indices]
        tau = float(coef[-1])
        return World(x, y0, y0 + tau, tau)


def _treatment_indicator(labels: list[str], treated_label, control_label):
    arms = sorted(set(labels))
    if len(arms) < 2:
        raise DomainError("data must contain at least two arms")
    if treated_label is None or control_label is None:
        if len(arms) > 2:
            raise DomainError(f"more than two arms {arms}; name the treated and control labels")
        if treated_label is None and control_label is None:
            control_label, treated_label = arms
        elif treated_label is None:
            treated_label = next(a for a in arms if a != control_label)
        else:
            control_label = next(a for a in arms if a != treated_label)
    for lab in (treated_label, control_label):
        if lab not in arms:
            raise DomainError(f"arm label {lab!r} not present; have {arms}")
    keep = np.array([lab in (treated_label, control_label) for lab in labels])
    treat = np.array([lab == treated_label for lab in labels], dtype=float)
    return keep, treat


def semisynthetic_build(
    covariates,
    outcome,
    arms,
    fraction: float,
    seed=None,
    *,
    treated_label=None,
    control_label=None,
    names=None,
) -> tuple[ImputationModel, np.ndarray]:
    """Fit the imputation model on all rows and draw one subsample.

    ``arms`` holds one label per row. When there are more than two arms both
    labels must be named and other rows are dropped. The subsample has
    ``round(fraction * n)`` rows drawn without replacement; indices refer to
    the retained rows and are returned sorted.
    """
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must lie in (0, 1], got {fraction}")
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(outcome, dtype=float)
    labels = [str(a) for a in arms]
    if not (x.shape[0] == y.shape[0] == len(labels)):
        raise DomainError("covariates, outcome and arms disagree on the number of rows")
    keep, treat = _treatment_indicator(labels, treated_label, control_label)
    x, y, treat = x[keep], y[keep], treat[keep]
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(x.shape[1]))
    fit = ols_fit(np.column_stack([x, treat]), y, names=names + ("treated",))
    n = x.shape[0]
    size = int(round(fraction * n))
    if size < x.shape[1] + 2:
        raise DomainError(f"subsample of {size} rows is too small for {x.shape[1]} covariates")
    rng = child_rng(root_of(seed), "subsample")
    idx = np.sort(rng.choice(n, size=size, replace=False))
    return ImputationModel(fit, x, fit.residuals.copy()), idx


# -- sampling distribution of the estimator ---------------------------------


@dataclass
class TauSamplingReport:
    p_a: np.ndarray
    mean_tau_hat: np.ndarray
    sd_tau_hat: np.ndarray
    mean_abs_dev: np.ndarray
    mean_rel_dev: np.ndarray
    mc_iters: int

    def rows(self):
        return [
            (float(p), float(s), float(d))
            for p, s, d in zip(self.p_a, self.sd_tau_hat, self.mean_abs_dev)
        ]

    def to_dict(self) -> dict:
        return {
            "mc_iters": self.mc_iters,
            "points": [
                {
                    "p_a": float(p),
                    "mean_tau_hat": float(m),
                    "sd_tau_hat": float(s),
                    "mean_abs_dev": float(a),
                    "mean_rel_dev": float(r),
                }
                for p, m, s, a, r in zip(
                    self.p_a, self.mean_tau_hat, self.sd_tau_hat, self.mean_abs_dev, self.mean_rel_dev
                )
            ],
        }


def tau_sampling_report(
    source, space: DesignSpace, p_a_grid, mc_iters: int, seed=None, *, metric=Metric.MAHALANOBIS
) -> TauSamplingReport:
    """Distribution of the difference-in-means estimate per ``p_a``.

    Each iteration draws a world and one uniform position that selects an
    acceptable assignment at every grid point. The relative deviation is
    ``nan`` when the true effect is zero.
    """
    if mc_iters < 2:
        raise DomainError("mc_iters must be at least 2")
    grid = np.sort(np.asarray(p_a_grid, dtype=float))
    if np.any(grid <= 0) or np.any(grid > 1):
        raise DomainError("grid values must lie in (0, 1]")
    metric = Metric.parse(metric)
    root = root_of(seed)
    fixed = None
    if source.fixed_covariates:
        fixed = CandidateOrdering(space, source.draw(child_rng(root, 0)).x, metric, grid)
    t, n = space.n_treated, space.n
    est = np.empty((mc_iters, grid.size))
    truth = np.empty(mc_iters)
    for i in range(mc_iters):
        rng = child_rng(root, i)
        world = source.draw(rng)
        u = rng.random()
        ordering = fixed if fixed is not None else CandidateOrdering(space, world.x, metric, grid)
        truth[i] = world.tau
        for j, m in enumerate(ordering.sizes):
            w = ordering.ind[min(int(u * m), m - 1)]
            y = world.y0 + (world.y1 - world.y0) * w
            s = y @ w
            est[i, j] = s / t - (y.sum() - s) / (n - t)
    dev = np.abs(est - truth[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(truth[:, None] != 0, dev / np.abs(truth[:, None]), np.nan)
    return TauSamplingReport(
        grid, est.mean(axis=0), est.std(axis=0, ddof=1), dev.mean(axis=0), rel.mean(axis=0), mc_iters
    )


def synthetic_trial_table(n: int = 200, k: int = 2, tau: float = 1.0, beta=None,
                          noise_sd: float = 1.0, seed=None):
    """Stand-in trial data: ``(covariates, outcome, arm labels)``.

    Arms are a uniform half split labelled ``"treatment"``/``"control"``;
    the outcome is ``1 + X beta + tau * treated + noise``.
    """
    if n < 4:
        raise DomainError("need at least four rows")
    beta = np.full(k, 2.0) if beta is None else np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.size != k:
        raise DomainError("beta must have k entries")
    rng = child_rng(root_of(seed), "table")
    x = rng.standard_normal((n, k))
    treat = np.zeros(n)
    treat[rng.permutation(n)[: n // 2]] = 1.0
    y = 1.0 + x @ beta + tau * treat + noise_sd * rng.standard_normal(n)
    arms = np.where(treat == 1.0, "treatment", "control").tolist()
    return x, y, arms
