import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rerand.errors import DomainError, InfeasibleTargetError
from rerand.inference import OutcomeVector, fiducial_interval, minimum_p_value, randomization_test
from rerand.numerics import MVNSpec
from rerand.randset import DesignSpace
from rerand.threshold import (
    PriorSpec,
    apriori_p_a,
    design_expected_pvalue,
    design_grid,
    expected_wait,
    heuristic_grid,
    heuristic_p_a,
    implied_lambda,
    kasy_degenerate_set,
)

N_BIG = 184756


class TestApriori:
    def test_five_percent_of_seventy(self):
        c = apriori_p_a(0.05, 70)
        assert c.reference_size == 20 and c.p_a == pytest.approx(2 / 7)

    def test_infeasible(self):
        with pytest.raises(InfeasibleTargetError) as err:
            apriori_p_a(0.001, 252)
        assert err.value.smallest == pytest.approx(1 / 252)
        assert "0.003968" in str(err.value)

    def test_beta_one_is_degenerate(self):
        c = apriori_p_a(1.0, 70)
        assert c.reference_size == 1 and c.min_p_value == 1.0

    def test_thousand_member_floor(self):
        assert apriori_p_a(0.001, N_BIG).reference_size == 1000

    @pytest.mark.parametrize("beta", [0.0, -0.1, 1.2])
    def test_domain(self, beta):
        with pytest.raises(DomainError):
            apriori_p_a(beta, 70)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-4, 1.0))
    def test_bracketing(self, beta):
        size = apriori_p_a(beta, 10**6).reference_size
        assert minimum_p_value(size) <= beta * (1 + 1e-9)
        if size > 1:
            assert beta < minimum_p_value(size - 1)


def oracle_objective(lam, k, n_cand, grid):
    """Objective on a grid using scipy's chi-squared functions."""
    e = 1.0 / np.ceil(grid * n_cand - 1e-9 * grid * n_cand)
    v = np.ones_like(grid)
    inner = grid < 1
    a = stats.chi2.ppf(grid[inner], k)
    v[inner] = stats.chi2.cdf(a, k + 2) / grid[inner]
    return lam * e + (1 - lam) * v


class TestHeuristic:
    def test_lambda_one(self):
        assert heuristic_p_a(1.0, 3, 1000).p_a == 1.0

    def test_lambda_zero(self):
        assert heuristic_p_a(0.0, 3, 1000).p_a == pytest.approx(1e-3)

    def test_interior_against_oracle(self):
        choice = heuristic_p_a(0.5, 3, N_BIG, grid_size=10_000)
        assert 1 / N_BIG < choice.p_a < 1
        ref = oracle_objective(0.5, 3, N_BIG, choice.grid)
        assert np.allclose(choice.objective, ref, atol=1e-9)
        assert choice.grid[np.argmin(ref)] == pytest.approx(choice.p_a)

    def test_objective_components_bounded(self):
        choice = heuristic_p_a(0.3, 2, 5000)
        for arr in (choice.min_p, choice.variance):
            assert np.all((arr >= 0) & (arr <= 1))
        assert np.all(choice.objective >= choice.objective[np.searchsorted(choice.grid, choice.p_a)] - 1e-15)

    def test_grid_endpoints(self):
        g = heuristic_grid(252, 64)
        assert g[0] == 1 / 252 and g[-1] == 1.0 and np.all(np.diff(g) > 0)

    def test_empirical_mode(self, h8, space84):
        choice = heuristic_p_a(0.0, None, 70, "empirical", x=h8, space=space84, metric="m")
        assert choice.variance[0] == 0.0
        assert choice.p_a <= 8 / 70

    def test_bad_lambda(self):
        with pytest.raises(DomainError):
            heuristic_p_a(1.5, 2, 100)


class TestImpliedLambda:
    def test_full_acceptance_includes_one(self):
        lo, hi = implied_lambda(1.0, 3, 1000)
        assert hi == 1.0

    def test_strictest_includes_zero(self):
        lo, hi = implied_lambda(1e-3, 3, 1000)
        assert lo == 0.0

    @pytest.mark.parametrize("lam", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    def test_round_trip(self, lam):
        p = heuristic_p_a(lam, 3, N_BIG).p_a
        lo, hi = implied_lambda(p, 3, N_BIG)
        assert lo <= lam <= hi

    def test_dominated_choice_is_empty(self):
        # 0.025 and 0.021 both give a reference set of 3 out of 100, and the
        # smaller p_a leaves less variance, so 0.025 is never optimal
        grid = np.array([0.01, 0.021, 0.5, 1.0])
        assert implied_lambda(0.021, 3, 100, grid=grid) is not None
        assert implied_lambda(0.025, 3, 100, grid=grid) is None


class TestDesignCurve:
    def test_null_prior_super_uniform(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 2))
        prior = PriorSpec(MVNSpec.isotropic(2, 10.0), 0.0, 0.0, 1.0, x)
        space = DesignSpace.complete(12, 6)
        curve = design_expected_pvalue(prior, space, design_grid(924, 10), 600, seed=1)
        assert curve.expected_p_value[0] == 1.0
        assert np.all(curve.expected_p_value >= 0.5 - 3 * curve.stderr - 1e-12)
        full = curve.set_size[-1]
        assert abs(curve.expected_p_value[-1] - (full + 1) / (2 * full)) < 3 * curve.stderr[-1]

    def test_large_effect_interior(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((12, 2))
        prior = PriorSpec.point_mass([1.0, 1.0], 1.0, 0.1, x)
        curve = design_expected_pvalue(prior, DesignSpace.complete(12, 6), None, 300, seed=2)
        i = int(np.argmin(curve.expected_p_value))
        assert 0 < i < len(curve.p_a) - 1
        assert curve.p_a[i] == curve.argmin_p_a
        assert curve.min_expected_p_value < curve.expected_p_value[-1]

    def test_pointwise_bounds(self):
        x = np.random.default_rng(2).standard_normal((10, 2))
        prior = PriorSpec.noninformative(2, covariates=x)
        curve = design_expected_pvalue(prior, DesignSpace.complete(10, 5), None, 100, seed=3)
        floor = 1.0 / np.ceil(curve.p_a * 252 - 1e-9)
        assert np.all(curve.expected_p_value >= floor - 1e-12)
        assert np.all(curve.expected_p_value <= 1.0)
        assert np.all(np.diff(curve.p_a) > 0)

    def test_random_covariates_and_threads(self):
        prior = PriorSpec(MVNSpec.isotropic(2, 10.0), 0.0, 10.0, 1.0, MVNSpec.isotropic(2))
        space = DesignSpace.complete(10, 5)
        a = design_expected_pvalue(prior, space, None, 60, seed=4, threads=1)
        b = design_expected_pvalue(prior, space, None, 60, seed=4, threads=3)
        assert np.array_equal(a.per_iteration, b.per_iteration)
        assert a.argmin_p_a == b.argmin_p_a

    def test_infeasible_grid_point_skipped(self):
        x = np.random.default_rng(5).standard_normal((8, 1))
        prior = PriorSpec.noninformative(1, covariates=x)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            curve = design_expected_pvalue(prior, DesignSpace.complete(8, 4), [0.0, 0.5, 1.0, 1.5], 20, seed=1)
        assert list(curve.p_a) == [0.5, 1.0]
        assert len(curve.warnings) == 2 and len(caught) == 2

    def test_mismatched_prior(self):
        with pytest.raises(DomainError):
            PriorSpec.noninformative(3, covariates=np.zeros((6, 2)))
        with pytest.raises(DomainError):
            PriorSpec(MVNSpec.isotropic(2), noise_sd=-1.0)


class TestKasy:
    def test_tie_count(self, h8, space84):
        aset = kasy_degenerate_set(space84, h8, "m")
        assert aset.size == 1 and aset.tie_count == 8
        assert aset.scores[0] == pytest.approx(0.0, abs=1e-12)
        assert aset.assignment(0).treated == (0, 1, 6, 7)

    def test_non_informative(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((10, 2))
        aset = kasy_degenerate_set(DesignSpace.complete(10, 5), x)
        y = OutcomeVector(rng.standard_normal(10), aset.assignment(0))
        assert randomization_test(y, aset, 4.0).p_value == 1.0
        fi = fiducial_interval(y, aset)
        assert fi.lower == -math.inf and fi.upper == math.inf

    def test_waiting_time(self):
        assert expected_wait(2.0**-20) == 1_048_576
