import numpy as np
import pytest

from rerand.errors import DomainError, SingularDesignError
from rerand.randset import AssignmentVector, DesignSpace
from rerand.simharness import (
    LinearDGP,
    StudyConfig,
    run_selector_study,
    semisynthetic_build,
    simulate_potential_outcomes,
    synthetic_trial_table,
    tau_sampling_report,
    true_optimal_p_a,
    uniform_baseline_rmse,
)
from rerand.threshold import PriorSpec, design_grid, expected_pvalue_curve


class TestLinearDGP:
    def test_no_noise_constant_effect(self):
        x, y0, y1 = simulate_potential_outcomes(LinearDGP(20, 0.7, noise=0.0), seed=1)
        assert np.allclose(y1 - y0, 0.7, atol=1e-15)

    def test_zero_outcome(self):
        _, y0, _ = simulate_potential_outcomes(LinearDGP(10, 1.0, beta=[0.0, 0.0], noise=0.0), seed=1)
        assert np.all(y0 == 0)

    def test_variance_moment(self):
        dgp = LinearDGP(10_000, 0.0, beta=[1.0], noise=0.5, noise_is_variance=True)
        _, y0, _ = simulate_potential_outcomes(dgp, seed=2)
        assert np.var(y0) == pytest.approx(1.5, rel=0.05)

    def test_noise_reading(self):
        assert LinearDGP(6, 1.0).noise_sd == pytest.approx(np.sqrt(0.1))
        assert LinearDGP(6, 1.0, noise=0.1, noise_is_variance=False).noise_sd == 0.1
        assert np.allclose(LinearDGP(6, 1.0).covariate_spec.cov, np.eye(2))

    def test_deterministic(self):
        a = simulate_potential_outcomes(LinearDGP(8, 1.0), seed=3)
        b = simulate_potential_outcomes(LinearDGP(8, 1.0), seed=3)
        assert all(np.array_equal(u, v) for u, v in zip(a, b))

    def test_imbalance_identity(self):
        beta = np.array([1.5, -0.5])
        x, y0, y1 = simulate_potential_outcomes(LinearDGP(12, 2.0, beta=beta, noise=0.0), seed=4)
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = AssignmentVector(12, tuple(sorted(rng.choice(12, 6, replace=False))))
            t = w.bits.astype(bool)
            y = np.where(t, y1, y0)
            est = y[t].mean() - y[~t].mean()
            gap = (x[t].mean(0) - x[~t].mean(0)) @ beta
            assert abs((est - 2.0) - gap) < 1e-10

    def test_invalid(self):
        with pytest.raises(DomainError):
            LinearDGP(6, 1.0, noise=-1)


class TestTrueOptimum:
    def test_null_prefers_full_set(self):
        space = DesignSpace.complete(6, 3)
        assert true_optimal_p_a(LinearDGP(6, 0.0), space, design_grid(20, 12), 10_000, seed=1) == 1.0

    def test_single_point_grid(self):
        space = DesignSpace.complete(8, 4)
        assert true_optimal_p_a(LinearDGP(8, 1.0), space, [0.3], 10, seed=1) == 0.3

    def test_interior_and_stable(self):
        space = DesignSpace.complete(12, 6)
        grid = design_grid(924, 12)
        dgp = LinearDGP(12, 1.0, noise=1e-4)
        picks = [true_optimal_p_a(dgp, space, grid, 5000, seed=s) for s in (1, 2)]
        assert all(grid[0] < p < 1.0 for p in picks)
        i, j = (int(np.searchsorted(grid, p)) for p in picks)
        assert abs(i - j) <= 1


class TestSelectorStudy:
    def test_point_mass_prior_small_bias(self):
        config = StudyConfig(n_grid=(12,), tau_grid=(1.0,), replications=30, seed=5, noise=0.0,
                             truth_mc_iters=20_000, design_mc_iters=400)
        cell = run_selector_study(config, PriorSpec.point_mass([1.0, 1.0], 1.0, 0.0)).cells[0]
        grid = design_grid(924, 12)
        i = int(np.searchsorted(grid, cell.true_optimal_p_a))
        step = min(grid[i] - grid[i - 1], grid[i + 1] - grid[i])
        assert abs(cell.bias) < 0.5 * step
        assert np.all(np.isin(cell.selected, grid[i - 1 : i + 2]))

    def test_reproducible_across_threads(self):
        config = StudyConfig(n_grid=(6,), tau_grid=(1.0,), replications=6, seed=9,
                             truth_mc_iters=500, design_mc_iters=30)
        a = run_selector_study(config, threads=1).to_dict()
        b = run_selector_study(config, threads=3).to_dict()
        assert a == b

    def test_rmse_finite_positive(self, selector_study):
        for cell in selector_study.cells:
            for v in (cell.rmse, cell.baseline_rmse, cell.relative_rmse):
                assert np.isfinite(v) and v > 0

    def test_bias_sign_on_average(self, selector_study):
        biases = [c.bias for c in selector_study.cells]
        assert np.mean(biases) < 0

    def test_baseline(self):
        rng = np.random.default_rng(0)
        # E[(U - 1)^2] = 1/3 for U ~ Uniform(0, 1]
        assert uniform_baseline_rmse(1.0, 10**9, 200_000, rng) == pytest.approx(np.sqrt(1 / 3), rel=0.01)

    def test_config_validation(self):
        with pytest.raises(DomainError):
            StudyConfig(n_grid=())
        with pytest.raises(DomainError):
            StudyConfig(n_grid=(7,))


class TestSemiSynthetic:
    def table(self, noise=1.0, n=200):
        return synthetic_trial_table(n=n, k=2, tau=1.5, noise_sd=noise, seed=3)

    def test_full_fraction(self):
        x, y, arms = self.table()
        _, idx = semisynthetic_build(x, y, arms, 1.0, seed=1)
        assert np.array_equal(idx, np.arange(200))

    def test_subsample_without_replacement(self):
        x, y, arms = self.table()
        sizes = []
        for s in range(10):
            _, idx = semisynthetic_build(x, y, arms, 0.1, seed=s)
            assert len(set(idx.tolist())) == idx.size
            sizes.append(idx.size)
        assert np.mean(sizes) == 20

    def test_degenerate_coefficients(self):
        x, y, arms = self.table(noise=0.0)
        model, idx = semisynthetic_build(x, y, arms, 0.2, seed=1)
        assert model.tau_hat == pytest.approx(1.5, abs=1e-9)
        world = model.source(idx).draw(np.random.default_rng(0))
        assert world.tau == model.tau_hat
        assert np.allclose(world.y1 - world.y0, model.tau_hat)

    def test_fit_recovers_effect(self):
        x, y, arms = synthetic_trial_table(n=2000, k=2, tau=1.0, seed=4)
        model, _ = semisynthetic_build(x, y, arms, 0.01, seed=1)
        assert model.tau_hat == pytest.approx(1.0, abs=4 * np.sqrt(model.fit.coef_cov[-1, -1]))

    def test_errors(self):
        x, y, arms = self.table()
        with pytest.raises(DomainError):
            semisynthetic_build(x, y, ["a"] * 200, 0.5)
        with pytest.raises(DomainError):
            semisynthetic_build(x, y, arms, 0.015)
        with pytest.raises(SingularDesignError):
            semisynthetic_build(np.column_stack([x[:, 0], x[:, 0]]), y, arms, 0.5)
        three = [a if i % 3 else "other" for i, a in enumerate(arms)]
        with pytest.raises(DomainError):
            semisynthetic_build(x, y, three, 0.5)
        model, _ = semisynthetic_build(x, y, three, 0.5, treated_label="treatment", control_label="control")
        assert model.covariates.shape[0] < 200

    def test_end_to_end(self):
        x, y, arms = synthetic_trial_table(n=200, k=2, tau=1.0, beta=[2.0, 2.0], seed=5)
        model, idx = semisynthetic_build(x, y, arms, 0.1, seed=2)
        source = model.source(idx)
        space = DesignSpace.complete(20, 10)
        curve = expected_pvalue_curve(source, space, design_grid(184756, 12), 200, seed=3)
        i = int(np.argmin(curve.expected_p_value))
        assert 0 < i < len(curve.p_a) - 1
        rep = tau_sampling_report(source, space, [1e-3, 1e-2, 0.1, 1.0], 300, seed=4)
        assert np.all(np.diff(rep.sd_tau_hat) > 0)
        assert rep.mean_abs_dev[0] < rep.mean_abs_dev[-1]


class TestTauSampling:
    def test_pure_effect(self):
        dgp = LinearDGP(10, 2.0, beta=[0.0, 0.0], noise=0.0)
        rep = tau_sampling_report(dgp, DesignSpace.complete(10, 5), [0.05, 0.5, 1.0], 20, seed=1)
        assert np.allclose(rep.mean_tau_hat, 2.0) and np.allclose(rep.sd_tau_hat, 0.0, atol=1e-12)

    def test_trend_over_seeds(self):
        space = DesignSpace.complete(12, 6)
        dgp = LinearDGP(12, 1.0, beta=[3.0, 3.0])
        sds = np.array([
            tau_sampling_report(dgp, space, [0.01, 0.1, 1.0], 100, seed=s).sd_tau_hat for s in range(20)
        ]).mean(axis=0)
        assert np.all(np.diff(sds) > 0)

    def test_paired_deviation(self):
        space = DesignSpace.complete(12, 6)
        dgp = LinearDGP(12, 1.0, beta=[3.0, 3.0])
        rep = tau_sampling_report(dgp, space, [0.01, 1.0], 500, seed=7)
        assert rep.mean_abs_dev[0] < rep.mean_abs_dev[1]
