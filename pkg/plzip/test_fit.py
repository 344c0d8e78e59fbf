"""
Tests for fit.py functions
"""
# pylint: disable=too-few-public-methods&&missing-function-docstring&&protected-access
import logging

import numpy as np
import pytest
from scipy.special import expit, logit

import fit
from fit import (
    FitConfig,
    SeparationError,
    e_step,
    em_fit,
    fit_parametric_zip,
    initialize,
    m_hat_at,
    score_residuals,
    step1_local,
    step2_beta,
    step2_gamma,
    step3_m,
)
from leverage import omega
from loss import FAMILIES, build_loss_spec, psi, rho
from mc import SchemeConfig, gen_scheme
from model import Dataset, ThetaEstimate, posterior_w
from smoothing import KernelConfig, kernel_matrix, nw_weights


def poisson_irls(y, D, offset=None):
    """Plain IRLS for Poisson regression, used as an independent oracle."""
    offset = np.zeros(len(y)) if offset is None else offset
    b = np.zeros(D.shape[1])
    for _ in range(200):
        eta = D @ b + offset
        mu = np.exp(eta)
        working = eta - offset + (y - mu) / mu
        root_w = np.sqrt(mu)
        new = np.linalg.lstsq(root_w[:, None] * D, root_w * working, rcond=None)[0]
        if np.max(np.abs(new - b)) < 1e-13:
            return new
        b = new
    return b


def poisson_sample(seed, n=100):
    """Small ZIP-free Poisson sample with two covariates and one Z column."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, 2))
    t = rng.uniform(-1, 1, n)
    y = rng.poisson(np.exp(0.5 + X @ np.array([1.0, -0.5])))
    return Dataset(y, X, np.ones((n, 1)), t)


@pytest.fixture(scope="module")
def c0_fit():
    """ML fit on a clean simulated sample."""
    data, truth = gen_scheme(SchemeConfig("c0", n=300, seed=17))
    spec = build_loss_spec("ml")
    return data, truth, spec, em_fit(data, spec, KernelConfig(0.4))


@pytest.fixture(scope="module")
def mt_fit():
    """MT fit on a small sample with response outliers."""
    data, _ = gen_scheme(SchemeConfig("c1", n=50, seed=4))
    spec = build_loss_spec("mt")
    cfg = FitConfig(restarts=1, max_em_iters=40)
    return data, spec, cfg, em_fit(data, spec, KernelConfig(0.6), cfg)


def step3_objectives(result, data, spec, etas):
    """Localised step-3 objective at each grid point, for each column of ``etas``."""
    theta = result.theta
    weights = kernel_matrix(theta.t_grid, data.t, KernelConfig(theta.h))
    a = weights * ((1.0 - result.weights) * omega(data.X, result.leverage_x))[None, :]
    x_beta = data.X @ theta.beta
    return np.array([[np.sum(a[k] * rho(data.y, x_beta + eta, spec)) for eta in row]
                     for k, row in enumerate(etas)])


def assert_step3_minimisers(result, data, spec):
    m_grid = result.theta.m_grid
    values = step3_objectives(result, data, spec,
                              np.column_stack([m_grid - 0.05, m_grid, m_grid + 0.05]))
    slack = 1e-10 * (1.0 + np.abs(values[:, 1]))
    assert np.all(values[:, 1] <= values[:, 0] + slack)
    assert np.all(values[:, 1] <= values[:, 2] + slack)
    resolved = m_hat_at(data.t, result, data, spec)
    assert np.max(np.abs(resolved - result.theta.m_at(data.t))) <= 1e-8


def assert_same_fit(first, second, perm):
    assert np.max(np.abs(first.theta.beta - second.theta.beta)) <= 1e-8
    assert np.max(np.abs(first.theta.gamma - second.theta.gamma)) <= 1e-8
    assert np.max(np.abs(first.theta.m_grid - second.theta.m_grid)) <= 1e-8
    assert np.array_equal(first.weights[perm], second.weights)


class TestFitConfig:
    """Tests for FitConfig validation and defaults"""

    @pytest.mark.parametrize("kwargs", [{"max_em_iters": 0}, {"tol_param": 0.0},
                                        {"restarts": -1}])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            FitConfig(**kwargs)

    def test_robust_defaults(self):
        cfg = FitConfig()

        assert not cfg.leverages(build_loss_spec("ml"))
        assert cfg.leverages(build_loss_spec("ch"))
        assert cfg.guards(build_loss_spec("mt"))
        assert not FitConfig(guard_false_zeros=False).guards(build_loss_spec("mt"))


class TestEStep:
    """Tests for e_step function"""

    def test_positive_counts(self):
        data = Dataset(np.arange(1, 6), np.zeros((5, 0)), np.ones((5, 1)), np.arange(5.0))
        theta = ThetaEstimate([], [0.3], data.t, np.zeros(5))

        assert np.all(e_step(data, theta) == 0.0)

    def test_matches_posterior(self, c0_fit):
        data, _, _, result = c0_fit
        theta = result.theta

        expected = posterior_w(data.y, data.Z @ theta.gamma,
                               data.X @ theta.beta + theta.m_at(data.t))

        assert np.allclose(e_step(data, theta), expected)

    def test_large_intercept(self):
        data = Dataset(np.array([0, 0, 2]), np.zeros((3, 0)), np.ones((3, 1)), np.arange(3.0))
        theta = ThetaEstimate([], [40.0], data.t, np.zeros(3))

        assert e_step(data, theta) == pytest.approx([1.0, 1.0, 0.0])


class TestStep1Local:
    """Tests for step1_local function"""

    def test_intercept_only_closed_form(self):
        rng = np.random.default_rng(5)
        n = 40
        t = rng.uniform(-1, 1, n)
        y = rng.poisson(3.0, n)
        data = Dataset(y, np.zeros((n, 0)), np.ones((n, 1)), t)
        w = np.where(y == 0, 0.4, 0.0)
        kernel = KernelConfig(0.3)
        weights = nw_weights(0.2, t, kernel)

        beta, eta = step1_local(0.2, data, w, build_loss_spec("ml"), kernel)

        expected = np.log(np.sum(weights * (1 - w) * y) / np.sum(weights * (1 - w)))
        assert beta.size == 0
        assert eta == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_wide_window_is_global_poisson(self, seed):
        data = poisson_sample(seed)
        design = np.column_stack([data.X, np.ones(data.n)])

        beta, eta = step1_local(0.0, data, np.zeros(data.n), build_loss_spec("ml"),
                                KernelConfig(1e6))

        assert np.allclose(np.append(beta, eta), poisson_irls(data.y, design), atol=1e-6)

    def test_first_order_condition(self):
        data = poisson_sample(1)
        kernel = KernelConfig(0.3)
        weights = nw_weights(-0.4, data.t, kernel)

        beta, eta = step1_local(-0.4, data, np.zeros(data.n), build_loss_spec("ml"), kernel)

        residual = weights * (np.exp(data.X @ beta + eta) - data.y)
        score = np.append(data.X.T @ residual, residual.sum())
        assert np.linalg.norm(score) <= 1e-6


class TestStep2Beta:
    """Tests for step2_beta function"""

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_poisson_regression(self, seed):
        data = poisson_sample(seed)

        beta = step2_beta(data, np.zeros(data.n), np.zeros(data.n), build_loss_spec("ml"))

        assert np.allclose(beta, poisson_irls(data.y, data.X), atol=1e-6)

    def test_duplicated_data(self):
        data = poisson_sample(3)
        twice = Dataset(np.tile(data.y, 2), np.vstack([data.X, data.X]), np.ones((200, 1)),
                        np.tile(data.t, 2))
        spec = build_loss_spec("ml")

        single = step2_beta(data, np.full(100, 0.5), np.zeros(100), spec)
        double = step2_beta(twice, np.full(200, 0.5), np.zeros(200), spec)

        assert np.allclose(single, double, atol=1e-8)

    def test_first_order_condition(self):
        data = poisson_sample(4)
        m_tilde = 0.3 * data.t
        w = np.where(data.y == 0, 0.5, 0.0)

        beta = step2_beta(data, m_tilde, w, build_loss_spec("ml"))

        score = data.X.T @ ((1 - w) * psi(data.y, data.X @ beta + m_tilde,
                                          build_loss_spec("ml"))) / data.n
        assert np.linalg.norm(score) <= 1e-6

    def test_robust_fit_improves_on_ml_start(self):
        data = poisson_sample(6, n=60)
        spec = build_loss_spec("ch")
        offset = np.full(60, 0.5)
        ml_beta = step2_beta(data, offset, np.zeros(60), build_loss_spec("ml"))

        beta = step2_beta(data, offset, np.zeros(60), spec, restarts=2)

        def objective(b):
            return np.sum(rho(data.y, data.X @ b + offset, spec)) / data.n

        assert objective(beta) <= objective(ml_beta) + 1e-9

    def test_no_covariates(self):
        data = Dataset(np.arange(4), np.zeros((4, 0)), np.ones((4, 1)), np.arange(4.0))

        assert step2_beta(data, np.zeros(4), np.zeros(4), build_loss_spec("ml")).size == 0


class TestStep2Gamma:
    """Tests for step2_gamma function"""

    @staticmethod
    def intercept_only(n):
        return Dataset(np.zeros(n), np.zeros((n, 0)), np.ones((n, 1)), np.arange(float(n)))

    def test_half_weights(self):
        assert step2_gamma(self.intercept_only(10), np.full(10, 0.5))[0] == \
            pytest.approx(0.0, abs=1e-10)

    def test_weighted_mean(self):
        w = np.tile([1.0, 0.0, 0.0, 0.0, 0.0], 4)

        gamma = step2_gamma(self.intercept_only(20), w)

        assert gamma[0] == pytest.approx(logit(0.2), abs=1e-8)
        assert gamma[0] == pytest.approx(-1.386294, abs=1e-6)

    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_separation(self, value):
        with pytest.raises(SeparationError):
            step2_gamma(self.intercept_only(10), np.full(10, value))

    def test_drift_reports_direction(self):
        z = np.linspace(-1, 1, 20)
        data = Dataset(np.zeros(20), np.zeros((20, 0)), z[:, None], z)

        with pytest.raises(SeparationError) as excinfo:
            step2_gamma(data, (z > 0).astype(float))

        assert excinfo.value.direction[0] == pytest.approx(1.0)

    def test_large_scale_covariate_is_not_separation(self):
        rng = np.random.default_rng(12)
        x = rng.normal(0.0, 1e4, 400)
        w = (rng.uniform(size=400) < expit(0.5 + 0.005 * x)).astype(float)
        raw = Dataset(np.zeros(400), np.zeros((400, 0)), np.column_stack([np.ones(400), x]), x)
        unit = Dataset(np.zeros(400), np.zeros((400, 0)),
                       np.column_stack([np.ones(400), x / 1e4]), x)

        gamma = step2_gamma(raw, w)

        assert np.max(np.abs(raw.Z @ gamma)) > 30
        assert gamma * [1.0, 1e4] == pytest.approx(step2_gamma(unit, w), rel=1e-4)

    def test_iteration_limit_is_logged(self, monkeypatch, caplog):
        monkeypatch.setattr(fit, "NEWTON_MAX_ITERS", 1)
        w = np.tile([1.0, 0.0, 0.0, 0.0, 0.0], 4)

        with caplog.at_level(logging.WARNING, logger="fit"):
            gamma = step2_gamma(self.intercept_only(20), w)

        assert "stopped after 1 iterations" in caplog.text
        assert gamma[0] < 0


class TestStep3M:
    """Tests for step3_m function"""

    def test_ml_closed_form(self):
        data = poisson_sample(2)
        beta = np.array([0.8, -0.3])
        kernel = KernelConfig(0.25)
        weights = nw_weights(0.1, data.t, kernel)
        w = np.where(data.y == 0, 0.3, 0.0)
        a = weights * (1 - w)

        eta = step3_m(0.1, beta, data, w, build_loss_spec("ml"), kernel)

        expected = np.log(np.sum(a * data.y) / np.sum(a * np.exp(data.X @ beta)))
        assert eta == pytest.approx(expected, abs=1e-10)
        score = np.sum(a * psi(data.y, data.X @ beta + eta, build_loss_spec("ml")))
        assert abs(score) <= 1e-8

    def test_agrees_with_step1(self):
        data = poisson_sample(8)
        kernel = KernelConfig(0.3)
        spec = build_loss_spec("ml")
        beta_tilde, eta_tilde = step1_local(0.5, data, np.zeros(data.n), spec, kernel)

        eta = step3_m(0.5, beta_tilde, data, np.zeros(data.n), spec, kernel)

        assert eta == pytest.approx(eta_tilde, abs=1e-8)

    def test_mt_returns_local_minimum(self):
        data = poisson_sample(9, n=60)
        spec = build_loss_spec("mt")
        kernel = KernelConfig(0.4)
        beta = np.array([1.0, -0.5])
        weights = nw_weights(0.0, data.t, kernel)

        eta = step3_m(0.0, beta, data, np.zeros(data.n), spec, kernel)

        def objective(value):
            return np.sum(weights * rho(data.y, data.X @ beta + value, spec))

        assert objective(eta) <= objective(eta - 0.01) + 1e-12
        assert objective(eta) <= objective(eta + 0.01) + 1e-12

    def test_scan_follows_minimum_past_window(self):
        data = poisson_sample(9, n=60)
        spec = build_loss_spec("mt")
        kernel = KernelConfig(0.4)
        beta = np.array([1.0, -0.5])
        w = np.zeros(data.n)

        default = step3_m(0.0, beta, data, w, spec, kernel)
        shifted = step3_m(0.0, beta, data, w, spec, kernel, center=default + 4.0)

        assert shifted == pytest.approx(default, abs=1e-6)


class TestInitialize:
    """Tests for initialize function"""

    def test_intercept_from_excess_zeros(self):
        data, _ = gen_scheme(SchemeConfig("c0", n=100, seed=1, intercept=True))
        zero_fraction = np.mean(data.y == 0)
        expected = logit(np.clip(zero_fraction - np.exp(-np.mean(data.y)), 0.05, 0.95))

        theta = initialize(data, build_loss_spec("ml"), KernelConfig(0.5))

        assert theta.gamma[0] == pytest.approx(expected)
        assert np.all(theta.gamma[1:] == 0.0)
        assert np.all(np.isfinite(theta.beta))
        assert theta.m_grid.size == np.unique(data.t).size


class TestEmFit:
    """Tests for em_fit function"""

    def test_converges_on_clean_data(self, c0_fit):
        data, _, _, result = c0_fit

        assert result.converged
        assert result.score_norm <= 1e-3
        assert result.iterations <= 100
        assert len(result.objective_trace) == result.iterations
        assert np.linalg.norm(result.theta.beta - np.array([2.0, 2.0])) < 0.5
        assert np.all(result.weights[data.y > 0] == 0.0)

    def test_fixed_point(self, c0_fit):
        data, _, spec, result = c0_fit
        theta = result.theta
        ctx = fit._FitContext.build(data, spec, KernelConfig(theta.h), FitConfig())

        again, _, _ = fit._m_step(ctx, e_step(data, theta), None, theta, 1, theta.gamma)

        assert np.max(np.abs(again.beta - theta.beta)) <= 1e-4
        assert np.max(np.abs(again.gamma - theta.gamma)) <= 1e-4

    def test_resolved_m_matches_stored_grid(self, c0_fit):
        data, _, spec, result = c0_fit
        taus = result.theta.t_grid[::25]

        resolved = m_hat_at(taus, result, data, spec)

        assert np.allclose(resolved, result.theta.m_grid[::25], atol=1e-8)

    def test_no_zeros_separates(self):
        rng = np.random.default_rng(12)
        n = 80
        X = rng.uniform(0, 1, (n, 1))
        t = rng.uniform(-1, 1, n)
        y = rng.poisson(np.exp(1.5 + X[:, 0])) + 1
        data = Dataset(y, X, np.column_stack([np.ones(n), rng.normal(size=n)]), t)

        result = em_fit(data, build_loss_spec("ml"), KernelConfig(0.5))

        assert result.separated
        assert np.all(result.weights == 0.0)
        assert result.theta.gamma[0] == pytest.approx(logit(0.05))

    def test_all_zero_response(self):
        data = Dataset(np.zeros(20), np.ones((20, 1)) * np.arange(20)[:, None] / 20,
                       np.ones((20, 1)), np.linspace(0, 1, 20))

        result = em_fit(data, build_loss_spec("ml"), KernelConfig(0.5))

        assert not result.converged
        assert result.score_norm == float("inf")
        assert np.all(result.theta.beta == 0.0)

    def test_robust_smoke(self):
        data, _ = gen_scheme(SchemeConfig("c1", n=40, seed=5))

        result = em_fit(data, build_loss_spec("mt"), KernelConfig(0.6),
                        FitConfig(max_em_iters=2, restarts=1))

        assert result.iterations <= 2
        assert len(result.objective_trace) == result.iterations
        assert np.all(np.isfinite(result.theta.beta))
        assert np.all(np.isfinite(result.theta.m_grid))
        assert result.use_leverage

    def test_permuted_input_gives_same_fit(self, c0_fit):
        data, _, spec, result = c0_fit
        perm = np.random.default_rng(3).permutation(data.n)

        shuffled = em_fit(data.subset(perm), spec, KernelConfig(0.4))

        assert_same_fit(result, shuffled, perm)

    def test_robust_m_values_are_step3_minimisers(self, mt_fit):
        data, spec, _, result = mt_fit

        assert np.all(np.isfinite(result.theta.m_grid))
        assert_step3_minimisers(result, data, spec)

    def test_robust_fit_ignores_row_order(self, mt_fit):
        data, spec, cfg, result = mt_fit
        perm = np.random.default_rng(8).permutation(data.n)

        shuffled = em_fit(data.subset(perm), spec, KernelConfig(0.6), cfg)

        assert_same_fit(result, shuffled, perm)

    @pytest.mark.slow
    def test_robust_m_values_on_outlying_sample(self):
        data, _ = gen_scheme(SchemeConfig("c1", n=120, seed=4))
        spec = build_loss_spec("mt")

        result = em_fit(data, spec, KernelConfig(0.4))

        assert_step3_minimisers(result, data, spec)

    @pytest.mark.slow
    @pytest.mark.parametrize("family", ["ch", "mt"])
    def test_robust_fit_reaches_fixed_point(self, family):
        data, _ = gen_scheme(SchemeConfig("c0", n=300, seed=17))
        spec = build_loss_spec(family)

        result = em_fit(data, spec, KernelConfig(0.4))

        assert result.converged
        assert result.score_norm <= 1e-3
        assert np.linalg.norm(result.theta.beta - np.array([2.0, 2.0])) < 0.5


class TestFitParametricZip:
    """Tests for fit_parametric_zip function"""

    def test_recovers_linear_m(self):
        rng = np.random.default_rng(21)
        n = 400
        X = rng.uniform(0, 1, (n, 2))
        Z = np.column_stack([np.ones(n), rng.normal(size=n)])
        t = rng.uniform(-2, 2, n)
        structural = rng.uniform(size=n) < 1 / (1 + np.exp(-(Z @ np.array([-1.0, 1.0]))))
        y = np.where(structural, 0, rng.poisson(np.exp(X @ np.array([1.0, 0.5]) + 0.5 * t + 0.2)))

        result = fit_parametric_zip(Dataset(y, X, Z, t), build_loss_spec("ml"))

        slope, intercept = result.theta.m_linear
        assert slope == pytest.approx(0.5, abs=0.15)
        assert intercept == pytest.approx(0.2, abs=0.3)
        assert result.theta.beta == pytest.approx([1.0, 0.5], abs=0.3)
        assert result.theta.loss == "zip-ml"


def assert_unbiased(family, reps, sigmas):
    """Mean score blocks at the truth stay within ``sigmas`` standard errors of 0."""
    spec = build_loss_spec(family)
    draws = []
    for r in range(reps):
        data, truth = gen_scheme(SchemeConfig("c0", n=200, seed=2024, stream=r))
        order = np.argsort(data.t)
        theta = ThetaEstimate([2.0, 2.0], [-1.0, 1.0], data.t[order], truth.m[order])
        blocks = score_residuals(data, theta, e_step(data, theta), spec)
        draws.append(np.concatenate([blocks["s2"], blocks["s3"]]))
    draws = np.array(draws)
    standard_error = draws.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(draws.mean(axis=0)) <= sigmas * standard_error)


class TestScoreResiduals:
    """Tests for score_residuals function"""

    def test_blocks_shape(self, c0_fit):
        data, _, spec, result = c0_fit

        blocks = score_residuals(data, result.theta, result.weights, spec, KernelConfig(0.4))

        assert blocks["s2"].shape == (2,)
        assert blocks["s3"].shape == (2,)
        assert blocks["s1"] >= 0

    @pytest.mark.parametrize("family", FAMILIES)
    def test_unbiased_at_truth(self, family):
        assert_unbiased(family, reps=300, sigmas=4)

    @pytest.mark.slow
    @pytest.mark.parametrize("family", FAMILIES)
    def test_unbiased_at_truth_full_scale(self, family):
        assert_unbiased(family, reps=2000, sigmas=3)
