import numpy as np
import pytest
from scipy import stats

from crt import (
    CopyLaw,
    CrtProblem,
    CrtSettings,
    acss_crt_copies_gaussian,
    acss_crt_copies_ols,
    acss_ols_law,
    coupled_copy_gap,
    coupling_bound,
    css_copies,
    css_law,
    debiased_lasso_pvalue,
    distilled_statistic,
    estimate_theta,
    group_lambda,
    resampling_free_pvalue,
    run_crt,
    solve_ytilde,
    universal_lambda,
)
from errors import ConfigError, SingularDesignError


def make_problem(rng, n=20, d=3, beta=0.0, unlabeled=0):
    Z = rng.standard_normal((n, d))
    X = Z @ np.ones(d) + rng.standard_normal(n)
    Y = beta * X + Z[:, 0] + rng.standard_normal(n)
    Xu = Zu = None
    if unlabeled:
        Zu = rng.standard_normal((unlabeled, d))
        Xu = Zu @ np.ones(d) + rng.standard_normal(unlabeled)
    return CrtProblem(X, Y, Z, Xu, Zu)


def test_css_copies_preserve_sum(rng):
    X = rng.standard_normal(8)
    problem = CrtProblem(X, rng.standard_normal(8), np.ones((8, 1)))
    copies = css_copies(problem, 50, rng).copies
    np.testing.assert_allclose(copies.sum(axis=1), X.sum(), atol=1e-10)
    assert copies.std(axis=0).min() > 0


def test_css_square_design_is_point_mass(rng):
    Z = rng.standard_normal((3, 3))
    X = rng.standard_normal(3)
    problem = CrtProblem(X, rng.standard_normal(3), Z)
    np.testing.assert_allclose(css_copies(problem, 10, rng).copies, np.tile(X, (10, 1)), atol=1e-10)


def test_css_copies_keep_sufficient_statistic(rng):
    for _ in range(10):
        problem = make_problem(rng)
        copies = css_copies(problem, 20, rng).copies
        assert np.max(np.abs((copies - problem.X) @ problem.Z)) <= 1e-8


def test_unlabeled_rows_break_css_degeneracy(rng):
    problem = make_problem(rng, n=3, d=3, unlabeled=4)
    assert problem.n_star == 7
    copies = css_copies(problem, 200, rng, full=True).copies
    assert copies.shape == (200, 7)
    assert np.max(np.abs((copies - problem.X_star) @ problem.Z_star)) <= 1e-8
    assert css_copies(problem, 200, rng).copies.std(axis=0).min() > 0


def test_rank_deficient_design_rejected(rng):
    problem = CrtProblem(rng.standard_normal(4), rng.standard_normal(4), np.ones((4, 2)))
    with pytest.raises(SingularDesignError):
        css_law(problem)


def test_acss_ols_scalar_variance():
    problem = CrtProblem([0.3], [1.0], [[1.0]])
    _, law = acss_ols_law(problem, 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(law.covariance(), [[0.5]])
    copies = acss_crt_copies_ols(problem, 1.0, 100_000, np.random.default_rng(1)).copies[:, 0]
    assert abs(copies.var() - 0.5) <= 4.0 * 0.5 * np.sqrt(2.0 / copies.size)


def test_acss_ols_covariance_matches_formula_and_samples(rng):
    Z = rng.standard_normal((3, 1))
    problem = CrtProblem(rng.standard_normal(3), rng.standard_normal(3), Z)
    sigma = 0.8
    fit, law = acss_ols_law(problem, sigma, rng)
    expected = np.linalg.inv(np.eye(3) + (1 / sigma**2) * Z @ Z.T)
    np.testing.assert_allclose(law.covariance(), expected, atol=1e-12)
    draws = law.sample(100_000, rng)
    empirical = np.cov(draws, rowvar=False)
    se = np.sqrt((np.outer(np.diag(expected), np.diag(expected)) + expected**2) / draws.shape[0])
    assert np.all(np.abs(empirical - expected) <= 4.0 * se)
    np.testing.assert_allclose(law.mean, Z @ fit.theta_hat)


def test_acss_ols_small_sigma_approaches_css(rng):
    problem = make_problem(rng, n=6, d=2)
    _, law = acss_ols_law(problem, 1e-6, rng)
    np.testing.assert_allclose(law.covariance(), css_law(problem).covariance(), atol=1e-8)


def test_coupling_bound_orthonormal_design(rng):
    problem = CrtProblem(rng.standard_normal(5), rng.standard_normal(5), np.eye(5)[:, :2])
    assert coupling_bound(problem, 0.7) == pytest.approx(4 * 0.49)


def test_coupled_gap_below_bound(rng):
    problem = make_problem(rng, n=10, d=3)
    sigma = 0.5
    gaps = np.array([coupled_copy_gap(problem, sigma, rng) for _ in range(10_000)])
    bound = coupling_bound(problem, sigma)
    assert gaps.mean() <= bound + 4.0 * gaps.std() / np.sqrt(gaps.size)


def test_gaussian_acss_crt_copies(rng):
    problem = CrtProblem(np.zeros(2), np.ones(2), np.eye(2))
    theta_hat, x_noise = np.array([1.0, -1.0]), np.array([3.0, 1.0])
    copies = acss_crt_copies_gaussian(problem, theta_hat, x_noise, 1.0, 100_000, rng).copies
    se_mean = np.sqrt(0.5 / copies.shape[0])
    np.testing.assert_array_less(np.abs(copies.mean(axis=0) - [2.0, 0.0]), 4.0 * se_mean)
    np.testing.assert_array_less(np.abs(copies.var(axis=0) - 0.5), 4.0 * 0.5 * np.sqrt(2.0 / copies.shape[0]))


def test_distilled_statistic_examples():
    problem = CrtProblem([0.0, 0.0], [1.0, 2.0], np.zeros((2, 1)))
    assert distilled_statistic(problem, [0.0], [0.0], [3.0, -1.0]) == pytest.approx(1.0)
    Z = np.array([[1.0], [2.0]])
    problem = CrtProblem([0.0, 0.0], [2.0, 4.0], Z)
    assert distilled_statistic(problem, [0.0], [2.0], [3.0, -1.0]) == pytest.approx(0.0)
    assert distilled_statistic(problem, [1.5], [0.0], [1.5, 3.0]) == pytest.approx(0.0)


def test_resampling_free_pvalue_examples(rng):
    problem = make_problem(rng, n=5, d=2)
    theta_hat, xi_hat = np.array([0.5, -0.5]), np.array([1.0, 0.0])
    law = CopyLaw(problem.Z @ theta_hat + 0.3, "scalar", scale=1.0)
    a = problem.Y - problem.Z @ xi_hat
    mean = float(a @ law.mean - a @ problem.Z @ theta_hat)
    sd = float(np.linalg.norm(a))
    assert resampling_free_pvalue(problem, law, mean, theta_hat, xi_hat) == pytest.approx(0.5)
    upper = resampling_free_pvalue(problem, law, mean + 1.6449 * sd, theta_hat, xi_hat)
    assert upper == pytest.approx(0.05, abs=1e-4)
    assert resampling_free_pvalue(problem, law, mean, theta_hat, xi_hat, "two-sided") == pytest.approx(1.0)


def test_resampling_free_pvalue_is_uniform_under_its_law(rng):
    problem = make_problem(rng, n=6, d=2)
    theta_hat, xi_hat = np.zeros(2), np.zeros(2)
    _, law = acss_ols_law(problem, 0.7, rng)
    draws = law.sample(10_000, rng)
    pvals = [resampling_free_pvalue(problem, law, distilled_statistic(problem, theta_hat, xi_hat, x), theta_hat, xi_hat) for x in draws]
    assert stats.kstest(pvals, "uniform").pvalue > 1e-3


def test_ytilde_spherical_cases(rng):
    Y = rng.standard_normal(6)
    np.testing.assert_allclose(solve_ytilde(Y, np.zeros((6, 2)), 0.1), Y / np.linalg.norm(Y))
    Z = rng.standard_normal((6, 2))
    slack = np.max(np.abs(Z.T @ Y)) / np.linalg.norm(Y)
    np.testing.assert_allclose(solve_ytilde(Y, Z, slack * 1.01), Y / np.linalg.norm(Y))


def test_ytilde_matches_grid_search():
    Y = np.array([1.0, 0.5])
    Z = np.array([[1.0], [1.0]])
    lam = 0.5
    y = solve_ytilde(Y, Z, lam)
    assert np.linalg.norm(y) <= 1 + 1e-9
    assert abs(Z[:, 0] @ y) <= lam + 1e-9
    axis = np.linspace(-1.0, 1.0, 1001)
    g1, g2 = np.meshgrid(axis, axis)
    feasible = (g1**2 + g2**2 <= 1.0) & (np.abs(g1 + g2) <= lam)
    grid_best = np.max((Y[0] * g1 + Y[1] * g2)[feasible])
    assert Y @ y >= grid_best - 1e-3
    # optimum where the circle meets y1 + y2 = lam
    y1 = (1 + np.sqrt(7)) / 4
    assert Y @ y == pytest.approx(y1 + 0.5 * (lam - y1), abs=1e-3)


def test_run_crt_resampling_free_and_sampled(rng):
    problem = make_problem(rng, n=30, d=4)
    oracle = CrtSettings(mechanism="oracle", estimator="oracle", theta0=np.ones(4))
    report = run_crt(problem, oracle, seed=3)
    assert 0.0 <= report.pval <= 1.0
    assert report.t_copies.size == 0
    sampled = run_crt(problem, CrtSettings(mechanism="css", estimator="ols", M=99), seed=3)
    assert 1 / 100 <= sampled.pval <= 1.0
    assert run_crt(problem, CrtSettings(mechanism="css", estimator="ols", M=99), seed=3).pval == sampled.pval


@pytest.mark.parametrize("estimator", ["lasso", "scad", "mcp", "group-scad", "iht"])
def test_run_crt_gaussian_acss_estimators(rng, estimator):
    problem = make_problem(rng, n=30, d=10)
    settings = CrtSettings(mechanism="acss-gaussian", estimator=estimator, sparsity=3, group_size=5)
    report = run_crt(problem, settings, seed=7)
    assert 0.0 <= report.pval <= 1.0


def test_run_crt_ytilde_statistic(rng):
    problem = make_problem(rng, n=30, d=4)
    settings = CrtSettings(mechanism="css", estimator="ols", statistic="ytilde-inner-product")
    assert 0.0 <= run_crt(problem, settings, seed=1).pval <= 1.0


def test_debiased_lasso_baseline(rng):
    problem = make_problem(rng, n=60, d=5, beta=1.0)
    assert 0.0 <= debiased_lasso_pvalue(problem) <= 1.0


def test_settings_validation():
    with pytest.raises(ConfigError):
        CrtSettings(mechanism="bootstrap")
    with pytest.raises(ConfigError):
        CrtSettings(mechanism="oracle")
    with pytest.raises(ConfigError):
        CrtSettings(M=0)


@pytest.mark.slow
def test_css_null_pvalues_are_super_uniform():
    rng = np.random.default_rng(31)
    pvals = np.array(
        [run_crt(make_problem(rng), CrtSettings(mechanism="css", estimator="ols", M=49), seed=rng).pval for _ in range(1000)]
    )
    for alpha in (0.05, 0.1, 0.2):
        assert np.mean(pvals <= alpha) <= alpha + 3.0 * np.sqrt(alpha * (1 - alpha) / pvals.size)


def test_penalty_levels_sit_on_coefficient_scale():
    assert universal_lambda(50, 200, 1.0) == pytest.approx(np.sqrt(2 * np.log(200) / 50))
    assert universal_lambda(50, 200, 2.0) == pytest.approx(2 * universal_lambda(50, 200))
    assert group_lambda(50, 5, 40) == pytest.approx((np.sqrt(5) + np.sqrt(2 * np.log(40))) / np.sqrt(50))


@pytest.mark.parametrize("estimator", ["mcp", "scad", "group-scad"])
def test_concave_estimators_are_nearly_unbiased_on_strong_signals(estimator):
    rng = np.random.default_rng(2024)
    n, d, sd = 100, 50, 0.5
    Z = rng.standard_normal((n, d))
    theta0 = np.zeros(d)
    theta0[:3] = 1.5
    x = Z @ theta0 + sd * rng.standard_normal(n)
    theta = estimate_theta(Z, x, sd, CrtSettings(estimator=estimator, group_size=5))
    assert np.mean(np.abs(theta[:3] - 1.5)) < 0.1
    lasso = estimate_theta(Z, x, sd, CrtSettings(estimator="lasso"))
    assert np.mean(np.abs(lasso[:3] - 1.5)) > np.mean(np.abs(theta[:3] - 1.5))


def test_css_law_scales_with_noise_sd(rng):
    base = make_problem(rng, n=8, d=2)
    scaled = CrtProblem(base.X, base.Y, base.Z, nu=2.0)
    np.testing.assert_allclose(css_law(scaled).covariance(), 4.0 * css_law(base).covariance(), atol=1e-12)
    copies = css_copies(scaled, 20_000, rng).copies
    assert np.max(np.abs((copies - scaled.X) @ scaled.Z)) <= 1e-8
    ratio = copies.var(axis=0) / np.diag(4.0 * css_law(base).covariance())
    assert np.all(np.abs(ratio - 1.0) <= 0.1)


def test_acss_ols_law_with_noise_sd_matches_formula(rng):
    Z = rng.standard_normal((4, 2))
    problem = CrtProblem(rng.standard_normal(4), rng.standard_normal(4), Z, nu=1.5)
    sigma = 0.6
    _, law = acss_ols_law(problem, sigma, rng)
    expected = np.linalg.inv(np.eye(4) / 1.5**2 + (2 / sigma**2) * Z @ Z.T)
    np.testing.assert_allclose(law.covariance(), expected, atol=1e-12)
    a = rng.standard_normal(4)
    assert law.quad_form(a) == pytest.approx(a @ expected @ a)


def test_coupled_gap_below_bound_with_noise_sd(rng):
    base = make_problem(rng, n=10, d=3)
    problem = CrtProblem(base.X, base.Y, base.Z, nu=2.0)
    gaps = np.array([coupled_copy_gap(problem, 0.5, rng) for _ in range(10_000)])
    assert gaps.mean() <= coupling_bound(problem, 0.5) + 4.0 * gaps.std() / np.sqrt(gaps.size)
