"""Conditional randomization tests of Y independent of X given Z for X | Z ~ N(Z theta, nu^2 I).

Copies of X come from one of three laws: exact co-sufficient sampling (CSS)
given Z*'X*, approximate co-sufficient sampling given a perturbed OLS fit,
or Gaussian aCSS given X + sigma U. All three are Gaussian, so a statistic
linear in X has an exact normal law under the copies and the p-value needs
no resampling.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from errors import ConfigError, ConvergenceError, DimensionError, DomainError, SingularDesignError
from estimators import SolverOptions, draw_perturbation, fit_iht, fit_ols_perturbed, fit_penalized
from models import GaussianLinearModel
from penalties import GroupPenalty, GroupStructure, PenaltySpec
from samplers import CopySet, PValueReport, gaussian_acss_law, perturb_observation, pval_unweighted

logger = logging.getLogger(__name__)

MECHANISMS = ("css", "acss-ols", "acss-gaussian", "oracle")
CRT_ESTIMATORS = ("lasso", "scad", "mcp", "group-scad", "iht", "ols", "oracle")
CRT_STATISTICS = ("distilled", "ytilde-inner-product")
SIDES = ("upper", "lower", "two-sided")


@dataclass
class CrtProblem:
    """Labeled (X, Y, Z) plus optional unlabeled (Xu, Zu) rows without a response."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    Xu: Optional[np.ndarray] = None
    Zu: Optional[np.ndarray] = None
    nu: float = 1.0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1)
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if self.Z.shape[0] != self.X.size:
            self.Z = self.Z.reshape(self.X.size, -1)
        if self.X.size < 1 or self.Y.size != self.X.size:
            raise DimensionError(f"X has length {self.X.size}, Y has length {self.Y.size}")
        if self.nu <= 0:
            raise DomainError(f"noise sd must be positive, got {self.nu}")
        if (self.Xu is None) != (self.Zu is None):
            raise DimensionError("unlabeled rows need both Xu and Zu")
        if self.Xu is not None:
            self.Xu = np.asarray(self.Xu, dtype=float).reshape(-1)
            self.Zu = np.asarray(self.Zu, dtype=float).reshape(self.Xu.size, -1)
            if self.Zu.shape[1] != self.d:
                raise DimensionError(f"Zu has {self.Zu.shape[1]} columns, Z has {self.d}")

    @property
    def n(self) -> int:
        return self.X.size

    @property
    def m(self) -> int:
        return 0 if self.Xu is None else self.Xu.size

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    @property
    def n_star(self) -> int:
        return self.n + self.m

    @property
    def X_star(self) -> np.ndarray:
        return self.X if self.Xu is None else np.concatenate([self.X, self.Xu])

    @property
    def Z_star(self) -> np.ndarray:
        return self.Z if self.Zu is None else np.vstack([self.Z, self.Zu])


@dataclass
class CopyLaw:
    """Gaussian law of the augmented copy vector; rows picks the labeled part.

    kind "scalar": cov = scale * I. kind "projection-form": cov = scale * (I - U diag(shrink) U')
    with orthonormal U and shrink in [0, 1]. kind "explicit": cov given.
    """

    mean: np.ndarray
    kind: str = "scalar"
    scale: float = 1.0
    basis: Optional[np.ndarray] = None
    shrink: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        if self.rows is None:
            self.rows = np.arange(self.mean.size)
        if self.kind != "explicit" and self.scale < 0:
            raise DomainError(f"covariance scale must be >= 0, got {self.scale}")
        if self.kind == "projection-form" and (np.any(self.shrink < -1e-12) or np.any(self.shrink > 1 + 1e-12)):
            raise DomainError("projection-form shrink factors must lie in [0, 1]")
        if self.kind not in ("scalar", "projection-form", "explicit"):
            raise DomainError(f"unknown covariance kind {self.kind!r}")

    def covariance(self) -> np.ndarray:
        N = self.mean.size
        if self.kind == "scalar":
            return self.scale * np.eye(N)
        if self.kind == "projection-form":
            return self.scale * (np.eye(N) - (self.basis * self.shrink) @ self.basis.T)
        return np.asarray(self.cov, dtype=float)

    @property
    def labeled_mean(self) -> np.ndarray:
        return self.mean[self.rows]

    def quad_form(self, a) -> float:
        """a' Cov a for a weight vector over the labeled rows."""
        full = np.zeros(self.mean.size)
        full[self.rows] = a
        if self.kind == "scalar":
            return float(self.scale * full @ full)
        if self.kind == "projection-form":
            proj = self.basis.T @ full
            return float(self.scale * (full @ full - np.sum(self.shrink * proj**2)))
        return float(full @ self.cov @ full)

    def sample(self, M: int, rng, full: bool = False) -> np.ndarray:
        N = self.mean.size
        eps = rng.standard_normal((M, N))
        if self.kind == "scalar":
            draws = self.mean + np.sqrt(self.scale) * eps
        elif self.kind == "projection-form":
            root = 1.0 - np.sqrt(np.clip(1.0 - self.shrink, 0.0, None))
            draws = self.mean + np.sqrt(self.scale) * (eps - ((eps @ self.basis) * root) @ self.basis.T)
        else:
            draws = self.mean + eps @ np.linalg.cholesky(self.cov + 1e-12 * np.eye(N)).T
        return draws if full else draws[:, self.rows]


def _thin_svd(Z):
    N, d = Z.shape
    if N < d:
        raise SingularDesignError(f"need at least as many rows as columns, got {N}x{d}")
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    if s.size == 0 or s[-1] <= 1e-10 * s[0]:
        raise SingularDesignError(f"design of shape {Z.shape} is rank deficient")
    return U, s


def css_law(problem: CrtProblem) -> CopyLaw:
    """Law of X* given Z*'X*: mean P X*, covariance nu^2 (I - P)."""
    U, s = _thin_svd(problem.Z_star)
    X = problem.X_star
    return CopyLaw(
        U @ (U.T @ X), "projection-form", scale=problem.nu**2, basis=U, shrink=np.ones(s.size), rows=np.arange(problem.n)
    )


def css_copies(problem: CrtProblem, M: int, rng, full: bool = False) -> CopySet:
    copies = css_law(problem).sample(M, rng, full=full)
    return CopySet(copies, np.ones(M + 1), "css")


def _ols_shrink(problem: CrtProblem, s, sigma: float) -> np.ndarray:
    t = problem.d * problem.nu**2 * s**2
    return t / (sigma**2 + t)


def acss_ols_law(problem: CrtProblem, sigma: float, rng):
    """Perturbed OLS fit and the copy law N(Z* theta, (I / nu^2 + (d / sigma^2) Z* Z*')^{-1})."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    U, s = _thin_svd(problem.Z_star)
    pert = draw_perturbation(rng, problem.d, sigma)
    fit = fit_ols_perturbed(problem.X_star, problem.Z_star, pert)
    law = CopyLaw(
        problem.Z_star @ fit.theta_hat,
        "projection-form",
        scale=problem.nu**2,
        basis=U,
        shrink=_ols_shrink(problem, s, sigma),
        rows=np.arange(problem.n),
    )
    return fit, law


def acss_crt_copies_ols(problem: CrtProblem, sigma: float, M: int, rng, full: bool = False) -> CopySet:
    _, law = acss_ols_law(problem, sigma, rng)
    return CopySet(law.sample(M, rng, full=full), np.ones(M + 1), "acss-ols")


def coupling_bound(problem: CrtProblem, sigma: float) -> float:
    """4 sigma^2 / d * sum 1 / lambda_i^2 over the eigenvalues lambda_i^2 of Z*'Z*."""
    _, s = _thin_svd(problem.Z_star)
    return float(4.0 * sigma**2 / problem.d * np.sum(1.0 / s**2))


def coupled_copy_gap(problem: CrtProblem, sigma: float, rng) -> float:
    """||CSS copy - aCSS copy||^2 when both are built from one shared noise vector."""
    U, s = _thin_svd(problem.Z_star)
    d = problem.d
    pert = draw_perturbation(rng, d, sigma)
    eps = rng.standard_normal(problem.n_star)
    X = problem.X_star
    proj = U.T @ eps
    nu = problem.nu
    css = U @ (U.T @ X) + nu * (eps - U @ proj)
    fit = fit_ols_perturbed(X, problem.Z_star, pert)
    if sigma > 0:
        root = np.sqrt(1.0 - _ols_shrink(problem, s, sigma))
    else:
        root = np.zeros_like(s)
    acss = problem.Z_star @ fit.theta_hat + nu * (eps + U @ ((root - 1.0) * proj))
    gap = css - acss
    return float(gap @ gap)


def acss_crt_copies_gaussian(problem: CrtProblem, theta_hat, x_noise, sigma: float, M: int, rng) -> CopySet:
    """N((sigma^2 Z theta + nu^2 X_noise) / (sigma^2 + nu^2), sigma^2 nu^2 / (sigma^2 + nu^2) I)."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    mean, var = gaussian_acss_law(problem.Z @ np.asarray(theta_hat, dtype=float), x_noise, problem.nu, sigma)
    copies = mean + np.sqrt(var) * rng.standard_normal((M, mean.size))
    return CopySet(copies, np.ones(M + 1), "gaussian-acss")


def distilled_statistic(problem: CrtProblem, theta_hat, xi_hat, x_candidate) -> float:
    """(Y - Z xi)'(x - Z theta)."""
    x = np.asarray(x_candidate, dtype=float).reshape(-1)
    if x.size != problem.n:
        raise DimensionError(f"candidate has length {x.size}, expected {problem.n}")
    return float((problem.Y - problem.Z @ xi_hat) @ (x - problem.Z @ theta_hat))


def normal_tail(t_obs: float, mean: float, var: float, side: str = "upper") -> float:
    if side not in SIDES:
        raise DomainError(f"unknown side {side!r}")
    if var <= 1e-24 * max(1.0, mean**2):
        if np.isclose(t_obs, mean, rtol=1e-12, atol=1e-12):
            return 1.0
        if side == "upper":
            return 0.0 if t_obs > mean else 1.0
        if side == "lower":
            return 0.0 if t_obs < mean else 1.0
        return 0.0
    z = (t_obs - mean) / np.sqrt(var)
    if side == "upper":
        return float(stats.norm.sf(z))
    if side == "lower":
        return float(stats.norm.cdf(z))
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def linear_statistic_pvalue(a, b: float, law: CopyLaw, t_obs: float, side: str = "upper") -> float:
    """Exact tail of a'X~ + b with X~ drawn from law."""
    a = np.asarray(a, dtype=float)
    return normal_tail(t_obs, float(a @ law.labeled_mean + b), law.quad_form(a), side)


def resampling_free_pvalue(
    problem: CrtProblem, copy_law: CopyLaw, t_obs: float, theta_hat, xi_hat, side: str = "upper"
) -> float:
    a = problem.Y - problem.Z @ xi_hat
    return linear_statistic_pvalue(a, -float(a @ problem.Z @ theta_hat), copy_law, t_obs, side)


@dataclass
class YtildeOptions:
    max_iter: int = 500
    tol: float = 1e-10
    restarts: int = 20
    dykstra_iter: int = 200
    seed: int = 0


def _project_feasible(v, Z, lam: float, opts: YtildeOptions) -> np.ndarray:
    """Dykstra projection onto {||y|| <= 1} intersected with {|z_j'y| <= lam}."""
    cols = [j for j in range(Z.shape[1]) if np.any(Z[:, j])]
    norms = {j: float(Z[:, j] @ Z[:, j]) for j in cols}
    increments = np.zeros((len(cols) + 1, v.size))
    x = np.array(v, dtype=float)
    for _ in range(opts.dykstra_iter):
        previous = x
        y = x + increments[0]
        x = y / max(1.0, np.linalg.norm(y))
        increments[0] = y - x
        for k, j in enumerate(cols, start=1):
            y = x + increments[k]
            c = float(Z[:, j] @ y)
            x = y - (c - np.sign(c) * lam) / norms[j] * Z[:, j] if abs(c) > lam else y
            increments[k] = y - x
        if np.linalg.norm(x - previous) <= opts.tol:
            break
    return x


def _rescale_feasible(y, Z, lam: float) -> np.ndarray:
    box = np.max(np.abs(Z.T @ y)) / lam if Z.size else 0.0
    return y / max(1.0, float(np.linalg.norm(y)), float(box))


def solve_ytilde(Y, Z, lambda_n: float, opts: Optional[YtildeOptions] = None) -> np.ndarray:
    """argmax Y'y subject to ||Z'y||_inf <= lambda_n and ||y|| <= 1."""
    opts = opts or YtildeOptions()
    Y = np.asarray(Y, dtype=float).reshape(-1)
    Z = np.asarray(Z, dtype=float).reshape(Y.size, -1)
    norm_y = float(np.linalg.norm(Y))
    if norm_y == 0.0:
        raise DomainError("Y must be nonzero")
    if lambda_n <= 0:
        raise DomainError(f"lambda_n must be positive, got {lambda_n}")
    spherical = Y / norm_y
    if Z.size == 0 or np.max(np.abs(Z.T @ spherical)) <= lambda_n:
        return spherical

    rng = np.random.default_rng(opts.seed)
    step = 1.0 / norm_y
    best, best_value = None, -np.inf
    for restart in range(opts.restarts):
        start = np.zeros(Y.size) if restart == 0 else rng.standard_normal(Y.size)
        y = _project_feasible(start, Z, lambda_n, opts)
        for _ in range(opts.max_iter):
            nxt = _project_feasible(y + step * Y, Z, lambda_n, opts)
            moved = np.linalg.norm(nxt - y)
            y = nxt
            if moved <= opts.tol:
                break
        y = _rescale_feasible(y, Z, lambda_n)
        if Y @ y > best_value:
            best, best_value = y, float(Y @ y)
    if best is None or not np.isfinite(best_value):
        raise ConvergenceError("projected ascent for the Y-tilde program produced no feasible point")
    logger.debug(f"solve_ytilde: objective {best_value:.6f} after {opts.restarts} restarts")
    return best


def default_ytilde_lambda(problem: CrtProblem, sd: float = 1.0) -> float:
    return float(2.0 * np.sqrt(problem.n * np.log(max(problem.d, 2))) * sd)


@dataclass
class CrtSettings:
    """Knobs of one CRT run. M=None selects the resampling-free p-value."""

    mechanism: str = "acss-gaussian"
    estimator: str = "lasso"
    sigma: float = 0.7
    statistic: str = "distilled"
    M: Optional[int] = None
    side: str = "upper"
    theta0: Optional[np.ndarray] = None
    lambda_scale: float = 1.0
    xi_lambda_scale: float = 1.0
    group_size: int = 5
    sparsity: int = 5
    scad_a: float = 3.7
    mcp_gamma: float = 3.0
    ytilde_lambda: Optional[float] = None
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_iter=5000, kkt_tol=1e-6))

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown copy mechanism {self.mechanism!r}")
        if self.estimator not in CRT_ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.statistic not in CRT_STATISTICS:
            raise ConfigError(f"unknown statistic {self.statistic!r}")
        if self.side not in SIDES:
            raise ConfigError(f"unknown side {self.side!r}")
        if self.M is not None and self.M < 1:
            raise ConfigError(f"M must be positive, got {self.M}")
        if (self.mechanism == "oracle" or self.estimator == "oracle") and self.theta0 is None:
            raise ConfigError("oracle runs need theta0")


def universal_lambda(n: int, d: int, sd: float = 1.0) -> float:
    """sd * sqrt(2 log d / n), the penalty level on the (1/n)-scaled squared loss."""
    return float(sd * np.sqrt(2.0 * np.log(max(d, 2)) / n))


def group_lambda(n: int, size: int, n_groups: int, sd: float = 1.0) -> float:
    """sd * (sqrt(size) + sqrt(2 log J)) / sqrt(n) for J groups of equal size."""
    return float(sd * (np.sqrt(size) + np.sqrt(2.0 * np.log(max(n_groups, 2)))) / np.sqrt(n))


def scaled_model(Z) -> GaussianLinearModel:
    """Gaussian linear model whose negative log-likelihood is ||x - Z theta||^2 / (2n) plus a constant."""
    Z = np.atleast_2d(Z)
    return GaussianLinearModel(Z, float(np.sqrt(Z.shape[0])))


def estimate_theta(Z, x, sd: float, settings: CrtSettings) -> np.ndarray:
    """Fit X on Z with the configured estimator; sd is the noise sd of x."""
    Z = np.atleast_2d(Z)
    n, d = Z.shape
    if settings.estimator == "oracle":
        return np.asarray(settings.theta0, dtype=float)
    if settings.estimator == "ols":
        if np.linalg.matrix_rank(Z) < d:
            raise SingularDesignError(f"OLS needs a full-rank design, got {Z.shape}")
        return np.linalg.lstsq(Z, x, rcond=None)[0]
    model = scaled_model(Z)
    if settings.estimator == "iht":
        return fit_iht(model, x, settings.sparsity, settings.solver).theta_hat
    lam = settings.lambda_scale * universal_lambda(n, d, sd)
    singletons = GroupStructure.singletons(d)
    lasso = fit_penalized(model, x, None, PenaltySpec.uniform(GroupPenalty.l1(lam), singletons), singletons, settings.solver)
    if settings.estimator == "lasso":
        fit = lasso
    elif settings.estimator == "group-scad":
        groups = GroupStructure.contiguous(d, settings.group_size)
        lam = settings.lambda_scale * group_lambda(n, settings.group_size, len(groups), sd)
        penalty = PenaltySpec.uniform(GroupPenalty.scad(lam, settings.scad_a), groups)
        fit = fit_penalized(model, x, None, penalty, groups, settings.solver, lasso.theta_hat)
    else:
        kind = {
            "scad": GroupPenalty.scad(lam, settings.scad_a),
            "mcp": GroupPenalty.mcp(lam, settings.mcp_gamma),
        }[settings.estimator]
        penalty = PenaltySpec.uniform(kind, singletons)
        # nonconvex fits start from the lasso solution
        fit = fit_penalized(model, x, None, penalty, singletons, settings.solver, lasso.theta_hat)
    if "non-convergence" in fit.flags:
        logger.warning(f"{settings.estimator} fit of X on Z did not converge")
    return fit.theta_hat


def estimate_xi(problem: CrtProblem, settings: CrtSettings) -> np.ndarray:
    """Lasso of Y on Z with a fixed universal penalty level."""
    groups = GroupStructure.singletons(problem.d)
    lam = settings.xi_lambda_scale * universal_lambda(problem.n, problem.d)
    penalty = PenaltySpec.uniform(GroupPenalty.l1(lam), groups)
    return fit_penalized(scaled_model(problem.Z), problem.Y, None, penalty, groups, settings.solver).theta_hat


def copy_law_for(problem: CrtProblem, settings: CrtSettings, rng):
    """(theta_hat, law) for the configured copy mechanism."""
    if settings.mechanism == "oracle":
        theta = np.asarray(settings.theta0, dtype=float)
        return theta, CopyLaw(problem.Z @ theta, "scalar", scale=problem.nu**2)
    if settings.mechanism == "css":
        law = css_law(problem)
        return np.linalg.lstsq(problem.Z_star, problem.X_star, rcond=None)[0], law
    if settings.mechanism == "acss-ols":
        fit, law = acss_ols_law(problem, settings.sigma, rng)
        return fit.theta_hat, law
    x_noise = perturb_observation(problem.X, settings.sigma, rng).x
    sd = float(np.sqrt(problem.nu**2 + settings.sigma**2))
    theta = estimate_theta(problem.Z, x_noise, sd, settings)
    mean, var = gaussian_acss_law(problem.Z @ theta, x_noise, problem.nu, settings.sigma)
    return theta, CopyLaw(mean, "scalar", scale=var)


def run_crt(problem: CrtProblem, settings: CrtSettings, seed=None) -> PValueReport:
    """One conditional randomization test of Y independent of X given Z."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta, law = copy_law_for(problem, settings, rng)
    if settings.statistic == "distilled":
        a = problem.Y - problem.Z @ estimate_xi(problem, settings)
        b = -float(a @ problem.Z @ theta)
    else:
        lam = settings.ytilde_lambda or default_ytilde_lambda(problem)
        a = solve_ytilde(problem.Y, problem.Z, lam) / problem.n
        b = 0.0
    t_obs = float(a @ problem.X + b)
    method = f"crt/{settings.mechanism}/{settings.estimator}"
    if settings.M is None:
        pval = linear_statistic_pvalue(a, b, law, t_obs, settings.side)
        t_copies = np.empty(0)
    else:
        t_copies = law.sample(settings.M, rng) @ a + b
        if settings.side == "upper":
            pval = pval_unweighted(t_obs, t_copies)
        elif settings.side == "lower":
            pval = pval_unweighted(-t_obs, -t_copies)
        else:
            center = float(a @ law.labeled_mean + b)
            pval = pval_unweighted(abs(t_obs - center), np.abs(t_copies - center))
    logger.debug(f"{method}: t_obs={t_obs:.4f}, pval={pval:.4f}")
    return PValueReport(pval, t_obs, t_copies, method, weighted=False)


def debiased_lasso_pvalue(problem: CrtProblem, lambda_scale: float = 1.0, side: str = "upper", opts=None) -> float:
    """Baseline p-value for the coefficient of X in the regression of Y on (X, Z)."""
    opts = opts or SolverOptions(max_iter=5000, kkt_tol=1e-6)
    n, d = problem.Z.shape
    design = np.column_stack([problem.X, problem.Z])
    groups_y = GroupStructure.singletons(d + 1)
    lam_y = lambda_scale * universal_lambda(n, d + 1)
    beta = fit_penalized(
        scaled_model(design), problem.Y, None, PenaltySpec.uniform(GroupPenalty.l1(lam_y), groups_y), groups_y, opts
    ).theta_hat
    groups_x = GroupStructure.singletons(d)
    lam_x = lambda_scale * universal_lambda(n, d, problem.nu)
    gamma = fit_penalized(
        scaled_model(problem.Z), problem.X, None, PenaltySpec.uniform(GroupPenalty.l1(lam_x), groups_x), groups_x, opts
    ).theta_hat
    node_resid = problem.X - problem.Z @ gamma
    resid = problem.Y - design @ beta
    denom = float(node_resid @ problem.X)
    if denom == 0.0:
        raise SingularDesignError("nodewise residual is orthogonal to X")
    debiased = beta[0] + float(node_resid @ resid) / denom
    noise_sd = np.linalg.norm(resid) / np.sqrt(max(n - np.count_nonzero(beta), 1))
    se = noise_sd * np.linalg.norm(node_resid) / abs(denom)
    return normal_tail(debiased, 0.0, se**2, side)
