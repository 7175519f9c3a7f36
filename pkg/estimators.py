"""Perturbed estimators and their strict second-order stationarity checks.

fit_penalized minimizes L(theta; x) + R(theta) + sigma * w'theta plus a
group-separable nonsmooth penalty. Smooth problems go through damped Newton,
everything else through accelerated proximal gradient with backtracking and
monotone restart. fit_mtle is the trimmed-likelihood variant and fit_iht an
l0-constrained least squares used by the Gaussian aCSS CRT.
"""

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from errors import AcssError, DimensionError, DomainError, SingularDesignError
from models import ModelSpec, as_x
from penalties import (
    ActiveSets,
    GroupStructure,
    PenaltySpec,
    at_knot,
    effective_support,
    group_hessian_block,
    kkt_residual,
    nonsmooth_value,
    prox_all,
    smooth_gradient,
    smooth_hessian,
    smooth_value,
)

logger = logging.getLogger(__name__)


@dataclass
class SolverOptions:
    max_iter: int = 50_000
    kkt_tol: float = 1e-8
    eig_tol: float = 1e-8
    step_init: float = 1.0
    restarts: int = 10
    active_tol: float = 1e-8
    exhaustive_limit: int = 5000
    max_csteps: int = 100

    def __post_init__(self):
        for name in ("max_iter", "kkt_tol", "eig_tol", "step_init", "restarts", "max_csteps"):
            if getattr(self, name) <= 0:
                raise DomainError(f"solver option {name} must be positive")
        if self.active_tol < 0 or self.exhaustive_limit < 0:
            raise DomainError("active_tol and exhaustive_limit must be nonnegative")


@dataclass(frozen=True)
class Perturbation:
    """Random linear tilt sigma * w.

    space="param" tilts the objective by sigma * w'theta with w of length d.
    space="obs" is the Gaussian-additive form sigma * w'(B theta) with w of
    length n and B the model design.
    """

    w: np.ndarray
    sigma: float
    space: str = "param"

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(-1))
        if self.sigma < 0:
            raise DomainError(f"sigma must be nonnegative, got {self.sigma}")
        if self.space not in ("param", "obs"):
            raise DomainError(f"unknown perturbation space {self.space!r}")

    def linear_coef(self, model: ModelSpec) -> np.ndarray:
        """Coefficient c of the linear term c'theta added to the objective."""
        if self.space == "param":
            if self.w.size != model.dim_param:
                raise DimensionError(f"w has length {self.w.size}, model has d={model.dim_param}")
            return self.sigma * self.w
        design = getattr(model, "design", None)
        if design is None:
            raise DimensionError(f"{model.kind} model has no design for an observation-space perturbation")
        if self.w.size != model.dim_obs:
            raise DimensionError(f"w has length {self.w.size}, model has n={model.dim_obs}")
        return self.sigma * design.T @ self.w


def draw_perturbation(rng, d: int, sigma: float, space: str = "param") -> Perturbation:
    """w ~ N(0, I_d / d)."""
    if d < 1:
        raise DimensionError(f"perturbation dimension must be positive, got {d}")
    if sigma < 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma}")
    return Perturbation(rng.standard_normal(d) / np.sqrt(d), float(sigma), space)


@dataclass
class FitResult:
    theta_hat: np.ndarray
    g_hat: np.ndarray
    active: ActiveSets
    ssosp: bool
    objective: float
    iterations: int
    grad_residual: float
    trim_set: Optional[np.ndarray] = None
    keep: Optional[np.ndarray] = None
    g_obs: Optional[np.ndarray] = None
    flags: Tuple[str, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class SsospReport:
    ok: bool
    failed: Tuple[str, ...] = ()


class _Objective:
    """Smooth part L + R + c'theta and nonsmooth group part of a penalized fit."""

    def __init__(self, model, x, c, penalty, groups):
        self.model = model
        self.x = x
        self.c = c
        self.penalty = penalty
        self.groups = groups

    def smooth(self, theta) -> float:
        if not self.model.in_domain(theta):
            return np.inf
        value = self.model.neg_loglik(theta, self.x) + smooth_value(self.penalty, self.groups, theta)
        value += float(self.c @ theta)
        return value if np.isfinite(value) else np.inf

    def grad(self, theta) -> np.ndarray:
        return self.model.score(theta, self.x) + smooth_gradient(self.penalty, self.groups, theta) + self.c

    def hess(self, theta) -> np.ndarray:
        return self.model.hessian(theta, self.x) + smooth_hessian(self.penalty, self.groups, theta.size)

    def total(self, theta) -> float:
        return self.smooth(theta) + nonsmooth_value(self.penalty, self.groups, theta)

    def diverging(self, theta, grad) -> bool:
        if any(p.kind != "none" for p in self.penalty.per_group):
            return False
        return self.model.diverging(theta, self.x, grad)


def _newton(obj: _Objective, theta, opts: SolverOptions):
    f = obj.smooth(theta)
    if not np.isfinite(f):
        raise DomainError(f"initial point {theta} is outside the model domain")
    grad = obj.grad(theta)
    residual = float(np.linalg.norm(grad))
    for it in range(opts.max_iter):
        if residual <= opts.kkt_tol:
            return theta, it, residual, True
        try:
            direction = -linalg.cho_solve(linalg.cho_factor(obj.hess(theta)), grad)
        except linalg.LinAlgError:
            direction = -grad
        slope = float(grad @ direction)
        if slope >= 0:
            direction, slope = -grad, -residual**2
        step = 1.0
        while step > 1e-16:
            cand = theta + step * direction
            f_cand = obj.smooth(cand)
            if f_cand <= f + 1e-4 * step * slope:
                break
            # near the optimum the decrease drowns in rounding; a full step that
            # shrinks the gradient is still progress
            if step == 1.0 and np.isfinite(f_cand) and np.linalg.norm(obj.grad(cand)) < residual:
                break
            step *= 0.5
        else:
            return theta, it, residual, False
        theta, f = cand, f_cand
        grad = obj.grad(theta)
        residual = float(np.linalg.norm(grad))
        if residual > opts.kkt_tol and obj.diverging(theta, grad):
            logger.debug(f"newton: objective unbounded along the iterate path at {theta}")
            return theta, it + 1, residual, False
    return theta, opts.max_iter, residual, residual <= opts.kkt_tol


def _apg(obj: _Objective, theta, opts: SolverOptions):
    f_theta = obj.total(theta)
    if not np.isfinite(f_theta):
        raise DomainError(f"initial point {theta} is outside the model domain")
    y = theta.copy()
    momentum = 1.0
    step = opts.step_init
    residual = np.inf
    for it in range(1, opts.max_iter + 1):
        if not obj.model.in_domain(y):
            y, momentum = theta.copy(), 1.0
        f_y = obj.smooth(y)
        g_y = obj.grad(y)
        while True:
            z = prox_all(obj.penalty, obj.groups, y - step * g_y, step)
            f_z = obj.smooth(z)
            diff = z - y
            if f_z <= f_y + g_y @ diff + diff @ diff / (2.0 * step) + 1e-12 * abs(f_y):
                break
            step *= 0.5
            if step < 1e-30:
                logger.warning("backtracking collapsed the step size")
                return theta, it, residual, False
        F_z = f_z + nonsmooth_value(obj.penalty, obj.groups, z)
        if F_z > f_theta and not np.array_equal(y, theta):
            # monotone restart from the last accepted iterate
            y, momentum = theta.copy(), 1.0
            continue
        next_momentum = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum**2))
        y = z + ((momentum - 1.0) / next_momentum) * (z - theta)
        theta, f_theta, momentum = z, F_z, next_momentum
        residual = kkt_residual(obj.penalty, obj.groups, obj.grad(theta), theta)
        if residual <= opts.kkt_tol:
            return theta, it, residual, True
    return theta, opts.max_iter, residual, False


def ssosp_matrix(model, x, theta, penalty: PenaltySpec, groups: GroupStructure, opts: SolverOptions):
    """Second-order matrix of the penalized objective restricted to the effective support."""
    hess = model.hessian(theta, x) + smooth_hessian(penalty, groups, theta.size)
    support = effective_support(penalty, groups, theta, opts.active_tol)
    for j in support.A:
        if not penalty[j].smooth:
            g = groups[j]
            hess[np.ix_(g, g)] += group_hessian_block(penalty, j, theta[g])
    return hess[np.ix_(support.S, support.S)], support.S


def ssosp_report_penalized(model, x, theta, g_hat, penalty, groups, opts) -> SsospReport:
    failed = []
    support = effective_support(penalty, groups, theta, opts.active_tol)
    for j in support.A:
        if not penalty[j].smooth and at_knot(penalty, j, float(np.linalg.norm(theta[groups[j]]))):
            failed.append("knot")
            break
    if kkt_residual(penalty, groups, g_hat, theta) > opts.kkt_tol:
        failed.append("kkt")
    if "knot" not in failed:
        try:
            matrix, S = ssosp_matrix(model, x, theta, penalty, groups, opts)
            if S.size and linalg.eigvalsh(matrix)[0] <= opts.eig_tol:
                failed.append("not-pd")
        except DomainError:
            failed.append("domain")
    if failed:
        logger.debug(f"SSOSP check failed: {', '.join(failed)}")
    return SsospReport(not failed, tuple(failed))


def check_ssosp_penalized(model, data, fit: FitResult, penalty, groups, opts: SolverOptions) -> bool:
    x = model.check_x(as_x(data))
    theta = fit.theta_hat
    if not model.in_domain(theta):
        return False
    return ssosp_report_penalized(model, x, theta, fit.g_hat, penalty, groups, opts).ok


def _snap_to_zero(theta, penalty, groups, tol):
    theta = theta.copy()
    for j, g in enumerate(groups):
        if not penalty[j].smooth and 0.0 < np.linalg.norm(theta[g]) <= tol:
            theta[g] = 0.0
    return theta


def fit_penalized(
    model: ModelSpec,
    data,
    pert: Optional[Perturbation],
    penalty: PenaltySpec,
    groups: GroupStructure,
    opts: Optional[SolverOptions] = None,
    theta0=None,
) -> FitResult:
    """Perturbed penalized maximum likelihood."""
    opts = opts or SolverOptions()
    x = model.check_x(as_x(data))
    if groups.d != model.dim_param:
        raise DimensionError(f"groups cover {groups.d} coordinates, model has d={model.dim_param}")
    c = pert.linear_coef(model) if pert is not None else np.zeros(model.dim_param)
    obj = _Objective(model, x, c, penalty, groups)
    theta = np.asarray(theta0 if theta0 is not None else model.initial_theta(x), dtype=float)
    if penalty.smooth_only:
        theta, iterations, residual, converged = _newton(obj, theta, opts)
    else:
        theta, iterations, residual, converged = _apg(obj, theta, opts)
        theta = _snap_to_zero(theta, penalty, groups, opts.active_tol)
    g_hat = obj.grad(theta)
    residual = kkt_residual(penalty, groups, g_hat, theta)
    flags = []
    if not converged:
        flags.append("non-convergence")
        logger.warning(f"{model.kind} fit stopped after {iterations} iterations, KKT residual {residual:.3e}")
        ssosp = False
    else:
        report = ssosp_report_penalized(model, x, theta, g_hat, penalty, groups, opts)
        ssosp = report.ok
        flags.extend(report.failed)
    g_obs = None
    if pert is not None and pert.space == "obs":
        g_obs = (model.design @ theta - x) / model.nu**2 + pert.sigma * pert.w
    logger.debug(f"fit_penalized: {iterations} iterations, residual {residual:.2e}, ssosp={ssosp}")
    return FitResult(
        theta_hat=theta,
        g_hat=g_hat,
        active=effective_support(penalty, groups, theta, opts.active_tol),
        ssosp=ssosp,
        objective=obj.total(theta),
        iterations=iterations,
        grad_residual=residual,
        g_obs=g_obs,
        flags=tuple(flags),
    )


def fit_ols_perturbed(X_star, Z_star, pert: Perturbation) -> FitResult:
    """theta = (Z'Z)^{-1}(Z'X + sigma w), the minimizer of ||X - Z theta||^2 / 2 - sigma w'theta."""
    Z = np.atleast_2d(np.asarray(Z_star, dtype=float))
    X = np.asarray(X_star, dtype=float).reshape(-1)
    n, d = Z.shape
    if X.size != n or pert.w.size != d:
        raise DimensionError(f"X has length {X.size}, Z is {n}x{d}, w has length {pert.w.size}")
    if np.linalg.matrix_rank(Z) < d:
        raise SingularDesignError(f"design of shape {Z.shape} is rank deficient")
    tilt = pert.sigma * pert.w
    theta = linalg.solve(Z.T @ Z, Z.T @ X + tilt, assume_a="pos")
    resid = X - Z @ theta
    g_hat = -Z.T @ resid - tilt
    return FitResult(
        theta_hat=theta,
        g_hat=g_hat,
        active=ActiveSets(tuple(range(d)), np.arange(d)),
        ssosp=True,
        objective=0.5 * float(resid @ resid) - float(tilt @ theta),
        iterations=0,
        grad_residual=float(np.linalg.norm(g_hat)),
    )


def fit_fixed(model: ModelSpec, data, theta0) -> FitResult:
    """Degenerate estimator that always returns theta0 (singleton parameter space)."""
    x = model.check_x(as_x(data))
    theta = model.check_theta(theta0)
    d = model.dim_param
    return FitResult(
        theta_hat=theta,
        g_hat=np.zeros(d),
        active=ActiveSets(tuple(range(d)), np.arange(d)),
        ssosp=True,
        objective=model.neg_loglik(theta, x),
        iterations=0,
        grad_residual=0.0,
    )


def _trim_seed(x, w) -> int:
    digest = hashlib.sha256(np.ascontiguousarray(x).tobytes() + np.ascontiguousarray(w).tobytes()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def select_trim_set(model: ModelSpec, x, theta, h: int) -> np.ndarray:
    """The h trimmable observations with the largest density at theta; ties go to the lower index."""
    trim_idx = np.flatnonzero(model.trimmable)
    logdens = model.pointwise_logdensity(theta, x)[trim_idx]
    order = np.lexsort((trim_idx, -logdens))
    return np.sort(trim_idx[order[:h]])


def _keep_of(model, J):
    return np.sort(np.concatenate([np.asarray(J, dtype=int), np.flatnonzero(~model.trimmable)]))


def mtle_report(model, x, theta, g_hat, trim_set, opts: SolverOptions) -> SsospReport:
    """Boundary ordering, stationarity and positive curvature on the kept observations."""
    failed = []
    if not model.in_domain(theta):
        return SsospReport(False, ("domain",))
    trim_idx = np.flatnonzero(model.trimmable)
    inside = np.isin(trim_idx, trim_set)
    if not inside.all():
        logdens = model.pointwise_logdensity(theta, x)[trim_idx]
        if logdens[inside].min() <= logdens[~inside].max():
            failed.append("tie" if logdens[inside].min() == logdens[~inside].max() else "selection")
    if np.linalg.norm(g_hat) > opts.kkt_tol:
        failed.append("kkt")
    keep = _keep_of(model, trim_set)
    sub = model.subset(keep)
    if linalg.eigvalsh(sub.hessian(theta, x[keep]))[0] <= opts.eig_tol:
        failed.append("not-pd")
    if failed:
        logger.debug(f"trimmed SSOSP check failed: {', '.join(failed)}")
    return SsospReport(not failed, tuple(failed))


def check_ssosp_mtle(model, data, fit: FitResult, opts: SolverOptions) -> bool:
    x = model.check_x(as_x(data))
    return mtle_report(model, x, fit.theta_hat, fit.g_hat, fit.trim_set, opts).ok


def fit_mtle(
    model: ModelSpec, data, pert: Optional[Perturbation], h: int, opts: Optional[SolverOptions] = None
) -> FitResult:
    """Perturbed maximum trimmed likelihood over the h best trimmable observations."""
    opts = opts or SolverOptions()
    x = model.check_x(as_x(data))
    d = model.dim_param
    trim_idx = np.flatnonzero(model.trimmable)
    n_fixed = model.dim_obs - trim_idx.size
    if not 1 <= h <= trim_idx.size or h + n_fixed < d:
        raise DimensionError(f"trim size h={h} incompatible with {trim_idx.size} trimmable points and d={d}")
    pert = pert if pert is not None else Perturbation(np.zeros(d), 0.0)
    groups = GroupStructure.singletons(d)
    unpenalized = PenaltySpec.unpenalized(groups)

    def refit(J, theta0=None):
        keep = _keep_of(model, J)
        return fit_penalized(model.subset(keep), x[keep], pert, unpenalized, groups, opts, theta0)

    def concentrate(J, theta0=None):
        fit = None
        for _ in range(opts.max_csteps):
            fit = refit(J, theta0)
            J_next = select_trim_set(model, x, fit.theta_hat, h)
            if np.array_equal(J_next, J):
                break
            J, theta0 = J_next, fit.theta_hat
        return fit, J

    full = fit_penalized(model, x, pert, unpenalized, groups, opts)
    candidates = []
    if h == trim_idx.size:
        candidates.append((full, trim_idx))
    elif math.comb(trim_idx.size, h) <= opts.exhaustive_limit:
        logger.debug(f"enumerating all {math.comb(trim_idx.size, h)} trim sets")
        for J in itertools.combinations(trim_idx, h):
            try:
                candidates.append((refit(np.array(J), full.theta_hat), np.array(J)))
            except AcssError as exc:
                logger.debug(f"skipping trim set {J}: {exc}")
    else:
        rng = np.random.default_rng(_trim_seed(x, pert.w))
        starts = [select_trim_set(model, x, full.theta_hat, h)]
        elemental = min(h, d + 1)
        for _ in range(opts.restarts):
            J = np.sort(rng.choice(trim_idx, size=elemental, replace=False))
            try:
                starts.append(select_trim_set(model, x, refit(J).theta_hat, h))
            except AcssError as exc:
                logger.debug(f"elemental start {J} failed: {exc}")
        for J in starts:
            try:
                candidates.append(concentrate(J, full.theta_hat))
            except AcssError as exc:
                logger.debug(f"concentration from {J} failed: {exc}")

    converged = [(fit, J) for fit, J in candidates if "non-convergence" not in fit.flags]
    if not converged:
        logger.warning(f"fit_mtle: no trimmed fit converged for h={h}")
        J = select_trim_set(model, x, full.theta_hat, h)
        return FitResult(
            theta_hat=full.theta_hat,
            g_hat=full.g_hat,
            active=ActiveSets(tuple(range(d)), np.arange(d)),
            ssosp=False,
            objective=full.objective,
            iterations=full.iterations,
            grad_residual=full.grad_residual,
            trim_set=J,
            keep=_keep_of(model, J),
            flags=("non-convergence",),
        )
    best, J = min(converged, key=lambda item: item[0].objective)
    report = mtle_report(model, x, best.theta_hat, best.g_hat, J, opts)
    logger.debug(f"fit_mtle: h={h}, objective {best.objective:.6f}, ssosp={report.ok}")
    return FitResult(
        theta_hat=best.theta_hat,
        g_hat=best.g_hat,
        active=ActiveSets(tuple(range(d)), np.arange(d)),
        ssosp=report.ok,
        objective=best.objective,
        iterations=best.iterations,
        grad_residual=best.grad_residual,
        trim_set=J,
        keep=_keep_of(model, J),
        flags=report.failed,
    )


def hard_threshold(v, sparsity: int) -> np.ndarray:
    """Keep the `sparsity` largest-magnitude entries of v."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    keep = np.argsort(-np.abs(v), kind="stable")[:sparsity]
    out[keep] = v[keep]
    return out


def _support_refit(design, x, support) -> np.ndarray:
    theta = np.zeros(design.shape[1])
    theta[support] = np.linalg.lstsq(design[:, support], x, rcond=None)[0]
    return theta


def _htp(design, x, support, sparsity: int, max_iter: int):
    """Hard thresholding pursuit from one support; each step refits on the new support."""
    theta = _support_refit(design, x, support)
    rss = float(np.sum((x - design @ theta) ** 2))
    for it in range(1, max_iter + 1):
        grad = design.T @ (x - design @ theta)
        direction = design @ grad
        denom = float(direction @ direction)
        if denom <= 0.0:
            return theta, rss, it
        step = float(grad @ grad) / denom
        nxt_support = np.sort(np.flatnonzero(hard_threshold(theta + step * grad, sparsity)))
        if np.array_equal(nxt_support, support):
            return theta, rss, it
        nxt = _support_refit(design, x, nxt_support)
        nxt_rss = float(np.sum((x - design @ nxt) ** 2))
        if nxt_rss >= rss * (1.0 - 1e-12):
            return theta, rss, it
        theta, rss, support = nxt, nxt_rss, nxt_support
    return theta, rss, max_iter


def fit_iht(model: ModelSpec, data, sparsity: int, opts: Optional[SolverOptions] = None) -> FitResult:
    """Best-subset fit of a Gaussian linear model by normalized hard thresholding.

    The first start is the top-`sparsity` marginal correlations; opts.restarts - 1
    further starts are seeded random supports. The lowest residual sum of
    squares wins.
    """
    opts = opts or SolverOptions()
    design = getattr(model, "design", None)
    if design is None:
        raise DimensionError(f"IHT needs a linear model, got {model.kind}")
    if not 1 <= sparsity <= model.dim_param:
        raise DomainError(f"sparsity must lie in [1, {model.dim_param}], got {sparsity}")
    x = model.check_x(as_x(data))
    starts = [np.sort(np.flatnonzero(hard_threshold(design.T @ x, sparsity)))]
    rng = np.random.default_rng(0)
    for _ in range(opts.restarts - 1):
        starts.append(np.sort(rng.choice(model.dim_param, size=sparsity, replace=False)))
    best, best_rss, iterations = None, np.inf, 0
    for support in starts:
        theta, rss, used = _htp(design, x, support, sparsity, opts.max_iter)
        iterations += used
        if rss < best_rss:
            best, best_rss = theta, rss
    theta = best
    support = np.flatnonzero(theta)
    logger.debug(f"fit_iht: support {support.tolist()}, rss {best_rss:.6f} over {len(starts)} starts")
    grad = model.score(theta, x)
    residual = float(np.linalg.norm(grad[support])) if support.size else 0.0
    ssosp = support.size > 0 and np.linalg.matrix_rank(design[:, support]) == support.size
    return FitResult(
        theta_hat=theta,
        g_hat=grad,
        active=ActiveSets(tuple(int(j) for j in support), support),
        ssosp=bool(ssosp and residual <= max(opts.kkt_tol, 1e-8) * (1.0 + np.linalg.norm(x))),
        objective=model.neg_loglik(theta, x),
        iterations=iterations,
        grad_residual=residual,
    )


def gradient_statistic(
    model: ModelSpec,
    data,
    fit: FitResult,
    pert: Perturbation,
    variant: str = "standard",
    penalty: Optional[PenaltySpec] = None,
    groups: Optional[GroupStructure] = None,
) -> np.ndarray:
    """g_hat = grad L(theta_hat; x) + sigma w, or its observation-space Gaussian-additive form."""
    x = model.check_x(as_x(data))
    theta = fit.theta_hat
    if variant == "gaussian-additive":
        if pert.w.size != model.dim_obs:
            raise DimensionError(f"gaussian-additive statistic needs w of length {model.dim_obs}")
        return (model.design @ theta - x) / model.nu**2 + pert.sigma * pert.w
    if variant != "standard":
        raise DomainError(f"unknown gradient statistic variant {variant!r}")
    grad = model.score(theta, x)
    if penalty is not None and groups is not None:
        grad = grad + smooth_gradient(penalty, groups, theta)
    return grad + pert.linear_coef(model)
