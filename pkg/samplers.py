"""Copy generation, importance weights and p-values for the aCSS test.

run_acss ties the pieces together: perturb, fit, fall back to the observed
data when the fit is not an SSOSP, otherwise draw copies from a proposal,
weight them against the conditional density and rank the statistic.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np

from densities import ConditioningStat, log_unnorm_density
from errors import AbsoluteContinuityError, ConfigError, DimensionError, DomainError
from estimators import (
    FitResult,
    SolverOptions,
    draw_perturbation,
    fit_fixed,
    fit_mtle,
    fit_penalized,
)
from models import ModelSpec, Sample, as_x
from penalties import GroupStructure, PenaltySpec

logger = logging.getLogger(__name__)

PROPOSALS = ("iid-model", "gaussian-additive", "gaussian-acss", "sphere-vmf", "degenerate", "css", "acss-ols", "oracle")
ESTIMATORS = ("penalized", "mtle", "fixed", "gaussian-additive", "gaussian-acss")


@dataclass
class CopySet:
    """M copies (one per row) and M + 1 weights, the observed data first."""

    copies: np.ndarray
    weights: np.ndarray
    proposal: str

    def __post_init__(self):
        self.copies = np.atleast_2d(np.asarray(self.copies, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.proposal not in PROPOSALS:
            raise DomainError(f"unknown proposal {self.proposal!r}")
        if self.weights.size != self.copies.shape[0] + 1:
            raise DimensionError(f"{self.weights.size} weights for {self.copies.shape[0]} copies")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0) or not np.any(self.weights > 0):
            raise DomainError("copy weights must be finite, nonnegative and not all zero")

    @property
    def M(self) -> int:
        return self.copies.shape[0]


@dataclass
class PValueReport:
    pval: float
    t_obs: float
    t_copies: np.ndarray
    method: str
    weighted: bool
    ssosp: bool = True
    flags: Tuple[str, ...] = ()


def degenerate_copies(x, M: int) -> CopySet:
    """Every copy equals the observed data."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return CopySet(np.tile(x, (M, 1)), np.ones(M + 1), "degenerate")


def sample_copies_gaussian_additive(B, fit: FitResult, nu: float, sigma: float, M: int, rng) -> CopySet:
    """N(B theta - (1 + n/(sigma^2 nu^2))^{-1} (n/sigma^2) g, nu^2 (1 + n/(sigma^2 nu^2))^{-1} I)."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = B.shape[0]
    g = fit.g_obs
    if g is None or g.size != n:
        raise DimensionError("gaussian-additive copies need the observation-space gradient statistic")
    shrink = 1.0 / (1.0 + n / (sigma**2 * nu**2))
    mean = B @ fit.theta_hat - shrink * (n / sigma**2) * g
    copies = mean + nu * np.sqrt(shrink) * rng.standard_normal((M, n))
    return CopySet(copies, np.ones(M + 1), "gaussian-additive")


def gaussian_acss_law(mu_hat, x_noise, nu: float, sigma: float):
    """Mean and per-coordinate variance of X given X + sigma U, with X ~ N(mu_hat, nu^2 I)."""
    mu_hat = np.asarray(mu_hat, dtype=float).reshape(-1)
    x_noise = np.asarray(as_x(x_noise), dtype=float)
    if mu_hat.shape != x_noise.shape:
        raise DimensionError(f"mu_hat has length {mu_hat.size}, x_noise has length {x_noise.size}")
    total = sigma**2 + nu**2
    return (sigma**2 * mu_hat + nu**2 * x_noise) / total, sigma**2 * nu**2 / total


def sample_copies_gaussian_acss(mu_hat, x_noise, nu: float, sigma: float, M: int, rng) -> CopySet:
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    mean, var = gaussian_acss_law(mu_hat, x_noise, nu, sigma)
    copies = mean + np.sqrt(var) * rng.standard_normal((M, mean.size))
    return CopySet(copies, np.ones(M + 1), "gaussian-acss")


def perturb_observation(x, sigma: float, rng) -> Sample:
    """X_noise = X + sigma U with U ~ N(0, I_n)."""
    if sigma < 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma}")
    base = x if isinstance(x, Sample) else Sample(x)
    return base.with_x(base.x + sigma * rng.standard_normal(base.n))


def _wood_weights(kappa: float, dim: int, size: int, rng) -> np.ndarray:
    """Cosines w = u'mu of vMF draws on the sphere in R^dim, by rejection."""
    d1 = dim - 1
    b = d1 / (np.sqrt(4.0 * kappa**2 + d1**2) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + d1 * np.log(1.0 - x0**2)
    out = np.empty(0)
    while out.size < size:
        need = size - out.size
        z = rng.beta(d1 / 2.0, d1 / 2.0, size=2 * need)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=2 * need)
        accepted = w[kappa * w + d1 * np.log(1.0 - x0 * w) - c >= np.log(u)]
        out = np.concatenate([out, accepted[:need]])
    return out


def sample_vmf(mean_direction, kappa: float, M: int, rng) -> np.ndarray:
    """M draws from the von Mises-Fisher law on the unit sphere, one per row."""
    mu = np.asarray(mean_direction, dtype=float).reshape(-1)
    mu = mu / np.linalg.norm(mu)
    dim = mu.size
    if kappa < 0:
        raise DomainError(f"kappa must be nonnegative, got {kappa}")
    if dim == 1:
        p_plus = 1.0 / (1.0 + np.exp(-2.0 * kappa))
        return np.where(rng.uniform(size=(M, 1)) < p_plus, mu, -mu)
    if kappa == 0.0:
        draws = rng.standard_normal((M, dim))
        return draws / np.linalg.norm(draws, axis=1, keepdims=True)
    w = _wood_weights(kappa, dim, M, rng)
    tangent = rng.standard_normal((M, dim))
    tangent -= np.outer(tangent @ mu, mu)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    return w[:, None] * mu + np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * tangent


def _proposal_logdensity(model: ModelSpec, x, stat: ConditioningStat, proposal: str, log_p: float) -> float:
    if proposal in ("iid-model", "sphere-vmf"):
        # the sphere proposal is the model law restricted to fixed group norms,
        # so on a copy set sharing those norms it has the model's density shape
        if stat.variant == "mtle":
            sub = model.subset(stat.keep)
            full = np.asarray(x, dtype=float)
            x_keep = full[stat.keep] if full.size == stat.x_fixed.size else full
            return -sub.neg_loglik(stat.theta_hat, x_keep)
        return -model.neg_loglik(stat.theta_hat, x)
    # the remaining proposals are the target itself
    return log_p


def log_importance_weight(
    model: ModelSpec, x, stat: ConditioningStat, penalty=None, groups=None, proposal: str = "iid-model", opts=None
) -> float:
    log_p = log_unnorm_density(model, x, stat, penalty, groups, opts)
    log_q = _proposal_logdensity(model, as_x(x), stat, proposal, log_p)
    if log_q == -np.inf:
        if log_p > -np.inf:
            raise AbsoluteContinuityError(f"{proposal} proposal has zero density where the target is positive")
        return -np.inf
    if log_p == -np.inf:
        return -np.inf
    return float(log_p - log_q)


def importance_weight(
    model: ModelSpec, x, stat: ConditioningStat, penalty=None, groups=None, proposal: str = "iid-model", opts=None
) -> float:
    """dP/dQ at x up to a constant shared by every point of one copy set."""
    return float(np.exp(log_importance_weight(model, x, stat, penalty, groups, proposal, opts)))


def normalize_log_weights(log_weights) -> np.ndarray:
    log_weights = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(log_weights)
    if not finite.any():
        raise AbsoluteContinuityError("every point of the copy set has zero weight")
    weights = np.zeros_like(log_weights)
    weights[finite] = np.exp(log_weights[finite] - log_weights[finite].max())
    return weights


def _weights_for(model, x, copies, stat, penalty, groups, proposal, opts) -> np.ndarray:
    points = [x, *copies]
    log_w = [log_importance_weight(model, p, stat, penalty, groups, proposal, opts) for p in points]
    weights = normalize_log_weights(log_w)
    if weights[0] > 0 and not np.any(weights[1:] > 0):
        logger.warning("all copy weights underflowed to zero; the p-value will be 1")
    return weights


def sample_copies_sphere(
    model: ModelSpec,
    fit: FitResult,
    data,
    M: int,
    rng,
    sigma: float = 1.0,
    penalty: Optional[PenaltySpec] = None,
    groups: Optional[GroupStructure] = None,
    include_hessian_det: bool = True,
    opts: Optional[SolverOptions] = None,
) -> CopySet:
    """Behrens-Fisher copies drawn from the fitted Gaussian given each group's norm."""
    if model.kind != "behrens-fisher":
        raise DomainError(f"sphere proposal is defined for behrens-fisher, got {model.kind}")
    if not fit.ssosp:
        raise DomainError("sphere proposal needs an SSOSP fit")
    x = model.check_x(as_x(data))
    mu, *variances = fit.theta_hat
    coords = fit.keep if fit.keep is not None else np.arange(model.dim_obs)
    copies = np.tile(x, (M, 1))
    for k, (lo, hi) in enumerate(((0, model.n0), (model.n0, model.dim_obs))):
        idx = coords[(coords >= lo) & (coords < hi)]
        if idx.size == 0:
            continue
        radius = float(np.linalg.norm(x[idx]))
        direction = np.full(idx.size, 1.0 if mu >= 0 else -1.0) / np.sqrt(idx.size)
        kappa = radius * abs(mu) * np.sqrt(idx.size) / variances[k]
        copies[:, idx] = radius * sample_vmf(direction, kappa, M, rng)
    variant = "mtle" if fit.trim_set is not None else "penalized"
    stat = ConditioningStat.from_fit(fit, sigma, variant, data=x, include_hessian_det=include_hessian_det)
    weights = _weights_for(model, x, copies, stat, penalty, groups, "sphere-vmf", opts)
    return CopySet(copies, weights, "sphere-vmf")


def sample_copies_iid(
    model: ModelSpec,
    fit: FitResult,
    data,
    M: int,
    rng,
    stat: ConditioningStat,
    penalty: Optional[PenaltySpec] = None,
    groups: Optional[GroupStructure] = None,
    opts: Optional[SolverOptions] = None,
) -> CopySet:
    """Copies drawn i.i.d. from the fitted model; only the kept block is redrawn after trimming."""
    x = model.check_x(as_x(data))
    copies = np.tile(x, (M, 1))
    coords = fit.keep if fit.keep is not None else np.arange(model.dim_obs)
    for m in range(M):
        copies[m, coords] = model.sample(fit.theta_hat, rng)[coords]
    weights = _weights_for(model, x, copies, stat, penalty, groups, "iid-model", opts)
    return CopySet(copies, weights, "iid-model")


def pval_unweighted(t_obs: float, t_copies) -> float:
    """(1 + #{T(copy) >= T(X)}) / (M + 1)."""
    t_copies = np.asarray(t_copies, dtype=float).reshape(-1)
    if t_copies.size == 0:
        raise DimensionError("need at least one copy")
    return float((1 + np.sum(t_copies >= t_obs)) / (t_copies.size + 1))


def pval_weighted(t_obs: float, t_copies, weights) -> float:
    """Weighted rank of the observed statistic among its copies, the original weight first."""
    t_copies = np.asarray(t_copies, dtype=float).reshape(-1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if t_copies.size == 0:
        raise DimensionError("need at least one copy")
    if weights.size != t_copies.size + 1:
        raise DimensionError(f"{weights.size} weights for {t_copies.size} copies")
    total = weights.sum()
    if total <= 0:
        raise DomainError("all weights are zero")
    hits = weights[0] + np.sum(weights[1:] * (t_copies >= t_obs))
    return float(min(hits / total, 1.0))


def _mean_difference(model):
    n0 = getattr(model, "n0", None)
    if n0 is None:
        raise ConfigError("mean-difference statistic needs a two-sample model")
    return lambda x: float(np.mean(x[n0:]) - np.mean(x[:n0]))


STATISTICS = {
    "mean-difference": _mean_difference,
    "abs-mean-difference": lambda model: (lambda x, f=_mean_difference(model): abs(f(x))),
    "mean": lambda model: (lambda x: float(np.mean(x))),
    "sum": lambda model: (lambda x: float(np.sum(x))),
    "max": lambda model: (lambda x: float(np.max(x))),
}


def resolve_statistic(statistic: Union[str, Callable], model: ModelSpec) -> Callable:
    if callable(statistic):
        return statistic
    if statistic not in STATISTICS:
        raise ConfigError(f"unknown statistic {statistic!r}; choose from {sorted(STATISTICS)}")
    return STATISTICS[statistic](model)


@dataclass
class AcssSettings:
    """Knobs of one aCSS run."""

    estimator: str = "penalized"
    sigma: float = 1.0
    M: int = 200
    proposal: str = "iid-model"
    statistic: Union[str, Callable] = "mean"
    penalty: Optional[PenaltySpec] = None
    groups: Optional[GroupStructure] = None
    h: Optional[int] = None
    theta_fixed: Optional[np.ndarray] = None
    mean_estimator: Optional[Callable] = None
    weighted: bool = True
    include_hessian_det: bool = True
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.proposal not in PROPOSALS:
            raise ConfigError(f"unknown proposal {self.proposal!r}")
        if self.M < 1:
            raise ConfigError(f"M must be positive, got {self.M}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be nonnegative, got {self.sigma}")
        if self.estimator == "mtle" and self.h is None:
            raise ConfigError("mtle estimator needs h")
        if self.estimator == "fixed" and self.theta_fixed is None:
            raise ConfigError("fixed estimator needs theta_fixed")


def _least_squares_mean(model: ModelSpec) -> Callable:
    design = getattr(model, "design", None)
    if design is None:
        raise ConfigError(f"gaussian-acss on a {model.kind} model needs a mean_estimator")
    return lambda x_noise: design @ np.linalg.lstsq(design, x_noise, rcond=None)[0]


def run_acss(model: ModelSpec, data, settings: AcssSettings, seed=None) -> PValueReport:
    """One aCSS test: perturbed fit, copies, weights and the (weighted) p-value."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = model.check_x(as_x(data))
    T = resolve_statistic(settings.statistic, model)
    t_obs = float(T(x))
    groups = settings.groups or GroupStructure.singletons(model.dim_param)
    penalty = settings.penalty or PenaltySpec.unpenalized(groups)
    sigma, M = settings.sigma, settings.M
    method = f"{settings.estimator}/{settings.proposal}"
    ssosp, flags = True, ()

    if settings.estimator == "gaussian-acss":
        x_noise = perturb_observation(x, sigma, rng).x
        estimate = settings.mean_estimator or _least_squares_mean(model)
        copies = sample_copies_gaussian_acss(estimate(x_noise), x_noise, model.nu, sigma, M, rng)
    elif settings.estimator == "gaussian-additive":
        pert = draw_perturbation(rng, model.dim_obs, sigma, space="obs")
        fit = fit_penalized(model, x, pert, penalty, groups, settings.solver)
        copies = sample_copies_gaussian_additive(model.design, fit, model.nu, sigma, M, rng)
    else:
        if settings.estimator == "fixed":
            fit = fit_fixed(model, x, settings.theta_fixed)
            variant = "fixed"
        else:
            pert = draw_perturbation(rng, model.dim_param, sigma)
            if settings.estimator == "mtle":
                fit = fit_mtle(model, x, pert, settings.h, settings.solver)
                variant = "mtle"
            else:
                fit = fit_penalized(model, x, pert, penalty, groups, settings.solver)
                variant = "penalized"
        if not fit.ssosp:
            logger.warning(f"{method}: fit is not an SSOSP ({', '.join(fit.flags) or 'unknown'}), copies fall back to the data")
            ssosp, flags = False, fit.flags
            copies = degenerate_copies(x, M)
        elif settings.proposal == "sphere-vmf":
            copies = sample_copies_sphere(
                model, fit, x, M, rng, sigma, penalty, groups, settings.include_hessian_det, settings.solver
            )
        elif settings.proposal == "iid-model":
            stat = ConditioningStat.from_fit(fit, sigma, variant, data=x, include_hessian_det=settings.include_hessian_det)
            copies = sample_copies_iid(model, fit, x, M, rng, stat, penalty, groups, settings.solver)
        else:
            raise ConfigError(f"proposal {settings.proposal!r} does not apply to the {variant} estimator")

    t_copies = np.array([T(c) for c in copies.copies])
    if settings.weighted:
        pval = pval_weighted(t_obs, t_copies, copies.weights)
    else:
        pval = pval_unweighted(t_obs, t_copies)
    logger.debug(f"{method}: t_obs={t_obs:.4f}, pval={pval:.4f}")
    return PValueReport(pval, t_obs, t_copies, method, settings.weighted, ssosp, flags)
