"""Unnormalized densities of copies given the conditioning statistic (theta_hat, g_hat).

All values are log densities; -inf marks a candidate outside the set of data
for which theta_hat is still a strict second-order stationary point.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from errors import DimensionError, DomainError, KnotError, NotPositiveDefiniteError
from estimators import (
    FitResult,
    SolverOptions,
    mtle_report,
    ssosp_matrix,
    ssosp_report_penalized,
)
from models import ModelSpec, as_x
from penalties import GroupStructure, PenaltySpec, smooth_gradient

logger = logging.getLogger(__name__)

VARIANTS = ("penalized", "mtle", "gaussian-additive", "gaussian-acss", "fixed")


@dataclass(frozen=True)
class ConditioningStat:
    """What the copies are conditioned on.

    penalized and mtle carry (theta_hat, g_hat); mtle also carries the kept
    index set and the full observed vector whose trimmed-out block stays
    fixed. The closed-form Gaussian variants carry their copy law (mean, var).
    fixed is the singleton parameter space, where copies are i.i.d. draws.
    """

    theta_hat: np.ndarray
    g_hat: np.ndarray
    sigma: float
    variant: str = "penalized"
    trim_set: Optional[np.ndarray] = None
    keep: Optional[np.ndarray] = None
    x_fixed: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    var: Optional[float] = None
    include_hessian_det: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown conditioning variant {self.variant!r}")
        if self.variant in ("penalized", "mtle") and self.sigma <= 0:
            raise DomainError(f"{self.variant} copy density needs sigma > 0, got {self.sigma}")
        if self.variant == "mtle" and (self.keep is None or self.x_fixed is None):
            raise DomainError("mtle conditioning needs the kept indices and the observed data")

    @classmethod
    def from_fit(
        cls, fit: FitResult, sigma: float, variant: str = "penalized", data=None, include_hessian_det: bool = True
    ) -> "ConditioningStat":
        if variant == "mtle":
            return cls(
                fit.theta_hat,
                fit.g_hat,
                sigma,
                "mtle",
                trim_set=fit.trim_set,
                keep=fit.keep,
                x_fixed=np.array(as_x(data), dtype=float),
                include_hessian_det=include_hessian_det,
            )
        return cls(fit.theta_hat, fit.g_hat, sigma, variant, include_hessian_det=include_hessian_det)

    @classmethod
    def gaussian(cls, variant: str, mean, var: float, sigma: float) -> "ConditioningStat":
        mean = np.asarray(mean, dtype=float)
        return cls(np.empty(0), np.empty(0), sigma, variant, mean=mean, var=float(var))


def _defaults(model, penalty, groups, opts):
    groups = groups if groups is not None else GroupStructure.singletons(model.dim_param)
    penalty = penalty if penalty is not None else PenaltySpec.unpenalized(groups)
    return penalty, groups, opts or SolverOptions()


def _full_vector(stat: ConditioningStat, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == stat.x_fixed.size:
        return x
    if x.size != stat.keep.size:
        raise DimensionError(f"candidate has length {x.size}, expected {stat.keep.size} or {stat.x_fixed.size}")
    full = stat.x_fixed.copy()
    full[stat.keep] = x
    return full


def f_pen_logdet(
    model: ModelSpec, x, stat: ConditioningStat, penalty: PenaltySpec, groups: GroupStructure, opts=None
) -> float:
    """log det of the support-restricted second-order matrix; 0 on an empty support."""
    penalty, groups, opts = _defaults(model, penalty, groups, opts)
    x = model.check_x(as_x(x))
    try:
        matrix, S = ssosp_matrix(model, x, stat.theta_hat, penalty, groups, opts)
    except KnotError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc
    if S.size == 0:
        return 0.0
    try:
        chol = linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"restricted matrix on {S.size} coordinates is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def membership_indicator(
    model: ModelSpec, x, stat: ConditioningStat, penalty=None, groups=None, opts=None
) -> bool:
    """Whether theta_hat is still an SSOSP for x under the implied perturbation.

    The implied w = (g_hat - grad L(theta_hat; x)) / sigma makes the smooth
    gradient at (x, w) equal g_hat, so only the x-dependent curvature (and,
    for mtle, the trim selection) can change.
    """
    penalty, groups, opts = _defaults(model, penalty, groups, opts)
    if stat.variant == "penalized":
        x = model.check_x(as_x(x))
        if not model.in_domain(stat.theta_hat):
            return False
        return ssosp_report_penalized(model, x, stat.theta_hat, stat.g_hat, penalty, groups, opts).ok
    if stat.variant == "mtle":
        full = _full_vector(stat, as_x(x))
        return mtle_report(model, full, stat.theta_hat, stat.g_hat, stat.trim_set, opts).ok
    return True


def log_unnorm_density_mtle(model: ModelSpec, x_sub, stat: ConditioningStat, opts=None) -> float:
    """Density of the kept block given theta_hat, g_hat and the trimmed-out block."""
    opts = opts or SolverOptions()
    if stat.variant != "mtle":
        raise DomainError(f"trimmed density needs an mtle statistic, got {stat.variant}")
    full = _full_vector(stat, as_x(x_sub))
    if not mtle_report(model, full, stat.theta_hat, stat.g_hat, stat.trim_set, opts).ok:
        return -np.inf
    sub = model.subset(stat.keep)
    x_keep = full[stat.keep]
    gap = stat.g_hat - sub.score(stat.theta_hat, x_keep)
    value = -sub.neg_loglik(stat.theta_hat, x_keep) - model.dim_param * float(gap @ gap) / (2.0 * stat.sigma**2)
    if stat.include_hessian_det:
        sign, logdet = np.linalg.slogdet(sub.hessian(stat.theta_hat, x_keep))
        if sign <= 0:
            return -np.inf
        value += logdet
    return float(value)


def log_unnorm_density(
    model: ModelSpec, x, stat: ConditioningStat, penalty=None, groups=None, opts=None
) -> float:
    """log f(x; theta_hat) - d ||g_hat - grad (L + R)(theta_hat; x)||^2 / (2 sigma^2) + log F_pen."""
    penalty, groups, opts = _defaults(model, penalty, groups, opts)
    if stat.variant == "mtle":
        return log_unnorm_density_mtle(model, x, stat, opts)
    x = model.check_x(as_x(x))
    if stat.variant == "fixed":
        return -model.neg_loglik(stat.theta_hat, x)
    if stat.variant in ("gaussian-additive", "gaussian-acss"):
        resid = x - stat.mean
        return float(-resid @ resid / (2.0 * stat.var))
    if not membership_indicator(model, x, stat, penalty, groups, opts):
        return -np.inf
    theta = stat.theta_hat
    grad = model.score(theta, x) + smooth_gradient(penalty, groups, theta)
    gap = stat.g_hat - grad
    value = -model.neg_loglik(theta, x) - model.dim_param * float(gap @ gap) / (2.0 * stat.sigma**2)
    if stat.include_hessian_det:
        try:
            value += f_pen_logdet(model, x, stat, penalty, groups, opts)
        except NotPositiveDefiniteError:
            return -np.inf
    return float(value)
