"""Parametric families used by the aCSS pipelines.

Every model exposes the negative log likelihood (with its additive constants),
its score and Hessian in the parameter, forward simulation, and the per
observation log density used by trimmed likelihood estimation.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from errors import DimensionError, DomainError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Sample:
    """Observed data: the vector x plus optional response and labeled mask."""

    x: np.ndarray
    y: Optional[np.ndarray] = None
    labeled: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(-1))
        if self.y is not None:
            y = np.asarray(self.y, dtype=float).reshape(-1)
            if y.shape != self.x.shape:
                raise DimensionError(f"y has length {y.size}, x has length {self.x.size}")
            object.__setattr__(self, "y", y)
        if self.labeled is not None:
            labeled = np.asarray(self.labeled, dtype=bool).reshape(-1)
            if labeled.shape != self.x.shape:
                raise DimensionError("labeled mask must match the length of x")
            object.__setattr__(self, "labeled", labeled)

    @property
    def n(self) -> int:
        return self.x.size

    def with_x(self, x) -> "Sample":
        return Sample(x, self.y, self.labeled)


class ModelSpec:
    """Base class for a parametric family X ~ P_theta on R^n."""

    kind = "custom"

    def __init__(self, dim_param: int, dim_obs: int):
        if dim_param < 1 or dim_obs < 1:
            raise DimensionError(f"dimensions must be positive, got d={dim_param}, n={dim_obs}")
        self.dim_param = int(dim_param)
        self.dim_obs = int(dim_obs)

    # hooks implemented by concrete families
    def _neg_loglik(self, theta, x):
        raise NotImplementedError

    def _score(self, theta, x):
        raise NotImplementedError

    def _hessian(self, theta, x):
        raise NotImplementedError

    def _sample(self, theta, rng):
        raise NotImplementedError

    def _pointwise_logdensity(self, theta, x):
        raise NotImplementedError(f"{self.kind} model has no per-observation density")

    def in_domain(self, theta) -> bool:
        return bool(np.all(np.isfinite(theta)))

    def diverging(self, theta, x, grad) -> bool:
        """Whether descent on a tilted objective with gradient grad at theta can only run off to infinity."""
        return False

    @property
    def trimmable(self) -> np.ndarray:
        """Mask of observations a trimmed estimator may discard."""
        return np.ones(self.dim_obs, dtype=bool)

    def subset(self, keep) -> "ModelSpec":
        """The same family restricted to the observations indexed by keep."""
        raise NotImplementedError(f"{self.kind} model cannot be restricted to a subset")

    def initial_theta(self, x) -> np.ndarray:
        return np.zeros(self.dim_param)

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.dim_param:
            raise DimensionError(f"theta has length {theta.size}, expected {self.dim_param}")
        if not self.in_domain(theta):
            raise DomainError(f"theta={theta} lies outside the {self.kind} parameter domain")
        return theta

    def check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.dim_obs:
            raise DimensionError(f"data has length {x.size}, expected {self.dim_obs}")
        return x

    # public, validated entry points
    def neg_loglik(self, theta, x) -> float:
        return float(self._neg_loglik(self.check_theta(theta), self.check_x(x)))

    def score(self, theta, x) -> np.ndarray:
        return np.asarray(self._score(self.check_theta(theta), self.check_x(x)), dtype=float)

    def hessian(self, theta, x) -> np.ndarray:
        hess = np.asarray(self._hessian(self.check_theta(theta), self.check_x(x)), dtype=float)
        return 0.5 * (hess + hess.T)

    def sample(self, theta, rng) -> np.ndarray:
        return np.asarray(self._sample(self.check_theta(theta), rng), dtype=float)

    def pointwise_logdensity(self, theta, x) -> np.ndarray:
        return np.asarray(self._pointwise_logdensity(self.check_theta(theta), self.check_x(x)))


class GaussianLinearModel(ModelSpec):
    """X | Z ~ N(Z theta, nu^2 I)."""

    kind = "gaussian-linear"

    def __init__(self, Z, nu: float = 1.0):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if nu <= 0 or not np.isfinite(nu):
            raise DomainError(f"noise sd must be positive, got nu={nu}")
        super().__init__(Z.shape[1], Z.shape[0])
        self.Z = Z
        self.nu = float(nu)

    @property
    def design(self) -> np.ndarray:
        return self.Z

    def _neg_loglik(self, theta, x):
        resid = x - self.Z @ theta
        return 0.5 * self.dim_obs * (LOG_2PI + 2.0 * np.log(self.nu)) + resid @ resid / (2.0 * self.nu**2)

    def _score(self, theta, x):
        return self.Z.T @ (self.Z @ theta - x) / self.nu**2

    def _hessian(self, theta, x):
        return self.Z.T @ self.Z / self.nu**2

    def _sample(self, theta, rng):
        return self.Z @ theta + self.nu * rng.standard_normal(self.dim_obs)

    def _pointwise_logdensity(self, theta, x):
        resid = x - self.Z @ theta
        return -0.5 * (LOG_2PI + 2.0 * np.log(self.nu)) - resid**2 / (2.0 * self.nu**2)

    def subset(self, keep):
        return GaussianLinearModel(self.Z[np.asarray(keep, dtype=int)], self.nu)


class BehrensFisherModel(ModelSpec):
    """Two Gaussian samples sharing a mean: X0 ~ N(mu, g0), X1 ~ N(mu, g1).

    theta = (mu, g0, g1) with both variances strictly positive. The data
    vector stacks the n0 observations of group 0 before the n1 of group 1.
    Only group 0 is trimmable.
    """

    kind = "behrens-fisher"

    def __init__(self, n0: int, n1: int):
        if n0 < 1 or n1 < 1:
            raise DimensionError(f"group sizes must be positive, got n0={n0}, n1={n1}")
        super().__init__(3, n0 + n1)
        self.n0 = int(n0)
        self.n1 = int(n1)

    def in_domain(self, theta) -> bool:
        return bool(np.all(np.isfinite(theta)) and theta[1] > 0 and theta[2] > 0)

    @property
    def trimmable(self):
        mask = np.zeros(self.dim_obs, dtype=bool)
        mask[: self.n0] = True
        return mask

    def groups(self, x):
        return x[: self.n0], x[self.n0 :]

    def diverging(self, theta, x, grad):
        # past g = 2 S / n the objective is concave in g, so a negative slope there never turns
        mu = theta[0]
        for k, (xk, nk) in enumerate(zip(self.groups(x), (self.n0, self.n1))):
            spread = float(np.sum((xk - mu) ** 2))
            if theta[1 + k] > 2.0 * spread / nk and grad[1 + k] < 0:
                return True
        return False

    def _variances(self, theta):
        return np.concatenate([np.full(self.n0, theta[1]), np.full(self.n1, theta[2])])

    def _neg_loglik(self, theta, x):
        mu, g0, g1 = theta
        x0, x1 = self.groups(x)
        return (
            0.5 * self.n0 * (LOG_2PI + np.log(g0))
            + np.sum((x0 - mu) ** 2) / (2.0 * g0)
            + 0.5 * self.n1 * (LOG_2PI + np.log(g1))
            + np.sum((x1 - mu) ** 2) / (2.0 * g1)
        )

    def _score(self, theta, x):
        mu, g0, g1 = theta
        x0, x1 = self.groups(x)
        s0 = np.sum((x0 - mu) ** 2)
        s1 = np.sum((x1 - mu) ** 2)
        return np.array(
            [
                np.sum(mu - x0) / g0 + np.sum(mu - x1) / g1,
                self.n0 / (2.0 * g0) - s0 / (2.0 * g0**2),
                self.n1 / (2.0 * g1) - s1 / (2.0 * g1**2),
            ]
        )

    def _hessian(self, theta, x):
        mu, g0, g1 = theta
        x0, x1 = self.groups(x)
        hess = np.zeros((3, 3))
        hess[0, 0] = self.n0 / g0 + self.n1 / g1
        hess[0, 1] = hess[1, 0] = np.sum(x0 - mu) / g0**2
        hess[0, 2] = hess[2, 0] = np.sum(x1 - mu) / g1**2
        hess[1, 1] = -self.n0 / (2.0 * g0**2) + np.sum((x0 - mu) ** 2) / g0**3
        hess[2, 2] = -self.n1 / (2.0 * g1**2) + np.sum((x1 - mu) ** 2) / g1**3
        return hess

    def _sample(self, theta, rng):
        return theta[0] + np.sqrt(self._variances(theta)) * rng.standard_normal(self.dim_obs)

    def _pointwise_logdensity(self, theta, x):
        var = self._variances(theta)
        return -0.5 * (LOG_2PI + np.log(var)) - (x - theta[0]) ** 2 / (2.0 * var)

    def subset(self, keep):
        keep = np.asarray(keep, dtype=int)
        n0 = int(np.sum(keep < self.n0))
        if np.any(np.diff(keep) <= 0):
            raise DimensionError("subset indices must be strictly increasing")
        return BehrensFisherModel(n0, keep.size - n0)

    def initial_theta(self, x):
        x0, x1 = self.groups(np.asarray(x, dtype=float))
        g0 = max(float(np.var(x0)), 1e-2) if x0.size > 1 else 1.0
        g1 = max(float(np.var(x1)), 1e-2) if x1.size > 1 else 1.0
        return np.array([float(np.mean(x)), g0, g1])


class CustomModel(ModelSpec):
    """Model defined by caller-supplied callbacks.

    neg_loglik(theta, x), score(theta, x), hessian(theta, x) and
    sampler(theta, rng) follow the same contracts as the built-in families;
    pointwise(theta, x) and domain(theta) are optional.
    """

    def __init__(
        self,
        dim_param: int,
        dim_obs: int,
        neg_loglik: Callable,
        score: Callable,
        hessian: Callable,
        sampler: Callable,
        pointwise: Optional[Callable] = None,
        domain: Optional[Callable] = None,
    ):
        super().__init__(dim_param, dim_obs)
        self._nll_fn = neg_loglik
        self._score_fn = score
        self._hessian_fn = hessian
        self._sampler_fn = sampler
        self._pointwise_fn = pointwise
        self._domain_fn = domain

    def in_domain(self, theta):
        ok = bool(np.all(np.isfinite(theta)))
        return ok and (self._domain_fn is None or bool(self._domain_fn(theta)))

    def _neg_loglik(self, theta, x):
        return self._nll_fn(theta, x)

    def _score(self, theta, x):
        return self._score_fn(theta, x)

    def _hessian(self, theta, x):
        return np.atleast_2d(self._hessian_fn(theta, x))

    def _sample(self, theta, rng):
        return self._sampler_fn(theta, rng)

    def _pointwise_logdensity(self, theta, x):
        if self._pointwise_fn is None:
            return super()._pointwise_logdensity(theta, x)
        return self._pointwise_fn(theta, x)


DataLike = Union[Sample, np.ndarray, list, tuple]


def as_x(data: DataLike) -> np.ndarray:
    if isinstance(data, Sample):
        return data.x
    return np.asarray(data, dtype=float).reshape(-1)


def neg_loglik(model: ModelSpec, theta, data: DataLike) -> float:
    """-log f(data; theta), additive constants included."""
    return model.neg_loglik(theta, as_x(data))


def score(model: ModelSpec, theta, data: DataLike) -> np.ndarray:
    return model.score(theta, as_x(data))


def hessian(model: ModelSpec, theta, data: DataLike) -> np.ndarray:
    return model.hessian(theta, as_x(data))


def sample_data(model: ModelSpec, theta, rng) -> Sample:
    return Sample(model.sample(theta, rng))
