"""Group-wise penalties sum_j rho_j(||theta_Gj||) and their exact proximal maps."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import DimensionError, DomainError, KnotError

logger = logging.getLogger(__name__)

PENALTY_KINDS = ("none", "ridge", "l1", "group-l2", "scad", "mcp")
SMOOTH_KINDS = ("none", "ridge")

# ties between prox candidates closer than this are resolved toward larger radius
PROX_TIE_TOL = 1e-12


@dataclass(frozen=True)
class GroupPenalty:
    """One scalar penalty rho applied to the Euclidean norm of a group.

    ridge uses tau and contributes tau * t^2 to the smooth part of the
    objective; every other kind uses lam.
    """

    kind: str = "none"
    lam: float = 0.0
    tau: float = 0.0
    a: float = 3.7
    gamma: float = 3.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise DomainError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "ridge" and self.tau <= 0:
            raise DomainError(f"ridge needs tau > 0, got {self.tau}")
        if self.kind in ("l1", "group-l2", "scad", "mcp") and self.lam <= 0:
            raise DomainError(f"{self.kind} needs lam > 0, got {self.lam}")
        if self.kind == "scad" and self.a <= 2:
            raise DomainError(f"scad needs a > 2, got {self.a}")
        if self.kind == "mcp" and self.gamma <= 1:
            raise DomainError(f"mcp needs gamma > 1, got {self.gamma}")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def ridge(cls, tau):
        return cls("ridge", tau=tau)

    @classmethod
    def l1(cls, lam):
        return cls("l1", lam=lam)

    @classmethod
    def group_l2(cls, lam):
        return cls("group-l2", lam=lam)

    @classmethod
    def scad(cls, lam, a=3.7):
        return cls("scad", lam=lam, a=a)

    @classmethod
    def mcp(cls, lam, gamma=3.0):
        return cls("mcp", lam=lam, gamma=gamma)

    @property
    def smooth(self) -> bool:
        return self.kind in SMOOTH_KINDS

    @property
    def knots(self) -> Tuple[float, ...]:
        if self.kind == "scad":
            return (self.lam, self.a * self.lam)
        if self.kind == "mcp":
            return (self.gamma * self.lam,)
        return ()

    def value(self, t: float) -> float:
        lam = self.lam
        if self.kind == "none":
            return 0.0
        if self.kind == "ridge":
            return self.tau * t * t
        if self.kind in ("l1", "group-l2"):
            return lam * t
        if self.kind == "scad":
            if t <= lam:
                return lam * t
            if t <= self.a * lam:
                return (2.0 * self.a * lam * t - t * t - lam * lam) / (2.0 * (self.a - 1.0))
            return (self.a + 1.0) * lam * lam / 2.0
        # mcp
        if t <= self.gamma * lam:
            return lam * t - t * t / (2.0 * self.gamma)
        return self.gamma * lam * lam / 2.0

    def prime(self, t: float) -> float:
        """rho'(t) for t >= 0, the right limit at zero."""
        if t < 0:
            raise DomainError(f"rho' is defined for t >= 0, got {t}")
        lam = self.lam
        if self.kind == "none":
            return 0.0
        if self.kind == "ridge":
            return 2.0 * self.tau * t
        if self.kind in ("l1", "group-l2"):
            return lam
        if self.kind == "scad":
            if t <= lam:
                return lam
            return max(self.a * lam - t, 0.0) / (self.a - 1.0)
        return max(lam - t / self.gamma, 0.0)

    def second(self, t: float) -> float:
        """rho''(t) for t > 0 away from the knots."""
        if t <= 0:
            raise DomainError(f"rho'' is defined for t > 0, got {t}")
        for knot in self.knots:
            if abs(t - knot) <= PROX_TIE_TOL * max(1.0, knot):
                raise KnotError(f"{self.kind} has no second derivative at t={t}")
        if self.kind == "ridge":
            return 2.0 * self.tau
        if self.kind == "scad":
            return -1.0 / (self.a - 1.0) if self.lam < t < self.a * self.lam else 0.0
        if self.kind == "mcp":
            return -1.0 / self.gamma if t < self.gamma * self.lam else 0.0
        return 0.0

    def prox_radius(self, t: float, step: float) -> float:
        """argmin_{r >= 0} (r - t)^2 / 2 + step * rho(r) for t >= 0."""
        lam = self.lam
        if self.kind == "none":
            return t
        if self.kind == "ridge":
            return t / (1.0 + 2.0 * step * self.tau)
        if self.kind in ("l1", "group-l2"):
            return max(t - step * lam, 0.0)
        if self.kind == "scad":
            a = self.a
            candidates = [0.0, min(max(t - step * lam, 0.0), lam), lam, a * lam, max(t, a * lam)]
            # a concave middle piece (denom <= 0) has its minimum on an endpoint
            denom = 1.0 - step / (a - 1.0)
            if denom > 0:
                r = (t - step * a * lam / (a - 1.0)) / denom
                candidates.append(min(max(r, lam), a * lam))
        else:
            g = self.gamma
            candidates = [0.0, g * lam, max(t, g * lam)]
            denom = 1.0 - step / g
            if denom > 0:
                r = (t - step * lam) / denom
                candidates.append(min(max(r, 0.0), g * lam))
        objective = [0.5 * (r - t) ** 2 + step * self.value(r) for r in candidates]
        best = min(objective)
        return max(r for r, f in zip(candidates, objective) if f <= best + PROX_TIE_TOL)


@dataclass(frozen=True)
class GroupStructure:
    """Ordered partition of the coordinates {0, ..., d-1} into groups."""

    groups: Tuple[np.ndarray, ...]

    def __post_init__(self):
        groups = tuple(np.asarray(g, dtype=int).reshape(-1) for g in self.groups)
        if not groups or any(g.size == 0 for g in groups):
            raise DimensionError("groups must be a nonempty list of nonempty index sets")
        flat = np.concatenate(groups)
        if np.unique(flat).size != flat.size or not np.array_equal(np.sort(flat), np.arange(flat.size)):
            raise DimensionError("groups must partition the coordinates 0..d-1")
        object.__setattr__(self, "groups", groups)

    @classmethod
    def singletons(cls, d: int) -> "GroupStructure":
        return cls(tuple(np.array([j]) for j in range(d)))

    @classmethod
    def contiguous(cls, d: int, size: int) -> "GroupStructure":
        return cls(tuple(np.arange(start, min(start + size, d)) for start in range(0, d, size)))

    @classmethod
    def single(cls, d: int) -> "GroupStructure":
        return cls((np.arange(d),))

    @property
    def d(self) -> int:
        return int(sum(g.size for g in self.groups))

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, j):
        return self.groups[j]


@dataclass(frozen=True)
class PenaltySpec:
    """Per-group penalty kinds, aligned with a GroupStructure."""

    per_group: Tuple[GroupPenalty, ...]

    @classmethod
    def uniform(cls, penalty: GroupPenalty, groups: GroupStructure) -> "PenaltySpec":
        return cls(tuple(penalty for _ in range(len(groups))))

    @classmethod
    def unpenalized(cls, groups: GroupStructure) -> "PenaltySpec":
        return cls.uniform(GroupPenalty.none(), groups)

    def __len__(self):
        return len(self.per_group)

    def __getitem__(self, j) -> GroupPenalty:
        return self.per_group[j]

    @property
    def smooth_only(self) -> bool:
        return all(p.smooth for p in self.per_group)


@dataclass(frozen=True)
class ActiveSets:
    A: Tuple[int, ...]
    S: np.ndarray


def _check(spec: PenaltySpec, groups: GroupStructure, theta=None) -> Optional[np.ndarray]:
    if len(spec) != len(groups):
        raise DimensionError(f"{len(spec)} penalties for {len(groups)} groups")
    if theta is None:
        return None
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != groups.d:
        raise DimensionError(f"theta has length {theta.size}, groups cover {groups.d} coordinates")
    return theta


def penalty_value(spec: PenaltySpec, groups: GroupStructure, theta) -> float:
    """Total penalty, smooth ridge terms included."""
    theta = _check(spec, groups, theta)
    return float(sum(p.value(np.linalg.norm(theta[g])) for p, g in zip(spec.per_group, groups)))


def nonsmooth_value(spec: PenaltySpec, groups: GroupStructure, theta) -> float:
    theta = _check(spec, groups, theta)
    return float(
        sum(p.value(np.linalg.norm(theta[g])) for p, g in zip(spec.per_group, groups) if not p.smooth)
    )


def smooth_value(spec: PenaltySpec, groups: GroupStructure, theta) -> float:
    """R(theta): the ridge part of the penalty."""
    theta = _check(spec, groups, theta)
    return float(sum(p.value(np.linalg.norm(theta[g])) for p, g in zip(spec.per_group, groups) if p.smooth))


def smooth_gradient(spec: PenaltySpec, groups: GroupStructure, theta) -> np.ndarray:
    theta = _check(spec, groups, theta)
    grad = np.zeros_like(theta)
    for p, g in zip(spec.per_group, groups):
        if p.kind == "ridge":
            grad[g] = 2.0 * p.tau * theta[g]
    return grad


def smooth_hessian(spec: PenaltySpec, groups: GroupStructure, d: int) -> np.ndarray:
    _check(spec, groups)
    diag = np.zeros(d)
    for p, g in zip(spec.per_group, groups):
        if p.kind == "ridge":
            diag[g] = 2.0 * p.tau
    return np.diag(diag)


def rho_prime(spec: PenaltySpec, j: int, t: float) -> float:
    return spec[j].prime(float(t))


def rho_second(spec: PenaltySpec, j: int, t: float) -> float:
    return spec[j].second(float(t))


def prox(spec: PenaltySpec, j: int, v, step: float) -> np.ndarray:
    """argmin_u ||u - v||^2 / 2 + step * rho_j(||u||), computed on the group norm."""
    if step <= 0:
        raise DomainError(f"prox step must be positive, got {step}")
    v = np.asarray(v, dtype=float)
    t = float(np.linalg.norm(v))
    r = spec[j].prox_radius(t, step)
    if t == 0.0:
        return np.zeros_like(v)
    return v * (r / t)


def prox_all(spec: PenaltySpec, groups: GroupStructure, v, step: float) -> np.ndarray:
    """Group-separable prox of the nonsmooth part; smooth groups pass through."""
    out = np.array(v, dtype=float, copy=True)
    for j, g in enumerate(groups):
        if not spec[j].smooth:
            out[g] = prox(spec, j, out[g], step)
    return out


def active_sets(groups: GroupStructure, theta, tol: float = 1e-8) -> ActiveSets:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    A = tuple(j for j, g in enumerate(groups) if np.linalg.norm(theta[g]) > tol)
    S = np.sort(np.concatenate([groups[j] for j in A])) if A else np.array([], dtype=int)
    return ActiveSets(A, S)


def effective_support(spec: PenaltySpec, groups: GroupStructure, theta, tol: float = 1e-8) -> ActiveSets:
    """Active groups plus every smooth-only group, which is never sparsified."""
    theta = _check(spec, groups, theta)
    A = tuple(
        j for j, g in enumerate(groups) if spec[j].smooth or np.linalg.norm(theta[g]) > tol
    )
    S = np.sort(np.concatenate([groups[j] for j in A])) if A else np.array([], dtype=int)
    return ActiveSets(A, S)


def group_hessian_block(spec: PenaltySpec, j: int, theta_g) -> np.ndarray:
    """Hessian of rho_j(||u||) at an active group value u = theta_g."""
    theta_g = np.asarray(theta_g, dtype=float)
    t = float(np.linalg.norm(theta_g))
    if t == 0.0:
        raise DomainError("group Hessian block needs a nonzero group")
    u = theta_g / t
    eye = np.eye(theta_g.size)
    return spec[j].prime(t) * (eye - np.outer(u, u)) / t + spec[j].second(t) * np.outer(u, u)


def kkt_residual(spec: PenaltySpec, groups: GroupStructure, grad, theta) -> float:
    """Norm of the first-order residual of smooth gradient plus group subgradients.

    Inactive nonsmooth groups contribute the excess of ||grad_G|| over rho'(0).
    """
    theta = _check(spec, groups, theta)
    grad = np.asarray(grad, dtype=float)
    total = 0.0
    for j, g in enumerate(groups):
        p = spec[j]
        if p.smooth:
            total += float(grad[g] @ grad[g])
            continue
        t = float(np.linalg.norm(theta[g]))
        if t > 0.0:
            r = grad[g] + p.prime(t) * theta[g] / t
            total += float(r @ r)
        else:
            total += max(float(np.linalg.norm(grad[g])) - p.prime(0.0), 0.0) ** 2
    return float(np.sqrt(total))


def at_knot(spec: PenaltySpec, j: int, t: float) -> bool:
    return any(abs(t - knot) <= PROX_TIE_TOL * max(1.0, knot) for knot in spec[j].knots)
