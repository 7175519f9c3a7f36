import numpy as np
import pytest

from errors import DimensionError, DomainError, KnotError
from penalties import (
    GroupPenalty,
    GroupStructure,
    PenaltySpec,
    active_sets,
    effective_support,
    group_hessian_block,
    kkt_residual,
    penalty_value,
    prox,
    rho_prime,
    rho_second,
)

NONCONVEX = [GroupPenalty.scad(1.0, 3.7), GroupPenalty.mcp(1.0, 3.0), GroupPenalty.scad(0.4, 2.5), GroupPenalty.mcp(2.0, 1.5)]
CONVEX = [GroupPenalty.l1(1.0), GroupPenalty.group_l2(0.7), GroupPenalty.ridge(0.3)]


def spec_of(penalty, d=1):
    groups = GroupStructure.single(d)
    return PenaltySpec.uniform(penalty, groups), groups


def test_penalty_value_examples():
    groups = GroupStructure.singletons(2)
    assert penalty_value(PenaltySpec.uniform(GroupPenalty.l1(1.0), groups), groups, [2.0, -3.0]) == pytest.approx(5.0)
    spec, one = spec_of(GroupPenalty.group_l2(2.0), 2)
    assert penalty_value(spec, one, [3.0, 4.0]) == pytest.approx(10.0)
    spec, one = spec_of(GroupPenalty.scad(1.0, 3.7))
    assert penalty_value(spec, one, [10.0]) == pytest.approx(2.35)
    assert penalty_value(spec, one, [0.0]) == 0.0


def test_penalty_value_dimension_mismatch():
    groups = GroupStructure.singletons(3)
    with pytest.raises(DimensionError):
        penalty_value(PenaltySpec.uniform(GroupPenalty.l1(1.0), groups), groups, [1.0, 2.0])


def test_derivative_examples():
    spec, _ = spec_of(GroupPenalty.mcp(1.0, 3.0))
    assert rho_prime(spec, 0, 2.0) == pytest.approx(1 / 3)
    assert rho_second(spec, 0, 2.0) == pytest.approx(-1 / 3)
    spec, _ = spec_of(GroupPenalty.scad(1.0, 3.7))
    assert rho_prime(spec, 0, 0.5) == pytest.approx(1.0)
    assert rho_prime(spec, 0, 2.0) == pytest.approx(1.7 / 2.7)
    spec, _ = spec_of(GroupPenalty.l1(0.8))
    assert rho_prime(spec, 0, 0.0) == 0.8
    assert rho_second(spec, 0, 3.0) == 0.0


@pytest.mark.parametrize("penalty,knot", [(GroupPenalty.scad(1.0, 3.7), 1.0), (GroupPenalty.scad(1.0, 3.7), 3.7), (GroupPenalty.mcp(1.0, 3.0), 3.0)])
def test_second_derivative_at_knot_raises(penalty, knot):
    spec, _ = spec_of(penalty)
    with pytest.raises(KnotError):
        rho_second(spec, 0, knot)


@pytest.mark.parametrize("penalty", NONCONVEX + CONVEX)
def test_derivatives_consistent_with_value(penalty):
    h = 1e-6
    for t in np.linspace(0.05, 8.0, 60):
        if any(abs(t - k) < 1e-3 for k in penalty.knots):
            continue
        numeric = (penalty.value(t + h) - penalty.value(t - h)) / (2 * h)
        assert penalty.prime(t) == pytest.approx(numeric, abs=1e-6)
        numeric2 = (penalty.prime(t + h) - penalty.prime(t - h)) / (2 * h)
        assert penalty.second(t) == pytest.approx(numeric2, abs=1e-5)


@pytest.mark.parametrize("penalty", NONCONVEX + CONVEX)
def test_rho_nonnegative_derivative_and_monotone(penalty):
    rng = np.random.default_rng(5)
    for _ in range(200):
        s, t = np.sort(rng.uniform(0, 10, size=2))
        assert penalty.prime(s) >= 0
        assert penalty.value(s) <= penalty.value(t) + 1e-12


def test_nonconvex_match_l1_below_lambda():
    for penalty in (GroupPenalty.scad(1.5), GroupPenalty.mcp(1.5)):
        assert penalty.prime(0.0) == pytest.approx(1.5)
    assert GroupPenalty.scad(1.5).prime(1.2) == pytest.approx(1.5)


def test_prox_examples():
    spec, _ = spec_of(GroupPenalty.l1(1.0))
    np.testing.assert_allclose(prox(spec, 0, np.array([3.0]), 1.0), [2.0])
    spec, _ = spec_of(GroupPenalty.group_l2(2.5), 2)
    np.testing.assert_allclose(prox(spec, 0, np.array([3.0, 4.0]), 1.0), [1.5, 2.0])
    spec, _ = spec_of(GroupPenalty.mcp(1.0, 3.0))
    np.testing.assert_allclose(prox(spec, 0, np.array([10.0]), 1.0), [10.0])
    np.testing.assert_allclose(prox(spec, 0, np.array([-0.5]), 1.0), [0.0])


def test_prox_beats_grid_search():
    rng = np.random.default_rng(2024)
    kinds = NONCONVEX + CONVEX
    grid = np.linspace(0.0, 12.0, 10_001)
    for _ in range(500):
        penalty = kinds[rng.integers(len(kinds))]
        t = rng.uniform(0.0, 10.0)
        step = rng.uniform(0.05, 3.0)
        r = penalty.prox_radius(t, step)
        best = 0.5 * (r - t) ** 2 + step * penalty.value(r)
        candidates = 0.5 * (grid - t) ** 2 + step * np.array([penalty.value(g) for g in grid])
        assert best - candidates.min() <= 1e-9


@pytest.mark.parametrize("penalty", CONVEX)
def test_convex_prox_is_nonexpansive(penalty):
    rng = np.random.default_rng(9)
    spec, _ = spec_of(penalty, 3)
    for _ in range(200):
        u, v = rng.standard_normal(3) * 3, rng.standard_normal(3) * 3
        diff = np.linalg.norm(prox(spec, 0, u, 0.7) - prox(spec, 0, v, 0.7))
        assert diff <= np.linalg.norm(u - v) + 1e-12


def test_active_sets_examples():
    groups = GroupStructure.singletons(3)
    empty = active_sets(groups, np.zeros(3), 1e-8)
    assert empty.A == () and empty.S.size == 0
    assert active_sets(groups, [0.0, 1e-12, 5.0], 1e-10).A == (2,)
    paired = GroupStructure.contiguous(4, 2)
    sets = active_sets(paired, [0.0, 0.0, 1.0, 0.0], 0.0)
    assert sets.A == (1,)
    assert sets.S.tolist() == [2, 3]


def test_effective_support_always_includes_smooth_groups():
    groups = GroupStructure.singletons(3)
    spec = PenaltySpec((GroupPenalty.none(), GroupPenalty.l1(1.0), GroupPenalty.ridge(0.5)))
    sets = effective_support(spec, groups, [0.0, 0.0, 0.0])
    assert sets.A == (0, 2)


def test_group_structure_must_partition():
    with pytest.raises(DimensionError):
        GroupStructure((np.array([0, 1]), np.array([1, 2])))
    with pytest.raises(DimensionError):
        GroupStructure((np.array([0]), np.array([2])))


def test_invalid_parameters_rejected():
    with pytest.raises(DomainError):
        GroupPenalty.scad(1.0, a=2.0)
    with pytest.raises(DomainError):
        GroupPenalty.mcp(1.0, gamma=1.0)
    with pytest.raises(DomainError):
        GroupPenalty.l1(0.0)


def test_group_hessian_block_for_group_l2():
    spec, _ = spec_of(GroupPenalty.group_l2(2.0), 2)
    theta = np.array([3.0, 4.0])
    u = theta / 5.0
    expected = 2.0 * (np.eye(2) - np.outer(u, u)) / 5.0
    np.testing.assert_allclose(group_hessian_block(spec, 0, theta), expected)


def test_kkt_residual_inactive_group_excess():
    groups = GroupStructure.singletons(2)
    spec = PenaltySpec.uniform(GroupPenalty.l1(1.0), groups)
    assert kkt_residual(spec, groups, [0.5, -1.0], [0.0, 2.0]) == pytest.approx(0.0)
    assert kkt_residual(spec, groups, [1.5, -1.0], [0.0, 2.0]) == pytest.approx(0.5)
