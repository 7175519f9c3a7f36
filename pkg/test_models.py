import numpy as np
import pytest

from errors import DimensionError, DomainError
from models import (
    LOG_2PI,
    BehrensFisherModel,
    CustomModel,
    GaussianLinearModel,
    Sample,
    hessian,
    neg_loglik,
    sample_data,
    score,
)


def numeric_grad(f, theta, eps=1e-6):
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        grad[i] = (f(theta + step) - f(theta - step)) / (2 * eps)
    return grad


def numeric_jacobian(f, theta, eps=1e-6):
    return np.column_stack([numeric_grad(lambda t, i=i: f(t)[i], theta, eps) for i in range(theta.size)]).T


def test_gaussian_linear_nll_examples(scalar_model):
    assert neg_loglik(scalar_model, [0.0], [0.0]) == pytest.approx(0.5 * LOG_2PI)
    assert neg_loglik(scalar_model, [0.0], [2.0]) - 0.5 * LOG_2PI == pytest.approx(2.0)


def test_gaussian_linear_score_and_hessian(scalar_model):
    np.testing.assert_allclose(score(scalar_model, [0.0], Sample([2.0])), [-2.0])
    model = GaussianLinearModel([[2.0]], 1.0)
    np.testing.assert_allclose(hessian(model, [0.3], [1.0]), [[4.0]])


def test_behrens_fisher_examples(bf_example):
    model, theta, x = bf_example
    assert neg_loglik(model, theta, x) - 1.5 * LOG_2PI == pytest.approx(3.0)
    np.testing.assert_allclose(score(model, theta, x), [-2.0, 0.0, -1.5], atol=1e-12)
    hess = hessian(model, np.array([0.2, 0.5, 4.0]), x)
    assert hess[0, 0] == pytest.approx(2 / 0.5 + 1 / 4.0)


@pytest.mark.parametrize("kind", ["gaussian-linear", "behrens-fisher"])
def test_score_and_hessian_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    for _ in range(100):
        if kind == "gaussian-linear":
            model = GaussianLinearModel(rng.standard_normal((6, 3)), 0.5 + rng.uniform())
            theta = rng.standard_normal(3)
        else:
            model = BehrensFisherModel(4, 5)
            theta = np.array([rng.standard_normal(), 0.5 + rng.uniform(), 0.5 + rng.uniform()])
        x = model.sample(theta, rng)
        g = model.score(theta, x)
        g_num = numeric_grad(lambda t: model.neg_loglik(t, x), theta)
        np.testing.assert_allclose(g, g_num, rtol=1e-6, atol=1e-6 * (1 + np.abs(g).max()))
        h = model.hessian(theta, x)
        h_num = numeric_jacobian(lambda t: model.score(t, x), theta)
        np.testing.assert_allclose(h, h_num, rtol=1e-5, atol=1e-5 * (1 + np.abs(h).max()))


def test_score_vanishes_at_stationary_point():
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((10, 2))
    x = rng.standard_normal(10)
    model = GaussianLinearModel(Z, 1.0)
    theta = np.linalg.lstsq(Z, x, rcond=None)[0]
    np.testing.assert_allclose(model.score(theta, x), 0.0, atol=1e-8)


def test_gaussian_linear_hessian_rank():
    Z = np.array([[1.0, 2.0], [2.0, 4.0], [0.5, 1.0]])
    eig = np.linalg.eigvalsh(GaussianLinearModel(Z).hessian(np.zeros(2), np.zeros(3)))
    assert eig.min() == pytest.approx(0.0, abs=1e-10)
    assert eig.min() >= -1e-10


def test_behrens_fisher_permutation_invariance(rng):
    model = BehrensFisherModel(5, 4)
    theta = np.array([0.3, 1.2, 0.7])
    x = model.sample(theta, rng)
    shuffled = np.concatenate([rng.permutation(x[:5]), rng.permutation(x[5:])])
    assert model.neg_loglik(theta, shuffled) == pytest.approx(model.neg_loglik(theta, x))


def test_domain_errors(rng):
    with pytest.raises(DomainError):
        sample_data(BehrensFisherModel(3, 3), [0.0, 0.0, 0.0], rng)
    with pytest.raises(DomainError):
        GaussianLinearModel([[1.0]], nu=0.0)
    with pytest.raises(DomainError):
        neg_loglik(BehrensFisherModel(1, 1), [0.0, -1.0, 1.0], [0.0, 0.0])
    with pytest.raises(DimensionError):
        neg_loglik(GaussianLinearModel(np.ones((2, 1))), [0.0], [1.0, 2.0, 3.0])


def test_sample_data_is_deterministic_and_centered():
    model = GaussianLinearModel(np.ones((100_000, 1)), 1.0)
    a = sample_data(model, [1.0], np.random.default_rng(11))
    b = sample_data(model, [1.0], np.random.default_rng(11))
    np.testing.assert_array_equal(a.x, b.x)
    assert abs(a.x.mean() - 1.0) <= 4.0 / np.sqrt(a.n)


def test_behrens_fisher_subset_keeps_group_sizes():
    model = BehrensFisherModel(4, 3)
    sub = model.subset([0, 2, 4, 5, 6])
    assert (sub.n0, sub.n1) == (2, 3)
    assert model.trimmable.tolist() == [True] * 4 + [False] * 3


def test_custom_model_callbacks(rng):
    model = CustomModel(
        1,
        3,
        neg_loglik=lambda t, x: 0.5 * float(np.sum((x - t[0]) ** 2)),
        score=lambda t, x: np.array([float(np.sum(t[0] - x))]),
        hessian=lambda t, x: np.array([[3.0]]),
        sampler=lambda t, r: t[0] + r.standard_normal(3),
        domain=lambda t: t[0] > -5,
    )
    x = np.array([1.0, 2.0, 3.0])
    assert model.neg_loglik([2.0], x) == pytest.approx(1.0)
    np.testing.assert_allclose(model.score([2.0], x), [0.0])
    assert model.sample([0.0], rng).shape == (3,)
    with pytest.raises(DomainError):
        model.neg_loglik([-6.0], x)
