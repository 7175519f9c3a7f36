import numpy as np
import pytest

from models import BehrensFisherModel, GaussianLinearModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scalar_model():
    return GaussianLinearModel(np.array([[1.0]]), 1.0)


@pytest.fixture
def bf_example():
    """theta=(0,1,1), X0=(1,-1), X1=(2)."""
    return BehrensFisherModel(2, 1), np.array([0.0, 1.0, 1.0]), np.array([1.0, -1.0, 2.0])


@pytest.fixture
def random_design(rng):
    def make(n, d):
        return rng.standard_normal((n, d))

    return make
