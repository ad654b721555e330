import numpy as np
import pytest

from tracefuse import autograd as ag


@pytest.fixture
def f64():
    with ag.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    return ag.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)
