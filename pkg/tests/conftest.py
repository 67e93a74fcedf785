import numpy as np
import pytest

from ksi import GaussianTarget, Schedule


@pytest.fixture
def trig():
    return Schedule.trig()


@pytest.fixture
def linear():
    return Schedule.linear()


@pytest.fixture
def gauss2d():
    return GaussianTarget(np.array([1.0, -1.0]), np.array([[1.0, 0.3], [0.3, 0.5]]))


def rng(seed=0):
    return np.random.default_rng(seed)
