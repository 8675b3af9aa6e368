import numpy as np
import pytest

from jumpfield.drivers import TimeGrid
from jumpfield.oracle import BenchmarkFamily


@pytest.fixture
def spec_A():
    return BenchmarkFamily("A").spec()


@pytest.fixture
def spec_B():
    return BenchmarkFamily("B").spec()


@pytest.fixture
def spec_C():
    return BenchmarkFamily("C").spec()


@pytest.fixture
def grid10():
    return TimeGrid(0.0, 0.25, 10)


@pytest.fixture
def delta0():
    return np.zeros((1, 1))
