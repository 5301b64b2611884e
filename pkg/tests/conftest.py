import numpy as np
import pytest

from expandpt import numcore as nc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with nc.precision("float64"):
        yield


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running trend experiments")
