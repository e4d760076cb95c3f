import numpy as np
import pytest

from nodal_lab.config import get_settings
from nodal_lab.covariance.factory import build_model
from nodal_lab.geometry import make_domain


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run acceptance-scale tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def settings():
    return get_settings()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def torus():
    return make_domain("FlatTorus", 2, [1.0, 1.0], 64)


@pytest.fixture
def square():
    """[-1, 1]^2 with boundary."""
    return make_domain("Rectangle", 2, [2.0, 2.0], 128, [-1.0, -1.0])


@pytest.fixture
def sphere():
    return make_domain("Sphere2", 2, None, 5)


@pytest.fixture
def arithmetic_wave(torus):
    domain, _ = torus
    return build_model("ArithmeticWave", {"n": 1}, domain)


@pytest.fixture
def linear_field(sphere):
    domain, _ = sphere
    return build_model("LinearField", {}, domain)
