import numpy as np
import pytest

from tempest.schema import NetConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training and BO runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end check")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net_cfg():
    return NetConfig(depth=2, channels=8, skip_channels=2, in_channels=4, heteroscedastic=True)


@pytest.fixture
def tiny_net_cfg():
    return NetConfig(depth=2, channels=2, skip_channels=1, in_channels=2, heteroscedastic=False)
