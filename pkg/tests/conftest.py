import os

import pytest

SLOW_ENV = "SUBOPT_SLOW"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long stochastic acceptance runs (set SUBOPT_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv(SLOW_ENV) == "1":
        return
    skip = pytest.mark.skip(reason=f"slow; set {SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
