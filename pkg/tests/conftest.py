import time

import numpy as np
import pytest

from nnsg.fixture import fixture_basis
from nnsg.morphable import synthetic_basis

ACCEPTANCE_KEY = pytest.StashKey[list]()


SESSION_START = time.perf_counter()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []
    config.addinivalue_line("markers", "run_last: schedule after every other test")


def pytest_collection_modifyitems(session, config, items):
    # stable partition: marked tests move to the end in their original order
    items.sort(key=lambda item: item.get_closest_marker("run_last") is not None)


def seconds_since_start():
    return time.perf_counter() - SESSION_START


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE_KEY]


@pytest.fixture(scope="session")
def tiny_basis():
    """8-vertex synthetic basis (2x4 grid)."""
    return synthetic_basis(2, 4, seed=7)


@pytest.fixture(scope="session")
def face_basis():
    return fixture_basis(0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def session_elapsed():
    """Seconds since the test session started."""
    return seconds_since_start
