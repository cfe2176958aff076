import chex
import pytest

import jfom  # noqa: F401  enables float64 before any test builds arrays
from tests import helpers


def pytest_runtest_setup(item):
    chex.clear_trace_counter()


@pytest.fixture
def lqr1d():
    return helpers.lqr(1, state_radius=2.0)


@pytest.fixture
def lqr2d():
    return helpers.lqr(2, state_radius=2.0)


@pytest.fixture
def plan():
    return helpers.small_plan()
