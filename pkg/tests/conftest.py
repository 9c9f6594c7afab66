import numpy as np
import pytest

from vlasovkam.core import free_potential, make_forced_pendulum
from vlasovkam.instability import prepare_class


@pytest.fixture(scope="session")
def pendulum():
    return make_forced_pendulum(1.0, 0.5, 2.0)


@pytest.fixture(scope="session")
def free():
    return free_potential()


@pytest.fixture(scope="session")
def pendulum_c0(pendulum):
    """Transition cost, fixed point and Mather samples at c = 0 (grid 64, dt 0.02)."""
    return prepare_class(pendulum, 0.0, 64, 0.02)


@pytest.fixture(scope="session")
def free_classes(free):
    return {c: prepare_class(free, c, 64, 0.02) for c in (0.0, 0.25, 0.5, 0.75, 1.0)}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
