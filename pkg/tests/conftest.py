import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cdlab.grid import build_grid

settings.register_profile(
    "cdlab", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("cdlab")


@pytest.fixture(scope="session")
def grid17():
    return build_grid(2, 17, 16, 1.5)


@pytest.fixture(scope="session")
def grid33():
    return build_grid(2, 33, 64, 1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
