import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("covmpc", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("covmpc")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_results():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
