import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from seir_mpc.model import ModelParams

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

X0_STUDY = np.array([0.5, 0.18, 0.01])


@pytest.fixture
def p():
    return ModelParams()


@pytest.fixture
def x0():
    return X0_STUDY.copy()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
