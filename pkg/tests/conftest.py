import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from tendonfit.constitutive import ModelParams

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def model_params(draw, min_width=1e-3):
    a = draw(st.floats(1.001, 1.1))
    w = draw(st.floats(min_width, 0.1))
    ncm = draw(st.floats(0.01, 50.0))
    fib = draw(st.floats(10.0, 5000.0))
    return ModelParams(ncm, fib, a, a + w)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def typical_params():
    return ModelParams(2.8665, 931.36, 1.022352, 1.049725)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
