import sys

import numpy as np
import pytest

from deacomp import curves, ivp, physics


@pytest.fixture(scope="session")
def defaults():
    return physics.default_params()


@pytest.fixture(scope="session")
def reference():
    return physics.reference_params()


@pytest.fixture(scope="session")
def ref_pair(reference):
    """Reference-tolerance curves for the evaluation parameters, to 12 kV."""
    return ivp.solve_curves(reference, ivp.REFERENCE_TOL, 12000.0)


@pytest.fixture(scope="session")
def default_pair(defaults):
    return ivp.solve_curves(defaults, ivp.REFERENCE_TOL, 8000.0)


@pytest.fixture(scope="session")
def f_ref(ref_pair):
    return curves.DeformationModel.dense(ref_pair.forward)


@pytest.fixture(scope="session")
def calib(f_ref):
    return curves.calibrate(f_ref, 1000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n:>2}: NOT RUN"))
