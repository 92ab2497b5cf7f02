import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from polyflow_mpc.dynamics import demo_block_system, pest_model
from polyflow_mpc.lifting import RankDeficientWarning, assemble_polyflow_model, fit_polyflow, jacobian_model
from polyflow_mpc.lifting import sample_states
from polyflow_mpc.lincontrol import ConstraintSpec, Polytope, pest_constraints
from polyflow_mpc.mpc import design_mpc

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow])
settings.load_profile("repo")

PEST_X0 = np.array([0.1488, -0.1319])

# acceptance lines collected during the session and echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def pest():
    return pest_model()


@pytest.fixture(scope="session")
def pest_cons():
    return pest_constraints()


@pytest.fixture(scope="session")
def pest_samples(pest_cons):
    return sample_states(pest_cons, 100_000, 7)


@pytest.fixture(scope="session")
def pest_fit(pest, pest_samples):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        return fit_polyflow(pest, pest_samples, 5)


@pytest.fixture(scope="session")
def pest_lift(pest, pest_fit, pest_samples):
    return assemble_polyflow_model(pest, pest_fit, pest_samples, 1e-10)


@pytest.fixture(scope="session")
def pest_spec(pest_lift, pest_cons):
    return design_mpc(pest_lift, pest_cons, 10)


@pytest.fixture(scope="session")
def pest_jac_spec(pest, pest_cons):
    return design_mpc(jacobian_model(pest), pest_cons, 10)


@pytest.fixture(scope="session")
def block():
    return demo_block_system()


@pytest.fixture(scope="session")
def block_cons():
    return ConstraintSpec(Polytope.from_box(-np.ones(4), np.ones(4)), Polytope.from_box([-1.0], [1.0]))


@pytest.fixture(scope="session")
def block_samples(block_cons):
    return sample_states(block_cons, 2000, 1)


@pytest.fixture(scope="session")
def block_lift(block, block_samples):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        fit = fit_polyflow(block, block_samples, 2)
    return assemble_polyflow_model(block, fit, block_samples, 1e-10)


@pytest.fixture(scope="session")
def block_spec(block_lift, block_cons):
    return design_mpc(block_lift, block_cons, 10)
