import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nnreach import dynamics as dyn
from nnreach import mdp

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("repo")

# acceptance verdict lines, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def mc_table():
    return mdp.value_iteration(mdp.mountain_car_spec())


@pytest.fixture(scope="session")
def mc_robust_table():
    """Policy solved against a worst-case disturbance of 0.3 (used for liveness)."""
    return mdp.value_iteration(mdp.mountain_car_robust_spec(0.3, n_v=101), max_iters=5000, floor=-500.0)


@pytest.fixture(scope="session")
def mc_trained(mc_table):
    arch = [2, 30, 30, 30, 30, 30, 3]
    return mdp.train_network(mc_table, arch, mdp.TrainConfig(epochs=1000, seed=0))


@pytest.fixture(scope="session")
def vcas_table():
    return mdp.value_iteration(mdp.verticalcas_spec(combine="worst", nmac_buffer=100.0))


@pytest.fixture(scope="session")
def vcas_grid():
    return dyn.vcas_reach_grid(200, 48)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
