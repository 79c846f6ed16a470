import numpy as np
import pytest

from spinconv.geometry import AtomicSystem
from spinconv.model import ENERGY_CENTRIC, FORCE_CENTRIC, ModelConfig, SpinConvNet

# filled by test_acceptance.py; printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(m=4, k=2, d=8, b=2, n_lat=6, n_lon=8, n_basis=16, variant=ENERGY_CENTRIC)


@pytest.fixture(scope="session")
def energy_net(small_config):
    return SpinConvNet(small_config)


@pytest.fixture(scope="session")
def force_net(small_config):
    from dataclasses import replace

    return SpinConvNet(replace(small_config, variant=FORCE_CENTRIC, rotation_samples=2))


@pytest.fixture
def cluster():
    pos = np.array(
        [[0.0, 0.0, 0.0], [1.3, 0.2, -0.1], [-0.4, 1.2, 0.5], [0.3, -0.6, 1.4], [-1.1, -0.7, -0.6]]
    )
    return AtomicSystem(pos, [1, 6, 1, 6, 6])


@pytest.fixture(scope="session")
def lj_dataset():
    """The seeded 2000-structure dataset (4-10 atoms, H and C) and its generation time."""
    import time

    from spinconv.data import generate_dataset

    start = time.perf_counter()
    records = generate_dataset(2000, atoms_range=(4, 10), species=(1, 6), seed=0)
    return records, time.perf_counter() - start
