import numpy as np
import pytest

from hetspec.conservative import solve_p1
from hetspec.model import build_efficiency_table
from hetspec.scenario import generate_topology


@pytest.fixture(scope="session")
def small():
    """Two APs, three groups: big enough for interference, small enough to solve in seconds."""
    return generate_topology(3, n_aps=2, k_groups=3, lam_range=(2.0, 6.0))


@pytest.fixture(scope="session")
def small_table(small):
    return build_efficiency_table(small)


@pytest.fixture(scope="session")
def small_p1(small, small_table):
    return solve_p1(small, small_table)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_p2(small, small_table):
    from hetspec.utilization import solve_p2
    return solve_p2(small, small_table)
