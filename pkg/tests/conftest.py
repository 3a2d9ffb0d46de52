import numpy as np
import pytest

from cogrelay.model import PuActivityModel, Topology, make_linear_route


@pytest.fixture(scope="session")
def bench_route():
    """The 6-node line used by the sweep-style tests: endpoints 5 apart,
    interior relays placed by a fixed seed."""
    return make_linear_route(6, 5.0, placement_seed=7)


@pytest.fixture(scope="session")
def bench_topology(bench_route):
    return Topology.from_positions(bench_route, alpha=2.0)


@pytest.fixture(scope="session")
def bench_activity():
    return PuActivityModel(p_avail=0.85)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
