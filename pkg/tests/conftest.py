import numpy as np
import pytest

from mtmse.graph import CommGraph, build_info_structure, build_local_observation_model
from mtmse.model import LinearSystem
from mtmse.scenario import platoon_scenario, two_agent_scenario, uav_scenario


def random_spd(rng, d, floor=0.1):
    G = rng.standard_normal((d, d))
    return G @ G.T + floor * np.eye(d)


def random_stable_system(rng, n, dx, dys, radius=0.9):
    A = rng.standard_normal((dx, dx))
    A *= radius / max(1e-9, np.abs(np.linalg.eigvals(A)).max())
    C = [rng.standard_normal((d, dx)) for d in dys]
    R = [random_spd(rng, d) for d in dys]
    return LinearSystem(A, C, random_spd(rng, dx), R, random_spd(rng, dx))


def random_strong_digraph(rng, n, max_delay=3, p=0.3):
    """A random strongly connected digraph: a random Hamiltonian cycle plus extra edges."""
    order = rng.permutation(n)
    edges = {}
    for a, b in zip(order, np.roll(order, -1)):
        edges[(int(a), int(b))] = int(rng.integers(1, max_delay + 1))
    for i in range(n):
        for j in range(n):
            if i != j and (i, j) not in edges and rng.random() < p:
                edges[(i, j)] = int(rng.integers(1, max_delay + 1))
    return CommGraph(n, edges)


def structures(scenario):
    info = build_info_structure(scenario.graph)
    return info, build_local_observation_model(info, scenario.system)


@pytest.fixture
def two_agent():
    return two_agent_scenario(1.0, 4.0)


@pytest.fixture(scope="session")
def uav():
    return uav_scenario(4, 10.0, 100)


@pytest.fixture(scope="session")
def platoon():
    return platoon_scenario(1.0, 100)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
