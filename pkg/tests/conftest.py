import numpy as np
import pytest
from hypothesis import settings

from dmdbench.experiment import Experiment, builtin_config
from dmdbench.latency import EdgeLatencySpec, LatencyOracle, NoiseSpec
from dmdbench.network import Network

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

DIAMOND_EDGES = [("s", "a"), ("a", "t"), ("s", "b"), ("b", "t")]
BRAESS_EDGES = [("s", "a"), ("s", "b"), ("a", "t"), ("b", "t"), ("a", "b")]


def diamond_network(demand=1.0) -> Network:
    E = DIAMOND_EDGES
    return Network.from_lists("sabt", E, [("s", "t")], [[[E[0], E[1]], [E[2], E[3]]]], [demand])


def braess_network() -> Network:
    E = BRAESS_EDGES
    return Network.from_lists("sabt", E, [("s", "t")], [[[E[0], E[2]], [E[1], E[3]], [E[0], E[4], E[3]]]], [1.0])


def single_edge_network() -> Network:
    return Network.from_lists("st", [("s", "t")], [("s", "t")], [[[("s", "t")]]], [1.0])


def two_od_network() -> Network:
    """Two OD pairs sharing edge a->b, demands 1 and 2."""
    E = [("s", "a"), ("a", "b"), ("b", "t"), ("s", "t"), ("u", "a"), ("b", "v"), ("u", "v")]
    paths = [
        [[E[0], E[1], E[2]], [E[3]]],
        [[E[4], E[1], E[5]], [E[6]]],
    ]
    return Network.from_lists(["s", "a", "b", "t", "u", "v"], E, [("s", "t"), ("u", "v")], paths, [1.0, 2.0])


def uniform_spec(n, a=0.0, b=1.0, p=1.0) -> EdgeLatencySpec:
    return EdgeLatencySpec(np.full(n, a), np.full(n, b), np.full(n, p))


def oracle(network, spec, model="bounded-uniform", scale=0.0, **kw) -> LatencyOracle:
    return LatencyOracle(network, spec, NoiseSpec(model, np.full(network.n_edges, scale), **kw))


@pytest.fixture
def diamond():
    return diamond_network()


@pytest.fixture
def braess():
    return braess_network()


@pytest.fixture(scope="session")
def diamond_exp():
    return Experiment(builtin_config("diamond"))


@pytest.fixture
def symmetric_oracle():
    net = diamond_network()
    return oracle(net, uniform_spec(4))


@pytest.fixture
def asymmetric_oracle():
    return Experiment(builtin_config("diamond")).oracle


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
