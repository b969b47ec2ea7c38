import numpy as np
import pytest

from graphmdn.graph import human_skeleton, path_graph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def skeleton():
    return human_skeleton()


@pytest.fixture(scope="session")
def toy_graph():
    return path_graph(4)
