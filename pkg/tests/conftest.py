import numpy as np
import pytest

from kgant import data, knowledge_graph as kg


@pytest.fixture(scope="session")
def graph():
    return kg.load_graph(data.default_resource("kitchen.graph"))


@pytest.fixture(scope="session")
def grammar():
    return data.load_grammar(data.default_resource("kitchen_grammar.yaml"))


@pytest.fixture(scope="session")
def episodes(grammar):
    return data.generate(grammar, 12, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
