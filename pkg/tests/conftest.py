import numpy as np
import pytest

from fpdecode.molgraph import with_filled_hydrogens
from fpdecode.selfies import Vocabulary


def chain(elements, orders=None, ring=None):
    """Linear heavy-atom chain with optional ring-closing bond (a, b, order)."""
    orders = orders or [1] * (len(elements) - 1)
    bonds = [(i, i + 1, o) for i, o in enumerate(orders)]
    if ring:
        bonds.append(ring)
    return with_filled_hydrogens([(el, 0) for el in elements], bonds)


@pytest.fixture
def vocab():
    return Vocabulary.default()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ethane():
    return chain(["C", "C"])


@pytest.fixture
def propane():
    return chain(["C", "C", "C"])


@pytest.fixture
def benzene():
    return chain(["C"] * 6, [1, 2, 1, 2, 1], ring=(0, 5, 2))


@pytest.fixture(scope="session")
def memorized():
    """Small model that has memorised six (fingerprint, sequence) pairs."""
    from fpdecode.model import TrainConfig, train_reference_model
    from fpdecode.molgraph import formula_of, morgan_fingerprint
    from fpdecode.selfies import encode
    from fpdecode.synth import random_corpus

    vocab = Vocabulary.default()
    graphs = random_corpus(6, 21, vocab, max_atoms=10)
    corpus = [(morgan_fingerprint(g), encode(g)) for g in graphs]
    result = train_reference_model(corpus, vocab, TrainConfig(epochs=300, hidden=32, max_len=32))
    targets = [(fp, formula_of(g), g) for (fp, _), g in zip(corpus, graphs)]
    return result, targets


def brute_mces(g1, g2):
    """Distance by enumerating edge subsets of the smaller graph, largest first."""
    import itertools

    import networkx as nx
    from networkx.algorithms import isomorphism

    if g1.num_bonds > g2.num_bonds:
        g1, g2 = g2, g1
    big = nx.Graph()
    for i, a in enumerate(g2.atoms):
        big.add_node(i, el=a.element)
    for a, b, o in g2.bonds:
        big.add_edge(a, b, order=o)
    bonds = list(g1.bonds)
    for size in range(len(bonds), 0, -1):
        for subset in itertools.combinations(bonds, size):
            h = nx.Graph()
            for a, b, o in subset:
                h.add_node(a, el=g1.atoms[a].element)
                h.add_node(b, el=g1.atoms[b].element)
                h.add_edge(a, b, order=o)
            gm = isomorphism.GraphMatcher(
                big, h, node_match=lambda x, y: x["el"] == y["el"], edge_match=lambda x, y: x["order"] == y["order"]
            )
            if gm.subgraph_is_monomorphic():
                return g1.num_bonds + g2.num_bonds - 2 * size
    return g1.num_bonds + g2.num_bonds


def small_random_graph(rng, max_edges=8):
    from fpdecode.synth import random_molecule

    while True:
        g = random_molecule(rng, max_atoms=int(rng.integers(1, 9)), element_weights={"C": 0.7, "N": 0.15, "O": 0.15})
        if g.num_bonds <= max_edges:
            return g


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.VERDICTS:
        terminalreporter.write_line(line)
