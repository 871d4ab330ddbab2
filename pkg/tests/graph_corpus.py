"""
Seeded corpus of small topologies for the brute-force oracles

Every graph has a gateway "g", at most ten nodes, integer capacities (so
max-flow sums are exact) and a mix of tree, cross and parallel links.
"""

import numpy as np

from topo_model import BACKHAUL, EDGE, GATEWAY, Link, Node, Topology

CORPUS_SIZE = 60


def random_topology(rng: np.random.Generator) -> Topology:
    size = int(rng.integers(3, 11))
    names = ["g"] + [f"n{i}" for i in range(1, size)]
    edge_count = int(rng.integers(1, size))
    roles = [GATEWAY] + [BACKHAUL] * (size - 1 - edge_count) + [EDGE] * edge_count
    nodes = [Node(name, role) for name, role in zip(names, roles)]

    links = []
    for i in range(1, size):
        parent = names[int(rng.integers(0, i))]
        links.append(Link(parent, names[i], float(rng.integers(1, 101))))
    for _ in range(int(rng.integers(0, size + 1))):
        a, b = rng.choice(size, size=2, replace=False)
        links.append(Link(names[int(a)], names[int(b)], float(rng.integers(1, 101))))
    return Topology.build(nodes, links)


def corpus(seed: int = 11) -> list[Topology]:
    rng = np.random.default_rng(seed)
    return [random_topology(rng) for _ in range(CORPUS_SIZE)]
