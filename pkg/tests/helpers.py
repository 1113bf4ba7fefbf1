"""Small builders shared by the test modules."""

import numpy as np

from cltm.latent_tree import LatentTree
from cltm.tree_crf import UNSET, Potentials


def random_tree(m, rng, observed=None):
    """Random labelled tree on ``m`` nodes by uniform parent attachment.

    The first ``observed`` nodes are observed and the rest latent. Latent
    degrees are not constrained, which is fine for inference tests.
    """
    observed = m if observed is None else observed
    order = rng.permutation(m)
    edges = [(int(order[i]), int(order[rng.integers(0, i)])) for i in range(1, m)]
    return LatentTree.from_edges(observed, m - observed, edges)


def random_potentials(tree, rng, scale=3.0):
    return Potentials(
        rng.uniform(-scale, scale, tree.n_nodes),
        rng.uniform(-scale, scale, len(tree.edges)),
    )


def random_clamp(tree, rng, p=0.4):
    clamp = np.full(tree.n_nodes, UNSET)
    for v in range(tree.n_nodes):
        if rng.random() < p:
            clamp[v] = rng.integers(0, 2)
    return clamp


def path_distance_matrix(tree, lengths=None, nodes=None):
    """All-pairs path sums over ``tree`` with per-edge ``lengths`` (default 1)."""
    m = tree.n_nodes
    lengths = np.ones(len(tree.edges)) if lengths is None else np.asarray(lengths, float)
    weight = {}
    for (a, b), w in zip(tree.edges, lengths):
        weight[(a, b)] = weight[(b, a)] = w
    d = np.zeros((m, m))
    for s in range(m):
        stack = [(s, -1, 0.0)]
        while stack:
            v, parent, dist = stack.pop()
            d[s, v] = dist
            for u in tree.neighbors(v):
                if u != parent:
                    stack.append((u, v, dist + weight[(v, u)]))
    if nodes is not None:
        d = d[np.ix_(nodes, nodes)]
    return d


def two_node_tree():
    """The running example: one observed node, one latent, coupling -ln 3."""
    tree = LatentTree(("y0",), ("h1",), ((0, 1),))
    return tree, Potentials(np.zeros(2), np.array([-np.log(3.0)]))
