"""Ground-truth latent tree models, samplers and brute-force oracles.

The ground-truth conditional model is piecewise constant in the features:
each sample belongs to one of ``C`` well separated Gaussian clusters and its
node/edge potentials are those of its cluster. Everything here is exact
enumeration or exact sampling and is meant to check the fast code paths.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import LabeledDataset
from .kernel_distance import CLAMP_CEILING, DistanceMatrix, pairwise_distance
from .latent_tree import LatentTree
from .tree_crf import UNSET, InferenceResult, Potentials, marginals

MAX_ENUMERATION_NODES = 20


@dataclass
class GroundTruthModel:
    tree: LatentTree
    cluster_potentials: list[Potentials]
    centers: np.ndarray
    noise_scale: float

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.tree.validate()
        if len(self.cluster_potentials) != self.centers.shape[0]:
            raise ValueError("one potential set per cluster center is required")
        c = self.centers.shape[0]
        for a, b in itertools.combinations(range(c), 2):
            if np.linalg.norm(self.centers[a] - self.centers[b]) < 6 * self.noise_scale:
                raise ValueError("cluster centers must be at least 6 noise scales apart")

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    def to_dict(self) -> dict:
        return {
            "tree": self.tree.to_dict(),
            "centers": self.centers.tolist(),
            "noise_scale": self.noise_scale,
            "cluster_potentials": [
                {"node": p.node.tolist(), "edge": p.edge.tolist()} for p in self.cluster_potentials
            ],
        }


@dataclass
class SyntheticDataset(LabeledDataset):
    hidden: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    clusters: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _configurations(m: int) -> np.ndarray:
    # lexicographic order, node 0 most significant
    codes = np.arange(2 ** m)
    return ((codes[:, None] >> (m - 1 - np.arange(m))) & 1).astype(np.int64)


def _enumerate(tree: LatentTree, potentials: Potentials, clamp=None):
    m = tree.n_nodes
    if m > MAX_ENUMERATION_NODES:
        raise ValueError(f"enumeration refused for {m} > {MAX_ENUMERATION_NODES} nodes")
    z = _configurations(m)
    if clamp is not None:
        clamp = np.asarray(clamp)
        ok = np.all((clamp == UNSET) | (z == clamp), axis=1)
        z = z[ok]
    e = z @ np.asarray(potentials.node, dtype=float)
    for (a, b), phi in zip(tree.edges, potentials.edge):
        e = e + phi * z[:, a] * z[:, b]
    return z, e


def brute_force_inference(tree: LatentTree, potentials: Potentials, clamp=None) -> InferenceResult:
    """Marginals, log-partition and MAP by enumerating every consistent configuration."""
    z, e = _enumerate(tree, potentials, clamp)
    log_z = float(logsumexp(-e))
    p = np.exp(-e - log_z)
    node = p @ z
    tables = np.empty((len(tree.edges), 2, 2))
    for i, (a, b) in enumerate(tree.edges):
        for sa in (0, 1):
            for sb in (0, 1):
                tables[i, sa, sb] = p[(z[:, a] == sa) & (z[:, b] == sb)].sum()
    best = z[int(np.argmin(e))]
    return InferenceResult(node, tables, log_z, best.copy())


def exact_pairwise_joint(model: GroundTruthModel, cluster: int, k: int, t: int) -> np.ndarray:
    """Exact 2x2 table of ``(z_k, z_t)`` under one cluster's potentials."""
    z, e = _enumerate(model.tree, model.cluster_potentials[cluster])
    p = np.exp(-e - logsumexp(-e))
    table = np.zeros((2, 2))
    for sa in (0, 1):
        for sb in (0, 1):
            table[sa, sb] = p[(z[:, k] == sa) & (z[:, t] == sb)].sum()
    return table


def exact_distance_matrix(model: GroundTruthModel, cluster: int, nodes=None,
                          clamp_ceiling: float = CLAMP_CEILING) -> DistanceMatrix:
    """Information distances from exact joints; observed nodes unless ``nodes`` is given."""
    tree = model.tree
    nodes = list(range(tree.observed_count)) if nodes is None else list(nodes)
    z, e = _enumerate(tree, model.cluster_potentials[cluster])
    p = np.exp(-e - logsumexp(-e))
    zs = z[:, nodes].astype(float)
    p1 = p @ zs
    p11 = (zs * p[:, None]).T @ zs
    size = len(nodes)
    d = np.zeros((size, size))
    for i in range(size):
        for j in range(i + 1, size):
            joint = np.array(
                [
                    [1 - p1[i] - p1[j] + p11[i, j], p1[j] - p11[i, j]],
                    [p1[i] - p11[i, j], p11[i, j]],
                ]
            )
            d[i, j] = d[j, i] = pairwise_distance(
                joint, np.diag([1 - p1[i], p1[i]]), np.diag([1 - p1[j], p1[j]]),
                clamp_ceiling=clamp_ceiling,
            )
    names = tree.node_names
    return DistanceMatrix(d, [names[v] for v in nodes], clamp_ceiling)


def sample_configurations(tree: LatentTree, potentials: Potentials, count: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Exact samples by sequential clamped-marginal sampling in node order."""
    z = np.full((count, tree.n_nodes), UNSET, dtype=np.int64)
    if count == 0:
        return z
    node = np.broadcast_to(potentials.node, (count, tree.n_nodes))
    batch = Potentials(node, potentials.edge)
    for v in range(tree.n_nodes):
        p1 = marginals(tree, batch, z).node_marginals[:, v]
        z[:, v] = (rng.random(count) < p1).astype(np.int64)
    return z


def sample_dataset(model: GroundTruthModel, n: int, seed: int) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    tree = model.tree
    clusters = rng.integers(0, model.n_clusters, size=n)
    noise = rng.standard_normal((n, model.centers.shape[1]))
    features = model.centers[clusters] + model.noise_scale * noise
    z = np.zeros((n, tree.n_nodes), dtype=np.int64)
    for c in range(model.n_clusters):
        idx = np.flatnonzero(clusters == c)
        z[idx] = sample_configurations(tree, model.cluster_potentials[c], len(idx), rng)
    return SyntheticDataset(
        features,
        z[:, : tree.observed_count],
        list(tree.observed),
        scenes=clusters.copy(),
        hidden=z[:, tree.observed_count:],
        clusters=clusters,
    )


def random_latent_tree(n_observed: int, n_latent: int, rng: np.random.Generator,
                       names=None) -> LatentTree:
    """Random minimal latent tree: every latent node ends up with degree >= 3."""
    if n_latent and n_observed < n_latent + 2:
        raise ValueError("too few observed nodes for that many latent nodes")
    latent = list(range(n_observed, n_observed + n_latent))
    edges = []
    degree = {v: 0 for v in range(n_observed + n_latent)}
    for i in range(1, n_latent):
        parent = latent[int(rng.integers(0, i))]
        edges.append((parent, latent[i]))
        degree[parent] += 1
        degree[latent[i]] += 1
    observed = list(rng.permutation(n_observed))
    attached: list[int] = []
    for h in latent:
        while degree[h] < 3:
            if not observed:
                raise ValueError("cannot satisfy latent degree constraints")
            o = int(observed.pop())
            edges.append((h, o))
            degree[h] += 1
            degree[o] += 1
            attached.append(o)
    for o in observed:
        anchors = latent + attached
        if not anchors:
            attached.append(int(o))
            continue
        a = anchors[int(rng.integers(0, len(anchors)))]
        edges.append((a, int(o)))
        degree[a] += 1
        attached.append(int(o))
    names = names or [f"y{i}" for i in range(n_observed)]
    return LatentTree.from_edges(names, n_latent, edges)


def balanced_potentials(tree: LatentTree, edge_potentials, bias=None) -> Potentials:
    """Node potentials that centre every node under the given couplings, plus ``bias``.

    With ``z = (1 + s) / 2`` the coupling ``phi_kt z_k z_t`` adds a field of
    ``phi_kt / 4`` on each spin; ``-sum(phi_kt) / 2`` per node cancels it, so a
    zero ``bias`` gives every node marginal 1/2.
    """
    edge = np.asarray(edge_potentials, dtype=float)
    node = np.zeros(tree.n_nodes)
    for (a, b), phi in zip(tree.edges, edge):
        node[a] -= phi / 2
        node[b] -= phi / 2
    if bias is not None:
        node = node + np.asarray(bias, dtype=float)
    return Potentials(node, edge)


def random_ground_truth(
    tree: LatentTree,
    n_clusters: int,
    dim: int,
    rng: np.random.Generator,
    edge_range: tuple[float, float] = (1.5, 3.0),
    bias_scale: float = 1.0,
    separation: float = 10.0,
    noise_scale: float = 1.0,
    shared_edges: bool = True,
    repulsive_fraction: float = 0.0,
    bias_mean: float = 0.0,
    scene_on_latent: bool = False,
) -> GroundTruthModel:
    """Random cluster-conditional model over ``tree``.

    Edge magnitudes are drawn from ``edge_range``. An edge is attractive
    (negative potential, labels tend to co-occur) unless a coin with
    probability ``repulsive_fraction`` makes it repulsive. Node biases are
    normal with mean ``bias_mean``; a positive mean makes labels sparse.
    Cluster centers sit on scaled orthonormal directions so that every pair
    is exactly ``separation`` apart.

    With ``scene_on_latent`` only latent nodes get cluster-specific biases;
    observed nodes share one bias draw, so clusters act through latent causes.
    """
    if dim < n_clusters:
        raise ValueError("dim must be at least n_clusters for equidistant centers")
    basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0][:, :n_clusters].T
    centers = basis * separation / np.sqrt(2)
    lo, hi = edge_range
    potentials = []

    def draw_edges():
        magnitude = rng.uniform(lo, hi, size=len(tree.edges))
        sign = np.where(rng.random(len(tree.edges)) < repulsive_fraction, 1.0, -1.0)
        return sign * magnitude

    edge = draw_edges()
    shared_bias = rng.normal(bias_mean, bias_scale, size=tree.n_nodes) if scene_on_latent else None
    for _ in range(n_clusters):
        if not shared_edges:
            edge = draw_edges()
        bias = rng.normal(bias_mean, bias_scale, size=tree.n_nodes)
        if scene_on_latent:
            bias[: tree.observed_count] = shared_bias[: tree.observed_count]
        potentials.append(balanced_potentials(tree, edge, bias))
    return GroundTruthModel(tree, potentials, centers, noise_scale)
