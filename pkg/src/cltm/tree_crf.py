"""Exact inference for the conditional latent tree CRF.

Every node takes values in {0, 1}. For node potentials ``phi_k`` and edge
potentials ``phi_kt`` the energy of a configuration is

    E(z) = sum_k phi_k z_k + sum_(k,t) phi_kt z_k z_t

and ``P(z) = exp(-E(z) - A)`` with ``A`` the log-partition. All message passing
is done in log space; messages are vectorised over a leading batch axis so a
whole mini-batch is processed with one sweep over the tree.

Partial assignments (clamps) are integer arrays with ``-1`` marking unset
nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent_tree import LatentTree

UNSET = -1


@dataclass
class Potentials:
    """Node potentials (``(m,)`` or batched ``(B, m)``) and per-edge potentials ``(E,)``."""

    node: np.ndarray
    edge: np.ndarray

    def __post_init__(self):
        self.node = np.asarray(self.node, dtype=float)
        self.edge = np.asarray(self.edge, dtype=float)


@dataclass
class InferenceResult:
    node_marginals: np.ndarray  # P(z_k = 1), shape (m,) or (B, m)
    edge_marginals: np.ndarray  # tables indexed [z_a, z_b] per edge, shape (E, 2, 2) or (B, E, 2, 2)
    log_partition: np.ndarray | float
    map: np.ndarray | None = None


def _check(tree: LatentTree, potentials: Potentials, clamp):
    node = potentials.node
    single = node.ndim == 1
    node = np.atleast_2d(node)
    if node.shape[1] != tree.n_nodes:
        raise ValueError(f"expected {tree.n_nodes} node potentials, got {node.shape[1]}")
    edge = potentials.edge
    if edge.shape != (len(tree.edges),):
        raise ValueError(f"expected {len(tree.edges)} edge potentials, got shape {edge.shape}")
    if clamp is None:
        clamp = np.full(node.shape, UNSET, dtype=int)
    else:
        clamp = np.asarray(clamp, dtype=int)
        clamp = np.broadcast_to(np.atleast_2d(clamp), node.shape)
        if not np.all((clamp == UNSET) | (clamp == 0) | (clamp == 1)):
            raise ValueError("clamp values must be -1 (unset), 0 or 1")
    return node, edge, clamp, single


def _schedule(tree: LatentTree, root: int):
    order, parent = tree.bfs_order(root)
    parent_edge = [-1] * tree.n_nodes
    children: list[list[int]] = [[] for _ in range(tree.n_nodes)]
    for v in order[1:]:
        parent_edge[v] = tree.edge_index(v, parent[v])
        children[parent[v]].append(v)
    return order, parent, parent_edge, children


def energy(tree: LatentTree, potentials: Potentials, z) -> np.ndarray | float:
    """Energy of full assignment(s) ``z``; batched when ``z`` is 2-d."""
    z = np.asarray(z)
    if np.any((z != 0) & (z != 1)):
        raise ValueError("energy requires a full 0/1 assignment")
    single = z.ndim == 1
    z = np.atleast_2d(z).astype(float)
    if z.shape[1] != tree.n_nodes:
        raise ValueError(f"assignment has {z.shape[1]} entries for {tree.n_nodes} nodes")
    node = np.atleast_2d(potentials.node)
    out = np.sum(node * z, axis=1)
    if tree.edges:
        a = np.array([e[0] for e in tree.edges])
        b = np.array([e[1] for e in tree.edges])
        out = out + (z[:, a] * z[:, b]) @ potentials.edge
    return float(out[0]) if single else out


def _node_log_weights(node: np.ndarray, clamp: np.ndarray) -> np.ndarray:
    logw = np.zeros(node.shape + (2,))
    logw[..., 1] = -node
    logw[..., 0][clamp == 1] = -np.inf
    logw[..., 1][clamp == 0] = -np.inf
    return logw


def _sum_product(tree, node, edge, clamp, root):
    order, parent, parent_edge, children = _schedule(tree, root)
    batch, m = node.shape
    node_logw = _node_log_weights(node, clamp)
    up = np.empty((m, batch, 2))
    msg_up = np.empty((m, batch, 2))
    for v in reversed(order):
        u = node_logw[:, v, :].copy()
        for c in children[v]:
            u += msg_up[c]
        up[v] = u
        if parent[v] >= 0:
            phi = edge[parent_edge[v]]
            msg_up[v, :, 0] = np.logaddexp(u[:, 0], u[:, 1])
            msg_up[v, :, 1] = np.logaddexp(u[:, 0], u[:, 1] - phi)
    log_z = np.logaddexp(up[root][:, 0], up[root][:, 1])

    down = np.zeros((m, batch, 2))
    full = np.empty((m, batch, 2))
    edge_log = np.empty((batch, len(tree.edges), 2, 2))
    for v in order:
        full[v] = up[v] + down[v]
        for c in children[v]:
            cavity = full[v] - msg_up[c]
            phi = edge[parent_edge[c]]
            down[c, :, 0] = np.logaddexp(cavity[:, 0], cavity[:, 1])
            down[c, :, 1] = np.logaddexp(cavity[:, 0], cavity[:, 1] - phi)
            table = cavity[:, :, None] + up[c][:, None, :]
            table[:, 1, 1] -= phi
            e = parent_edge[c]
            if tree.edges[e][0] == v:
                edge_log[:, e] = table
            else:
                edge_log[:, e] = np.swapaxes(table, 1, 2)

    node_marg = np.exp(full[:, :, 1] - np.logaddexp(full[:, :, 0], full[:, :, 1])).T
    node_marg = np.where(clamp == UNSET, node_marg, clamp.astype(float))
    if len(tree.edges):
        flat = edge_log.reshape(batch, len(tree.edges), 4)
        norm = np.logaddexp.reduce(flat, axis=2)
        edge_marg = np.exp(edge_log - norm[:, :, None, None])
    else:
        edge_marg = edge_log
    return log_z, node_marg, edge_marg


def log_partition(tree: LatentTree, potentials: Potentials, clamp=None, root: int = 0):
    """Log of the sum of ``exp(-E(z))`` over configurations consistent with ``clamp``."""
    node, edge, clamp, single = _check(tree, potentials, clamp)
    log_z, _, _ = _sum_product(tree, node, edge, clamp, root)
    return float(log_z[0]) if single else log_z


def marginals(tree: LatentTree, potentials: Potentials, clamp=None, root: int = 0) -> InferenceResult:
    """Exact node and edge marginals plus the log-partition, by sum-product."""
    node, edge, clamp, single = _check(tree, potentials, clamp)
    log_z, node_marg, edge_marg = _sum_product(tree, node, edge, clamp, root)
    if single:
        return InferenceResult(node_marg[0], edge_marg[0], float(log_z[0]))
    return InferenceResult(node_marg, edge_marg, log_z)


def map_config(tree: LatentTree, potentials: Potentials, clamp=None, root: int = 0) -> np.ndarray:
    """Minimum-energy assignment consistent with ``clamp`` (min-sum with backtracking).

    Ties are broken toward 0 at the root and at every backtracking step.
    """
    node, edge, clamp, single = _check(tree, potentials, clamp)
    order, parent, parent_edge, children = _schedule(tree, root)
    batch, m = node.shape
    node_e = np.zeros((batch, m, 2))
    node_e[..., 1] = node
    node_e[..., 0][clamp == 1] = np.inf
    node_e[..., 1][clamp == 0] = np.inf
    up = np.empty((m, batch, 2))
    msg = np.empty((m, batch, 2))
    for v in reversed(order):
        u = node_e[:, v, :].copy()
        for c in children[v]:
            u += msg[c]
        up[v] = u
        if parent[v] >= 0:
            phi = edge[parent_edge[v]]
            msg[v, :, 0] = np.minimum(u[:, 0], u[:, 1])
            msg[v, :, 1] = np.minimum(u[:, 0], u[:, 1] + phi)
    z = np.zeros((batch, m), dtype=int)
    z[:, root] = (up[root][:, 1] < up[root][:, 0]).astype(int)
    for v in order[1:]:
        phi = edge[parent_edge[v]]
        zp = z[:, parent[v]]
        z[:, v] = (up[v][:, 1] + phi * zp < up[v][:, 0]).astype(int)
    return z[0] if single else z


def infer(tree: LatentTree, potentials: Potentials, clamp=None, root: int = 0) -> InferenceResult:
    """Marginals, log-partition and MAP in one call."""
    result = marginals(tree, potentials, clamp, root)
    result.map = map_config(tree, potentials, clamp, root)
    return result


def latent_activation_scores(
    tree: LatentTree, node_potentials: np.ndarray, latent_node: str, top_k: int | None = None
) -> np.ndarray:
    """Sample indices ranked by how strongly the latent node's potential favours ``z = 1``.

    Activation is ``-phi_h``; ties keep sample order.
    """
    index = tree.node_index(latent_node)
    if not tree.is_latent(index):
        raise KeyError(f"{latent_node!r} is not a latent node")
    phi = np.atleast_2d(np.asarray(node_potentials, dtype=float))[:, index]
    ranked = np.argsort(phi, kind="stable")
    return ranked if top_k is None else ranked[:top_k]
