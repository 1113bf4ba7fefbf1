"""Latent tree structure recovery from an information distance matrix.

Chow-Liu grouping: build the minimum spanning tree over the observed labels,
then visit each internal MST node and replace its closed neighbourhood by the
latent tree that recursive grouping finds for it. Recursive grouping decides
family relations with the statistic ``phi_ijk = d_ik - d_jk``:

* ``phi_ijk == d_ij`` for every witness ``k``: ``j`` is the parent of leaf ``i``;
* ``phi_ijk == -d_ij`` for every witness ``k``: ``i`` is the parent of leaf ``j``;
* ``phi_ijk`` constant in ``k`` and strictly inside ``(-d_ij, d_ij)``: siblings.

Sibling families without an observed parent get a new latent parent ``h``
with ``d_ih = (d_ij + mean_k phi_ijk) / 2``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .kernel_distance import DistanceMatrix
from .latent_tree import LatentTree, latent_names

DEFAULT_EPSILON = 0.05
MIN_EDGE_LENGTH = 1e-9


def chow_liu_tree(dm: DistanceMatrix) -> LatentTree:
    """Minimum spanning tree over observed labels (Kruskal, ties by index pair)."""
    d = np.asarray(dm.entries, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("distance matrix has non-finite entries")
    n = d.shape[0]
    if n < 1:
        raise ValueError("empty distance matrix")
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = []
    for w, i, j in sorted((d[i, j], i, j) for i in range(n) for j in range(i + 1, n)):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
            edges.append((i, j))
            if len(edges) == n - 1:
                break
    return LatentTree(tuple(dm.labels), (), tuple(edges))


def sibling_statistic(d, i: int, j: int, k: int) -> float:
    if len({i, j, k}) != 3:
        raise ValueError("i, j, k must be distinct")
    return float(d[i, k] - d[j, k])


class ExtendedDistances:
    """Distance table over observed nodes plus latent nodes introduced on the way."""

    def __init__(self, d):
        self.d = np.array(d, dtype=float)

    @property
    def size(self) -> int:
        return self.d.shape[0]

    def add_node(self) -> int:
        self.d = np.pad(self.d, ((0, 1), (0, 1)))
        return self.size - 1

    def set(self, a: int, b: int, value: float) -> None:
        self.d[a, b] = self.d[b, a] = value

    def __getitem__(self, key):
        return self.d[key]


@dataclass
class _Relation:
    score: float
    i: int
    j: int
    kind: str  # "sibling", "parent_i" (i is parent of j) or "parent_j"


def _relations(ext: ExtendedDistances, active: list[int], eps: float, force: bool = False):
    rels = []
    best = None
    for i, j in itertools.combinations(active, 2):
        witnesses = [k for k in active if k != i and k != j]
        dij = ext[i, j]
        phi = ext[i, witnesses] - ext[j, witnesses]
        spread = float(phi.max() - phi.min())
        parent_j = float(np.max(np.abs(phi - dij)))
        parent_i = float(np.max(np.abs(phi + dij)))
        mean = float(phi.mean())
        found = []
        if parent_j <= eps:
            found.append(_Relation(parent_j, i, j, "parent_j"))
        if parent_i <= eps:
            found.append(_Relation(parent_i, i, j, "parent_i"))
        if spread <= eps and -dij + eps < mean < dij - eps:
            found.append(_Relation(spread, i, j, "sibling"))
        if found:
            rels.append(min(found, key=lambda r: r.score))
        if force:
            inside = -dij < mean < dij
            candidates = [(parent_j, "parent_j"), (parent_i, "parent_i")]
            if inside:
                candidates.append((spread, "sibling"))
            score, kind = min(candidates)
            if best is None or score < best.score:
                best = _Relation(score, i, j, kind)
    if force:
        return [best]
    rels.sort(key=lambda r: (r.score, r.i, r.j))
    return rels


def _consistent(members: list[int], rel: dict) -> int | None | bool:
    """Parent of the merged group (``None`` for pure siblings) or ``False`` if inconsistent."""
    parents = set()
    for a, b in itertools.combinations(members, 2):
        kind = rel.get((a, b))
        if kind is None:
            return False
        if kind == "parent_i":
            parents.add(a)
        elif kind == "parent_j":
            parents.add(b)
    if len(parents) > 1:
        return False
    if not parents:
        return None
    p = parents.pop()
    for a, b in itertools.combinations(members, 2):
        if p not in (a, b) and rel[(a, b)] != "sibling":
            return False
    return p


def _families(ext, active, eps):
    """Greedy partition of ``active`` into families, best-scoring relations first."""
    relations = _relations(ext, active, eps)
    if not relations:
        relations = _relations(ext, active, eps, force=True)
    rel = {}
    for r in relations:
        rel[(r.i, r.j)] = r.kind
        flipped = {"parent_i": "parent_j", "parent_j": "parent_i"}.get(r.kind, r.kind)
        rel[(r.j, r.i)] = flipped
    group = {v: [v] for v in active}
    group_parent: dict[int, int | None] = {v: None for v in active}
    for r in relations:
        gi, gj = group[r.i], group[r.j]
        if gi is gj:
            continue
        merged = sorted(gi + gj)
        parent = _consistent(merged, rel)
        if parent is False:
            continue
        for v in merged:
            group[v] = merged
        group_parent[merged[0]] = parent
    seen = set()
    families = []
    for v in active:
        g = group[v]
        if id(g) in seen:
            continue
        seen.add(id(g))
        families.append((group_parent.get(g[0]), g))
    return families


def recursive_grouping(ext: ExtendedDistances, nodes, epsilon: float):
    """Latent tree over ``nodes``; returns ``(edges, new_latent_ids)``.

    New latent nodes are appended to ``ext``; their distances to every node of
    the fragment are filled in as path sums over the fragment's edges.
    """
    nodes = list(nodes)
    if len(nodes) < 2:
        raise ValueError("recursive grouping needs at least two nodes")
    active = list(nodes)
    edges: list[tuple[int, int]] = []
    new_nodes: list[int] = []
    while len(active) > 2:
        families = _families(ext, active, epsilon)
        next_active = []
        created = []
        for parent, members in families:
            if len(members) == 1:
                next_active.append(members[0])
            elif parent is not None:
                edges.extend((parent, c) for c in members if c != parent)
                next_active.append(parent)
            else:
                h = ext.add_node()
                new_nodes.append(h)
                created.append((h, members))
                next_active.append(h)
                edges.extend((h, c) for c in members)
        _latent_distances(ext, active, created)
        if len(next_active) == len(active):
            raise RuntimeError("recursive grouping made no progress")
        active = next_active
    if len(active) == 2:
        edges.append((active[0], active[1]))
    _fragment_path_distances(ext, edges, nodes + new_nodes, set(new_nodes))
    return edges, new_nodes


def _latent_distances(ext, active, created):
    for h, members in created:
        for i in members:
            vals = []
            for j in members:
                if j == i:
                    continue
                witnesses = [k for k in active if k != i and k != j]
                phi = ext[i, witnesses] - ext[j, witnesses]
                vals.append(0.5 * (ext[i, j] + phi.mean()))
            ext.set(i, h, max(float(np.mean(vals)), MIN_EDGE_LENGTH))
        for k in active:
            if k in members:
                continue
            est = np.mean([ext[i, k] - ext[i, h] for i in members])
            ext.set(k, h, max(float(est), MIN_EDGE_LENGTH))
    for (h, ch), (g, cg) in itertools.combinations(created, 2):
        est = np.mean([ext[i, j] - ext[i, h] - ext[j, g] for i in ch for j in cg])
        ext.set(h, g, max(float(est), MIN_EDGE_LENGTH))


def _adjacency(edges):
    adj: dict[int, list[int]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    return adj


def _fragment_path_distances(ext, edges, nodes, latent):
    adj = _adjacency(edges)
    length = {}
    for a, b in edges:
        length[(a, b)] = length[(b, a)] = ext[a, b]
    for src in nodes:
        dist = {src: 0.0}
        stack = [src]
        while stack:
            v = stack.pop()
            for u in adj.get(v, []):
                if u not in dist:
                    dist[u] = dist[v] + length[(v, u)]
                    stack.append(u)
        for dst, value in dist.items():
            if dst != src and (src in latent or dst in latent):
                ext.set(src, dst, value)


def _branches(edges, h):
    adj = _adjacency(edges)
    out = []
    for start in adj[h]:
        seen = {h, start}
        stack = [start]
        comp = [start]
        while stack:
            v = stack.pop()
            for u in adj[v]:
                if u not in seen:
                    seen.add(u)
                    comp.append(u)
                    stack.append(u)
        out.append(comp)
    return out


def _global_latent_distances(ext, edges, fragment_nodes, new_nodes, known):
    """Distances from each new latent node to every node outside the fragment.

    An outside node ``k`` lies in exactly one branch of ``h``; for anchors ``s``
    in the other branches ``d(s, k) - d(s, h) = d(h, k)``, and in ``k``'s own
    branch the difference is smaller. Drop the smallest branch estimate and
    average the rest (with two branches, keep the larger).
    """
    inside = set(fragment_nodes)
    outside = [k for k in range(ext.size) if k not in inside and k in known]
    for h in new_nodes:
        branches = [[s for s in comp if s in known] for comp in _branches(edges, h)]
        branches = [b for b in branches if b]
        for k in outside:
            est = sorted(np.mean([ext[s, k] - ext[s, h] for s in b]) for b in branches)
            value = est[-1] if len(est) <= 2 else float(np.mean(est[1:]))
            ext.set(h, k, max(float(value), MIN_EDGE_LENGTH))
        known.add(h)


def clrg(dm: DistanceMatrix, epsilon: float = DEFAULT_EPSILON, scale_epsilon: bool = True) -> LatentTree:
    """Chow-Liu recursive grouping.

    ``epsilon`` is the tolerance of the relation tests; with ``scale_epsilon``
    it is multiplied by the median off-diagonal distance.
    """
    dm_entries = np.asarray(dm.entries, dtype=float)
    mst = chow_liu_tree(dm)
    n_obs = mst.observed_count
    if n_obs < 3:
        return mst
    eps = epsilon
    if scale_epsilon:
        eps = epsilon * float(np.median(dm_entries[np.triu_indices(n_obs, k=1)]))
    ext = ExtendedDistances(dm_entries)
    adj: dict[int, set[int]] = {v: set() for v in range(n_obs)}
    for a, b in mst.edges:
        adj[a].add(b)
        adj[b].add(a)
    order = sorted((v for v in range(n_obs) if mst.degree(v) > 1), key=lambda v: (-mst.degree(v), v))
    known = set(range(n_obs))
    for i in order:
        hood = [i] + sorted(adj[i])
        edges, new_nodes = recursive_grouping(ext, hood, eps)
        for u in hood:
            for v in list(adj[u]):
                if v in hood:
                    adj[u].discard(v)
        for h in new_nodes:
            adj[h] = set()
        for a, b in edges:
            adj[a].add(b)
            adj[b].add(a)
        _global_latent_distances(ext, edges, hood + new_nodes, new_nodes, known)
    return _finalize(mst.observed, n_obs, adj)


def _finalize(observed, n_obs, adj) -> LatentTree:
    adj = {v: set(nb) for v, nb in adj.items()}
    changed = True
    while changed:
        changed = False
        for h in sorted(v for v in adj if v >= n_obs):
            nb = adj[h]
            if len(nb) >= 3:
                continue
            if len(nb) == 2:
                a, b = sorted(nb)
                adj[a].discard(h)
                adj[b].discard(h)
                adj[a].add(b)
                adj[b].add(a)
            else:
                for a in nb:
                    adj[a].discard(h)
            del adj[h]
            changed = True
    latent = sorted(v for v in adj if v >= n_obs)
    index = {v: v for v in range(n_obs)}
    index.update({h: n_obs + i for i, h in enumerate(latent)})
    edges = {(min(index[a], index[b]), max(index[a], index[b])) for a in adj for b in adj[a]}
    tree = LatentTree(tuple(observed), tuple(latent_names(len(latent))), tuple(edges))
    tree.validate()
    return tree


def _bipartitions(tree: LatentTree) -> set[frozenset]:
    n_obs = tree.observed_count
    splits = set()
    for a, b in tree.edges:
        side = {a}
        stack = [a]
        while stack:
            v = stack.pop()
            for u in tree.neighbors(v):
                if u not in side and not (v == a and u == b):
                    side.add(u)
                    stack.append(u)
        obs = frozenset(v for v in side if v < n_obs)
        rest = frozenset(range(n_obs)) - obs
        splits.add(frozenset((obs, rest)))
    return splits


def tree_similarity(a: LatentTree, b: LatentTree) -> float:
    """Symmetrised fraction of shared observed-node bipartitions (latent names ignored)."""
    if tuple(a.observed) != tuple(b.observed):
        raise ValueError("trees must share the same observed labels in the same order")
    sa, sb = _bipartitions(a), _bipartitions(b)
    if not sa and not sb:
        return 1.0
    if not sa or not sb:
        return 0.0
    common = len(sa & sb)
    return 0.5 * (common / len(sa) + common / len(sb))


def save_tree(tree: LatentTree, json_path, dot_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump(tree.to_dict(), fh, indent=2)
        fh.write("\n")
    if dot_path is not None:
        with open(dot_path, "w") as fh:
            fh.write(tree.to_dot())


def load_tree(json_path) -> LatentTree:
    with open(json_path) as fh:
        tree = LatentTree.from_dict(json.load(fh))
    tree.validate()
    return tree
