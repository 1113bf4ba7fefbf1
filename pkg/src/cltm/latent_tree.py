"""Latent tree topology shared by structure learning, inference and training.

Nodes are indexed with the observed labels first (``0..L-1``) followed by the
latent nodes (``L..L+H-1``). Edges are stored as sorted ``(a, b)`` pairs with
``a < b`` in lexicographic order, and that order is the canonical edge index
used for edge potentials everywhere in the package.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class TreeError(ValueError):
    """Raised when a node/edge set does not form a valid latent tree."""


def latent_names(count: int) -> list[str]:
    return [f"h{i + 1}" for i in range(count)]


@dataclass(frozen=True)
class LatentTree:
    observed: tuple[str, ...]
    latent: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    _adjacency: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        observed = tuple(self.observed)
        latent = tuple(self.latent)
        m = len(observed) + len(latent)
        canonical = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise TreeError(f"self loop on node {a}")
            if not (0 <= a < m and 0 <= b < m):
                raise TreeError(f"edge ({a}, {b}) out of range for {m} nodes")
            canonical.add((min(a, b), max(a, b)))
        edges = tuple(sorted(canonical))
        adjacency: list[list[int]] = [[] for _ in range(m)]
        for a, b in edges:
            adjacency[a].append(b)
            adjacency[b].append(a)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "latent", latent)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_adjacency", tuple(tuple(sorted(n)) for n in adjacency))

    @classmethod
    def from_edges(
        cls,
        observed: Sequence[str] | int,
        latent_count: int,
        edges: Iterable[tuple[int, int]],
    ) -> "LatentTree":
        if isinstance(observed, int):
            observed = [f"y{i}" for i in range(observed)]
        return cls(tuple(observed), tuple(latent_names(latent_count)), tuple(edges))

    @property
    def observed_count(self) -> int:
        return len(self.observed)

    @property
    def latent_count(self) -> int:
        return len(self.latent)

    @property
    def n_nodes(self) -> int:
        return len(self.observed) + len(self.latent)

    @property
    def node_names(self) -> list[str]:
        return list(self.observed) + list(self.latent)

    def neighbors(self, node: int) -> tuple[int, ...]:
        return self._adjacency[node]

    def degree(self, node: int) -> int:
        return len(self._adjacency[node])

    def is_latent(self, node: int) -> bool:
        return node >= len(self.observed)

    def node_index(self, name: str) -> int:
        try:
            return self.node_names.index(name)
        except ValueError:
            raise KeyError(f"unknown node {name!r}") from None

    def edge_index(self, a: int, b: int) -> int:
        return self.edges.index((min(a, b), max(a, b)))

    def edge_names(self) -> list[tuple[str, str]]:
        names = self.node_names
        return [(names[a], names[b]) for a, b in self.edges]

    def validate(self) -> None:
        """Raise ``TreeError`` unless the invariants of a latent tree hold."""
        m = self.n_nodes
        if m == 0:
            raise TreeError("empty tree")
        if len(self.edges) != m - 1:
            raise TreeError(f"{len(self.edges)} edges for {m} nodes")
        seen = {0}
        queue = deque([0])
        while queue:
            v = queue.popleft()
            for u in self._adjacency[v]:
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
        if len(seen) != m:
            raise TreeError("tree is not connected")
        for h in range(self.observed_count, m):
            if self.degree(h) < 3:
                raise TreeError(f"latent node {self.node_names[h]} has degree {self.degree(h)}")

    def bfs_order(self, root: int = 0) -> tuple[list[int], list[int]]:
        """Breadth-first node order and parent array (``-1`` for the root)."""
        parent = [-1] * self.n_nodes
        order = [root]
        visited = [False] * self.n_nodes
        visited[root] = True
        i = 0
        while i < len(order):
            v = order[i]
            i += 1
            for u in self._adjacency[v]:
                if not visited[u]:
                    visited[u] = True
                    parent[u] = v
                    order.append(u)
        if len(order) != self.n_nodes:
            raise TreeError("tree is not connected")
        return order, parent

    def to_dict(self) -> dict:
        names = self.node_names
        return {
            "observed": list(self.observed),
            "latent": list(self.latent),
            "edges": [[names[a], names[b]] for a, b in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LatentTree":
        observed = [str(s) for s in data["observed"]]
        latent = [str(s) for s in data["latent"]]
        index = {name: i for i, name in enumerate(observed + latent)}
        if len(index) != len(observed) + len(latent):
            raise TreeError("duplicate node names")
        try:
            edges = [(index[a], index[b]) for a, b in data["edges"]]
        except KeyError as exc:
            raise TreeError(f"edge references unknown node {exc.args[0]!r}") from None
        return cls(tuple(observed), tuple(latent), tuple(edges))

    def to_dot(self) -> str:
        names = self.node_names
        lines = ["graph latent_tree {"]
        for i, name in enumerate(names):
            shape = "ellipse" if self.is_latent(i) else "box"
            lines.append(f'  "{name}" [shape={shape}];')
        for a, b in self.edges:
            lines.append(f'  "{names[a]}" -- "{names[b]}";')
        lines.append("}")
        return "\n".join(lines) + "\n"
