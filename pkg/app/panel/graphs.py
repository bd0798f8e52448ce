from __future__ import annotations

from collections.abc import Iterable
from functools import lru_cache

import networkx as nx
import numpy as np

from app.core.exceptions import InvalidSize, SelfLoop
from app.core.types import NetworkGraph


def from_edges(n: int, edges: Iterable[tuple[int, int]]) -> NetworkGraph:
    """Symmetrised adjacency with duplicate edges collapsed."""
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for a, b in edges:
        if a == b:
            raise SelfLoop(f"Self-loop on node {a}", node=a)
        nbrs[a].add(b)
        nbrs[b].add(a)
    return NetworkGraph(adjacency=tuple(tuple(sorted(s)) for s in nbrs))


def line_graph(n: int) -> NetworkGraph:
    """Units 0..n-1 on a line; the two end units have a single neighbour."""
    if n < 2:
        raise InvalidSize(f"A line graph needs at least 2 units, got {n}", n=n)
    return from_edges(n, ((i, i + 1) for i in range(n - 1)))


def lattice_graph(n_side: int, spacing_km: float = 50.0) -> NetworkGraph:
    """Square n_side x n_side lattice with rook adjacency and km coordinates."""
    if n_side < 2:
        raise InvalidSize(f"A lattice needs at least 2 units per side, got {n_side}", n=n_side)
    idx = np.arange(n_side * n_side).reshape(n_side, n_side)
    edges = [(int(a), int(b)) for a, b in zip(idx[:, :-1].ravel(), idx[:, 1:].ravel())]
    edges += [(int(a), int(b)) for a, b in zip(idx[:-1, :].ravel(), idx[1:, :].ravel())]
    rows, cols = np.divmod(np.arange(n_side * n_side), n_side)
    coords = np.column_stack([cols * spacing_km, rows * spacing_km]).astype(float)
    return from_edges(n_side * n_side, edges).with_coordinates(coords)


def edgeless_graph(n: int) -> NetworkGraph:
    return NetworkGraph(adjacency=tuple(() for _ in range(n)))


@lru_cache(maxsize=8)
def to_networkx(graph: NetworkGraph) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(range(graph.n_nodes))
    g.add_edges_from((i, j) for i, nbrs in enumerate(graph.adjacency) for j in nbrs if i < j)
    return g


def graph_rings_upto(graph: NetworkGraph, i: int, s_max: int | None) -> list[set[int]]:
    """Rings 0..s_max around i in one BFS; trailing empty rings are dropped."""
    lengths = nx.single_source_shortest_path_length(to_networkx(graph), i, cutoff=s_max)
    depth = max(lengths.values())
    rings: list[set[int]] = [set() for _ in range(depth + 1)]
    for node, dist in lengths.items():
        rings[dist].add(node)
    return rings


def graph_rings(graph: NetworkGraph, i: int, s: int) -> set[int]:
    """Units at shortest-path distance exactly s from i."""
    if s < 0:
        raise ValueError(f"distance must be >= 0, got {s}")
    rings = graph_rings_upto(graph, i, s)
    return rings[s] if s < len(rings) else set()
