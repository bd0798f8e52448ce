import pytest

from app.core.exceptions import InvalidSize, SelfLoop
from app.panel.graphs import (
    edgeless_graph,
    from_edges,
    graph_rings,
    graph_rings_upto,
    lattice_graph,
    line_graph,
)


def test_line_graph_adjacency():
    graph = line_graph(4)
    assert graph.adjacency == ((1,), (0, 2), (1, 3), (2,))
    assert graph.degree(0) == 1
    assert graph.degree(1) == 2


def test_line_graph_too_small():
    with pytest.raises(InvalidSize):
        line_graph(1)


def test_from_edges_rejects_self_loop():
    with pytest.raises(SelfLoop):
        from_edges(3, [(0, 1), (2, 2)])


def test_from_edges_collapses_duplicates():
    graph = from_edges(3, [(0, 1), (1, 0), (0, 1), (1, 2)])
    assert graph.n_edges == 2


def test_graph_rings_on_line():
    graph = line_graph(6)
    assert graph_rings(graph, 0, 0) == {0}
    assert graph_rings(graph, 0, 2) == {2}
    assert graph_rings(graph, 2, 1) == {1, 3}
    assert graph_rings(graph, 0, 10) == set()


def test_graph_rings_upto_drops_empty_tail():
    rings = graph_rings_upto(line_graph(3), 0, None)
    assert rings == [{0}, {1}, {2}]


def test_graph_rings_negative_distance():
    with pytest.raises(ValueError):
        graph_rings(line_graph(3), 0, -1)


def test_lattice_graph_coordinates_and_degree():
    graph = lattice_graph(3, spacing_km=10.0)
    assert graph.n_nodes == 9
    assert graph.n_edges == 12
    assert graph.degree(4) == 4
    assert graph.coordinates[4].tolist() == [10.0, 10.0]


def test_edgeless_graph():
    graph = edgeless_graph(5)
    assert graph.n_edges == 0
    assert graph_rings(graph, 3, 1) == set()
