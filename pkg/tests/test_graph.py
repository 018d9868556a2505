import json

import numpy as np
import pytest

from bracketgnn.graph import (
    Graph,
    GraphError,
    apply_sparse,
    build_incidence,
    extract_subgraph,
    graph_from_dict,
    graph_hash,
    incident_edges,
    load_graph,
    neighbors,
    reindex,
    save_graph,
    subgraph_edge_ids,
)

from conftest import path3, random_graph, triangle


def test_incidence_single_edge():
    g = Graph(2, [(0, 1)], [(0, 0), (1, 0)])
    assert build_incidence(g).toarray().tolist() == [[-1, 1]]


def test_incidence_triangle():
    d0 = build_incidence(triangle()).toarray()
    np.testing.assert_array_equal(d0, [[-1, 1, 0], [0, -1, 1], [-1, 0, 1]])


@pytest.mark.parametrize("seed", range(5))
def test_incidence_kills_constants(seed):
    g = random_graph(30, seed)
    d0 = build_incidence(g)
    assert np.all(d0 @ np.ones(g.num_nodes) == 0)
    assert np.all(np.diff(d0.indptr) == 2)


def test_incidence_is_deterministic():
    a, b = build_incidence(random_graph(20, 1)), build_incidence(random_graph(20, 1))
    for name in ("data", "indices", "indptr"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.parametrize(
    "edges, needle",
    [([(0, 0), (0, 1)], "(0, 0)"), ([(0, 1), (1, 5)], "(1, 5)"), ([(0, 1), (1, 0)], "(1, 0)")],
)
def test_bad_edges_are_named(edges, needle):
    with pytest.raises(GraphError, match=needle.replace("(", r"\(").replace(")", r"\)")):
        Graph(2, edges, [(0, 0), (1, 0)])


def test_disconnected_rejected_unless_flagged():
    coords = [(0, 0), (1, 0), (2, 0), (3, 0)]
    with pytest.raises(GraphError):
        Graph(4, [(0, 1), (2, 3)], coords)
    g = Graph(4, [(0, 1), (2, 3)], coords, allow_disconnected=True)
    assert not g.connected


def test_isolated_node_rejected():
    with pytest.raises(GraphError):
        Graph(3, [(0, 1)], [(0, 0), (1, 0), (2, 0)])


def test_neighbors(tri, path):
    assert neighbors(tri, 0) == {1, 2}
    assert neighbors(path, 1) == {0, 2}
    with pytest.raises(IndexError):
        neighbors(path, 3)


def test_incident_edges(tri, path):
    assert incident_edges(Graph(2, [(0, 1)], [(0, 0), (1, 0)]), 0) == [0]
    assert incident_edges(tri, 2) == [1, 2]
    assert incident_edges(path, 1) == [0, 1]
    with pytest.raises(IndexError):
        incident_edges(path, -1)


def test_subgraph_triangle_pair(tri):
    sub, nmap = extract_subgraph(tri, {0, 1})
    assert sub.num_nodes == 2 and sub.edges.tolist() == [[0, 1]]
    assert nmap.to_local == {0: 0, 1: 1}


def test_subgraph_identity():
    g = random_graph(25, 4)
    sub, nmap = extract_subgraph(g, set(range(g.num_nodes)))
    assert np.array_equal(sub.edges, g.edges)
    assert nmap.to_global.tolist() == list(range(g.num_nodes))


def test_subgraph_disconnected_flag(path):
    sub, _ = extract_subgraph(path, {0, 2})
    assert sub.num_nodes == 2 and sub.num_edges == 0 and not sub.connected


def test_subgraph_roundtrip_and_edge_ids():
    g = random_graph(40, 2)
    subset = set(range(0, 40, 3)) | {1, 2, 4}
    sub, nmap = extract_subgraph(g, subset)
    assert {int(nmap.to_global[nmap.to_local[v]]) for v in subset} == subset
    eids = subgraph_edge_ids(g, nmap)
    np.testing.assert_array_equal(nmap.to_global[sub.edges], g.edges[eids])


def test_subgraph_errors(tri):
    with pytest.raises(GraphError):
        extract_subgraph(tri, set())
    with pytest.raises(GraphError):
        extract_subgraph(tri, {0, 7})


def test_apply_sparse_trailing_dims():
    g = random_graph(12, 0)
    x = np.random.default_rng(0).standard_normal((12, 3, 4))
    y = apply_sparse(g.ops.d0, x)
    np.testing.assert_allclose(y[:, 1, 2], g.ops.d0 @ x[:, 1, 2], rtol=0, atol=1e-14)


def test_graph_file_roundtrip(tmp_path):
    g = random_graph(15, 5)
    h = save_graph(g, tmp_path / "graph.json")
    assert h == graph_hash(g)
    assert load_graph(tmp_path / "graph.json") == g


def test_graph_file_rejects_unknown_fields():
    doc = triangle().to_dict()
    doc["cell_area"] = [1, 1, 1]
    with pytest.raises(GraphError, match="cell_area"):
        graph_from_dict(doc)
    doc = triangle().to_dict()
    del doc["coords"]
    with pytest.raises(GraphError):
        graph_from_dict(json.loads(json.dumps(doc)))


def test_reindex_sparse_ids():
    g, id_map = reindex([10, 20, 30], [(0, 0), (1, 0), (0, 1)], [(10, 20), (20, 30), (10, 30)])
    assert id_map == {10: 0, 20: 1, 30: 2}
    assert g.edges.tolist() == [[0, 1], [1, 2], [0, 2]]
    with pytest.raises(GraphError):
        reindex([1, 2], [(0, 0), (1, 0)], [(1, 3)])


def test_graph_is_immutable(tri):
    with pytest.raises(ValueError):
        tri.edges[0, 0] = 2
