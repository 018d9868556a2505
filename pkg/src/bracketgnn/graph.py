"""Mesh graph topology and the signed incidence operator.

Edges are stored directed in input order. The orientation only fixes the
signs of the incidence matrix ``d0``; every attention and metric quantity
built on top of it is orientation-symmetric.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Graph",
    "GraphError",
    "NodeMap",
    "GraphOperators",
    "apply_sparse",
    "build_incidence",
    "neighbors",
    "incident_edges",
    "extract_subgraph",
    "reindex",
    "graph_hash",
    "load_graph",
    "save_graph",
]

GRAPH_FIELDS = ("num_nodes", "coords", "edges")


class GraphError(ValueError):
    """Raised when a graph violates its structural invariants."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable node/edge topology with planar node coordinates in meters.

    Parameters
    ----------
    num_nodes : int
        Number of nodes ``V``; node ids are ``0..V-1``.
    edges : array_like, shape (E, 2)
        ``(tail, head)`` pairs in a fixed order.
    coords : array_like, shape (V, 2)
        Node positions.
    allow_disconnected : bool
        Set for subdomain slices, which may legitimately fall apart.
    """

    num_nodes: int
    edges: np.ndarray
    coords: np.ndarray
    allow_disconnected: bool = False
    connected: bool = field(init=False)

    def __post_init__(self):
        V = int(self.num_nodes)
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        coords = np.array(self.coords, dtype=np.float64)
        if V < 1:
            raise GraphError("graph needs at least one node")
        if coords.shape != (V, 2):
            raise GraphError(f"coords must have shape ({V}, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise GraphError("coords must be finite")
        bad = np.flatnonzero(((edges < 0) | (edges >= V)).any(axis=1))
        if bad.size:
            a = int(bad[0])
            raise GraphError(f"edge {a} {tuple(edges[a].tolist())} references a node outside 0..{V - 1}")
        loops = np.flatnonzero(edges[:, 0] == edges[:, 1])
        if loops.size:
            a = int(loops[0])
            raise GraphError(f"edge {a} {tuple(edges[a].tolist())} is a self-loop")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        keys = lo * V + hi
        order = np.argsort(keys, kind="stable")
        repeat = order[1:][keys[order[1:]] == keys[order[:-1]]]
        if repeat.size:
            dup = int(repeat.min())
            raise GraphError(f"edge {dup} {tuple(edges[dup].tolist())} duplicates an earlier edge")
        edges.setflags(write=False)
        coords.setflags(write=False)
        object.__setattr__(self, "num_nodes", V)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "coords", coords)

        ncomp = _count_components(V, edges)
        object.__setattr__(self, "connected", ncomp == 1)
        if ncomp != 1 and not self.allow_disconnected:
            raise GraphError(f"graph has {ncomp} connected components; expected 1")

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def tails(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def heads(self) -> np.ndarray:
        return self.edges[:, 1]

    @property
    def ops(self) -> "GraphOperators":
        """Sparse operators derived from the topology, built on first use."""
        cached = self.__dict__.get("_ops")
        if cached is None:
            cached = GraphOperators(self)
            object.__setattr__(self, "_ops", cached)
        return cached

    def edge_lengths(self) -> np.ndarray:
        d = self.coords[self.heads] - self.coords[self.tails]
        return np.sqrt((d**2).sum(axis=1))

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.coords, other.coords)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "coords": self.coords.tolist(),
            "edges": self.edges.tolist(),
        }


def _count_components(V, edges):
    if V == 1:
        return 1
    adj = sp.coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(V, V)
    )
    ncomp, _ = connected_components(adj, directed=False)
    return ncomp


def build_incidence(graph: Graph) -> sp.csr_matrix:
    """Signed E x V incidence matrix: -1 at the tail, +1 at the head.

    Row order equals edge order and the CSR layout is deterministic.
    """
    E = graph.num_edges
    rows = np.repeat(np.arange(E, dtype=np.int64), 2)
    cols = graph.edges.reshape(-1)
    vals = np.tile(np.array([-1.0, 1.0]), E)
    d0 = sp.csr_matrix((vals, (rows, cols)), shape=(E, graph.num_nodes))
    d0.sort_indices()
    return d0


class GraphOperators:
    """CSR operators used by the message-passing kernels.

    ``d0`` maps node fields to edge differences, ``d0T`` is its transpose;
    ``tail_T``/``head_T`` scatter edge rows onto their tail/head nodes.
    """

    def __init__(self, graph: Graph):
        V, E = graph.num_nodes, graph.num_edges
        self.num_nodes, self.num_edges = V, E
        self.tails = graph.tails
        self.heads = graph.heads
        self.d0 = build_incidence(graph)
        self.d0T = self.d0.T.tocsr()
        self.d0T.sort_indices()
        ones = np.ones(E)
        ar = np.arange(E)
        self.tail_T = sp.csr_matrix((ones, (self.tails, ar)), shape=(V, E))
        self.head_T = sp.csr_matrix((ones, (self.heads, ar)), shape=(V, E))
        self.abs_d0T = (self.tail_T + self.head_T).tocsr()
        for m in (self.tail_T, self.head_T, self.abs_d0T):
            m.sort_indices()


def apply_sparse(mat, x):
    """``mat @ x`` over the leading axis of an array with arbitrary trailing dims."""
    lead = x.shape[0]
    out = mat @ x.reshape(lead, -1)
    return np.asarray(out).reshape((mat.shape[0],) + x.shape[1:])


def _check_node(graph, i):
    if not 0 <= int(i) < graph.num_nodes:
        raise IndexError(f"node {i} out of range for graph with {graph.num_nodes} nodes")


def neighbors(graph: Graph, i: int) -> set[int]:
    _check_node(graph, i)
    e = graph.edges
    out = set(e[e[:, 0] == i, 1].tolist())
    out.update(e[e[:, 1] == i, 0].tolist())
    return out


def incident_edges(graph: Graph, i: int) -> list[int]:
    _check_node(graph, i)
    e = graph.edges
    return np.flatnonzero((e[:, 0] == i) | (e[:, 1] == i)).tolist()


@dataclass(frozen=True)
class NodeMap:
    """Bidirectional map between global and subgraph node ids."""

    to_global: np.ndarray  # new id -> old id
    to_local: dict

    def __len__(self):
        return len(self.to_global)


def extract_subgraph(graph: Graph, node_subset) -> tuple[Graph, NodeMap]:
    """Induced subgraph on ``node_subset`` with contiguous renumbering.

    Nodes keep their relative global order; edges keep their relative order,
    so the full node set returns an identical graph. Edges leaving the subset
    are dropped. A disconnected result is allowed; check ``.connected``.
    """
    nodes = np.unique(np.asarray(sorted(node_subset), dtype=np.int64))
    if nodes.size == 0:
        raise GraphError("node subset is empty")
    if nodes[0] < 0 or nodes[-1] >= graph.num_nodes:
        raise GraphError("node subset contains ids outside the graph")
    local = -np.ones(graph.num_nodes, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)
    t, h = local[graph.tails], local[graph.heads]
    keep = (t >= 0) & (h >= 0)
    sub = Graph(
        num_nodes=nodes.size,
        edges=np.stack([t[keep], h[keep]], axis=1),
        coords=graph.coords[nodes],
        allow_disconnected=True,
    )
    nmap = NodeMap(to_global=nodes, to_local={int(g): i for i, g in enumerate(nodes)})
    return sub, nmap


def subgraph_edge_ids(graph: Graph, nmap: NodeMap) -> np.ndarray:
    """Global ids of the edges retained by :func:`extract_subgraph`."""
    inside = np.zeros(graph.num_nodes, dtype=bool)
    inside[nmap.to_global] = True
    return np.flatnonzero(inside[graph.tails] & inside[graph.heads])


def reindex(node_ids, coords, edges) -> tuple[Graph, dict]:
    """Build a graph from arbitrary (sparse) node ids.

    Returns the graph and the ``original id -> dense id`` map, which callers
    should persist next to derived artifacts.
    """
    node_ids = list(node_ids)
    id_map = {nid: k for k, nid in enumerate(node_ids)}
    if len(id_map) != len(node_ids):
        raise GraphError("node ids are not unique")
    try:
        dense = [(id_map[a], id_map[b]) for a, b in edges]
    except KeyError as exc:
        raise GraphError(f"edge references unknown node id {exc.args[0]!r}") from None
    return Graph(len(node_ids), np.array(dense, dtype=np.int64).reshape(-1, 2), coords), id_map


def _canonical_bytes(graph: Graph) -> bytes:
    return json.dumps(graph.to_dict(), separators=(",", ":")).encode()


def graph_hash(graph: Graph) -> str:
    """sha256 of the canonical file serialization written by :func:`save_graph`."""
    return hashlib.sha256(_canonical_bytes(graph)).hexdigest()


def save_graph(graph: Graph, path) -> str:
    data = _canonical_bytes(graph)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def graph_from_dict(doc: dict) -> Graph:
    unknown = set(doc) - set(GRAPH_FIELDS)
    if unknown:
        raise GraphError(f"unknown graph fields: {sorted(unknown)}")
    missing = [k for k in GRAPH_FIELDS if k not in doc]
    if missing:
        raise GraphError(f"missing graph fields: {missing}")
    return Graph(int(doc["num_nodes"]), np.array(doc["edges"], dtype=np.int64).reshape(-1, 2), doc["coords"])


def load_graph(path) -> Graph:
    return graph_from_dict(json.loads(Path(path).read_text()))
