"""Physically weighted spectral partitioning of a mesh into balanced subdomains.

Mesh edges carry a similarity that decays with spatial distance and with the
differences of training-averaged features and targets. The smallest
nontrivial eigenvectors of the weighted Laplacian embed the nodes, a
size-penalized k-means clusters the embedding, and a repair pass makes every
cluster connected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh

from .data import Dataset, compute_stats
from .graph import Graph, GraphError, graph_hash

__all__ = [
    "PartitionError",
    "SimilarityParams",
    "MeanFields",
    "Partition",
    "mean_fields",
    "median_bandwidths",
    "local_bandwidths",
    "edge_similarity",
    "similarity_matrix",
    "graph_laplacian",
    "spectral_embedding",
    "kmeans_pp_init",
    "balanced_kmeans",
    "repair_contiguity",
    "partition_mesh",
    "save_partition",
    "load_partition",
]

DENSE_LIMIT = 3000
EIG_TOL = 1e-8
MAX_LLOYD = 100


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityParams:
    sigma_x: float
    sigma_f: float
    sigma_y: float

    def __post_init__(self):
        for name in ("sigma_x", "sigma_f", "sigma_y"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")


@dataclass(frozen=True)
class MeanFields:
    """Per-node quantities compared across an edge."""

    coords: np.ndarray  # (V, 2)
    features: np.ndarray  # (V, 3) z-scored thickness, friction, bed
    targets: np.ndarray  # (V, 2) z-scored velocity


def mean_fields(dataset: Dataset, stats=None) -> MeanFields:
    """Average training features and targets over samples, then z-score them."""
    train = dataset.split("train")
    if not train:
        raise PartitionError("partitioning needs a non-empty training split")
    stats = compute_stats(train) if stats is None else stats
    if train[0].normalized:
        feats = np.mean([s.node_features for s in train], axis=0)
        targ = np.mean([s.targets for s in train], axis=0)
    else:
        feats = (np.mean([s.node_features for s in train], axis=0) - stats.mu) / stats.sigma
        targ = (np.mean([s.targets for s in train], axis=0) - stats.target_mu) / stats.target_sigma
    # thickness, friction, bed
    return MeanFields(dataset.graph.coords, feats[:, [0, 2, 1]], targ)


def _differences(graph: Graph, fields: MeanFields):
    t, h = graph.tails, graph.heads
    dx = ((fields.coords[h] - fields.coords[t]) ** 2).sum(1)
    df = ((fields.features[h] - fields.features[t]) ** 2).sum(1)
    dy = ((fields.targets[h] - fields.targets[t]) ** 2).sum(1)
    return dx, df, dy


def median_bandwidths(graph: Graph, fields: MeanFields) -> SimilarityParams:
    """Bandwidths set to the median edge difference norm of each quantity."""
    sig = []
    for d2 in _differences(graph, fields):
        norms = np.sqrt(d2)
        s = float(np.median(norms))
        if not s > 0:
            s = float(norms.mean()) if norms.mean() > 0 else 1.0
        sig.append(s)
    return SimilarityParams(*sig)


def local_bandwidths(graph: Graph, fields: MeanFields, params: SimilarityParams) -> np.ndarray:
    """Per-node bandwidths, shape (3, V): ``max(sigma, median incident difference norm)``.

    Nodes that differ from all of their neighbors get a wider kernel, so they
    stay attached to the similarity graph instead of each trapping one of the
    smallest Laplacian eigenvectors. Elsewhere this is just ``params``.
    """
    V = graph.num_nodes
    t, h = graph.tails, graph.heads
    ends = np.concatenate([t, h])
    order = np.argsort(ends, kind="stable")
    counts = np.bincount(ends, minlength=V)
    slot = np.arange(ends.size) - np.repeat(np.cumsum(counts) - counts, counts)
    out = np.empty((3, V))
    for q, (d2, sigma) in enumerate(zip(_differences(graph, fields), (params.sigma_x, params.sigma_f, params.sigma_y))):
        pad = np.full((V, max(int(counts.max()), 1)), np.nan)
        pad[ends[order], slot] = np.sqrt(np.concatenate([d2, d2]))[order]
        med = np.nanmedian(pad, axis=1) if ends.size else np.zeros(V)
        out[q] = np.maximum(sigma, np.nan_to_num(med))
    return out


def _kernel(dx, df, dy, scale2):
    return np.exp(-dx / scale2[0]) * np.exp(-df / scale2[1]) * np.exp(-dy / scale2[2])


def edge_similarity(
    u: int, v: int, fields: MeanFields, params: SimilarityParams, graph: Graph, local: np.ndarray | None = None
) -> float:
    """``W_uv``; with per-node ``local`` bandwidths each squared sigma becomes ``sigma_u * sigma_v``."""
    e = graph.edges
    if not np.any(((e[:, 0] == u) & (e[:, 1] == v)) | ((e[:, 0] == v) & (e[:, 1] == u))):
        raise PartitionError(f"({u}, {v}) is not a mesh edge")
    dx = float(((fields.coords[u] - fields.coords[v]) ** 2).sum())
    df = float(((fields.features[u] - fields.features[v]) ** 2).sum())
    dy = float(((fields.targets[u] - fields.targets[v]) ** 2).sum())
    if local is None:
        scale2 = np.array([params.sigma_x, params.sigma_f, params.sigma_y]) ** 2
    else:
        scale2 = local[:, u] * local[:, v]
    return float(_kernel(dx, df, dy, scale2))


def similarity_matrix(
    graph: Graph, fields: MeanFields, params: SimilarityParams, local: np.ndarray | None = None
) -> sp.csr_matrix:
    """Symmetric sparse similarity with support on the mesh edges."""
    dx, df, dy = _differences(graph, fields)
    t, h = graph.tails, graph.heads
    if local is None:
        scale2 = np.array([params.sigma_x, params.sigma_f, params.sigma_y])[:, None] ** 2
    else:
        scale2 = local[:, t] * local[:, h]
    w = _kernel(dx, df, dy, scale2)
    V = graph.num_nodes
    W = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([t, h]), np.concatenate([h, t]))), shape=(V, V))
    return W.tocsr()


def graph_laplacian(W) -> sp.csr_matrix:
    W = sp.csr_matrix(W, dtype=np.float64)
    if W.shape[0] != W.shape[1]:
        raise PartitionError(f"similarity matrix must be square, got {W.shape}")
    asym = abs(W - W.T)
    if asym.nnz and asym.max() > 1e-12 * max(abs(W).max(), 1.0):
        raise PartitionError("similarity matrix is not symmetric")
    if W.nnz and W.data.min() < 0:
        raise PartitionError("similarity matrix has negative entries")
    if np.any(W.diagonal() != 0):
        raise PartitionError("similarity matrix must have a zero diagonal")
    D = sp.diags(np.asarray(W.sum(axis=1)).ravel())
    return (D - W).tocsr()


def _fix_signs(vecs):
    for c in range(vecs.shape[1]):
        col = vecs[:, c]
        nz = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            vecs[:, c] = -col
    return vecs


def spectral_embedding(L, m: int) -> np.ndarray:
    """Eigenvectors of the ``m`` smallest nonzero eigenvalues of ``L``, shape (V, m)."""
    L = sp.csr_matrix(L)
    V = L.shape[0]
    if m < 1 or m >= V:
        raise ValueError(f"m must be in [1, {V - 1}], got {m}")
    off = L - sp.diags(L.diagonal())
    off.eliminate_zeros()
    ncomp, _ = connected_components(off, directed=False)
    if ncomp > 1:
        raise PartitionError(f"similarity graph is disconnected ({ncomp} components)")
    if V <= DENSE_LIMIT:
        vals, vecs = np.linalg.eigh(L.toarray())
        vals, vecs = vals[: m + 1], vecs[:, : m + 1]
    else:
        shift = -1e-3 * float(L.diagonal().mean())
        vals, vecs = eigsh(L.tocsc(), k=m + 1, sigma=shift, which="LM", tol=EIG_TOL)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    # weakly cut graphs can make the kernel numerically degenerate; centering
    # removes whatever constant component the solver mixed in
    emb = vecs[:, 1:]
    emb = emb - emb.mean(axis=0)
    emb /= np.linalg.norm(emb, axis=0)
    return _fix_signs(emb)


def kmeans_pp_init(points, k: int, rng) -> np.ndarray:
    """k-means++ seeding; returns (k, m) centroids."""
    X = np.asarray(points, dtype=np.float64)
    N = len(X)
    centers = [X[rng.integers(N)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(N, p=d2 / total) if total > 0 else rng.integers(N)
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(1))
    return np.array(centers)


def _assign(d2, penalty, target, order):
    N, k = d2.shape
    labels = np.empty(N, dtype=np.int64)
    if penalty == 0:
        return d2.argmin(axis=1)
    counts = [0] * k
    rows = d2.tolist()
    for i in order.tolist():
        row = rows[i]
        best, best_cost = 0, None
        for j in range(k):
            cost = row[j] + penalty * max(0.0, counts[j] - target)
            if best_cost is None or cost < best_cost:
                best, best_cost = j, cost
        labels[i] = best
        counts[best] += 1
    return labels


def balanced_kmeans(points, k: int, penalty: float = 0.0, seed=0, init=None) -> np.ndarray:
    """Lloyd iterations with a soft size penalty on over-full clusters.

    A point joins the cluster minimizing ``|x - c_j|^2 + penalty * max(0, n_j - N/k)``
    where ``n_j`` counts points already placed in this pass (random order).
    """
    if k < 2:
        raise ValueError("balanced_kmeans needs k >= 2")
    if penalty < 0:
        raise ValueError("penalty must be >= 0")
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    N = len(X)
    if N < k:
        raise ValueError(f"cannot form {k} clusters from {N} points")
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, k, rng) if init is None else np.array(init, dtype=np.float64)
    labels = None
    for _ in range(MAX_LLOYD):
        d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        new = _assign(d2, penalty, N / k, rng.permutation(N))
        for j in range(k):
            if not np.any(new == j):
                # farthest point among clusters that can spare one
                cost = d2[np.arange(N), new].copy()
                cost[np.bincount(new, minlength=k)[new] < 2] = -np.inf
                far = int(np.argmax(cost))
                new[far] = j
                C[j] = X[far]
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            C[j] = X[labels == j].mean(axis=0)
    return labels


def _fragments(graph: Graph, labels, c):
    nodes = np.flatnonzero(labels == c)
    if nodes.size == 0:
        return []
    t, h = graph.tails, graph.heads
    keep = (labels[t] == c) & (labels[h] == c)
    pos = np.full(graph.num_nodes, -1)
    pos[nodes] = np.arange(nodes.size)
    A = sp.coo_matrix((np.ones(keep.sum()), (pos[t[keep]], pos[h[keep]])), shape=(nodes.size,) * 2)
    n, comp = connected_components(A, directed=False)
    return [nodes[comp == i] for i in range(n)]


def repair_contiguity(graph: Graph, labels, W: sp.csr_matrix, k: int) -> np.ndarray:
    """Move every non-largest fragment of a cluster to its best-connected neighbor cluster."""
    labels = np.array(labels, copy=True)
    for _ in range(graph.num_nodes):
        moved = False
        for c in range(k):
            frags = _fragments(graph, labels, c)
            if len(frags) <= 1:
                continue
            frags.sort(key=len, reverse=True)
            for frag in frags[1:]:
                sub = W[frag]
                weight = np.zeros(k)
                np.add.at(weight, labels[sub.indices], sub.data)
                weight[c] = -np.inf
                if not np.isfinite(weight.max()) or weight.max() <= 0:
                    # zero-weight boundary: fall back to neighbor counts
                    weight = np.bincount(labels[sub.indices], minlength=k).astype(float)
                    weight[c] = -np.inf
                labels[frag] = int(np.argmax(weight))
                moved = True
        if not moved:
            return labels
    raise PartitionError(f"contiguity repair did not converge in {graph.num_nodes} iterations")


def _grow(graph: Graph, nodes, hops):
    A = graph.ops.abs_d0T @ abs(graph.ops.d0)
    mask = np.zeros(graph.num_nodes, dtype=bool)
    mask[nodes] = True
    for _ in range(hops):
        mask = mask | (A @ mask.astype(float) > 0)
    return np.flatnonzero(mask)


@dataclass
class Partition:
    labels: np.ndarray
    k: int
    balance_report: dict = field(default_factory=dict)
    contiguous: list = field(default_factory=list)
    overlap_hops: int = 0
    graph_hash: str | None = None
    members: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise PartitionError(f"labels must lie in 0..{self.k - 1}")
        if not self.members:
            self.members = [np.flatnonzero(self.labels == c) for c in range(self.k)]

    def subdomain(self, i: int) -> np.ndarray:
        """Global node ids of subdomain ``i``, including overlap."""
        return self.members[i]

    def to_dict(self):
        return {
            "k": self.k,
            "labels": self.labels.tolist(),
            "overlap_hops": self.overlap_hops,
            "balance_report": self.balance_report,
            "contiguous": [bool(c) for c in self.contiguous],
            "graph_hash": self.graph_hash,
        }


def _balance(labels, k, penalty):
    sizes = np.bincount(labels, minlength=k)
    target = labels.size / k
    return {
        "sizes": sizes.tolist(),
        "target": target,
        "max_rel_deviation": float(np.max(np.abs(sizes - target)) / target),
        "penalty": float(penalty),
    }


def build_partition(graph: Graph, labels, k, penalty=0.0, overlap_hops=0) -> Partition:
    labels = np.asarray(labels, dtype=np.int64)
    contiguous = [len(_fragments(graph, labels, c)) == 1 for c in range(k)]
    members = [np.flatnonzero(labels == c) for c in range(k)]
    if overlap_hops:
        members = [_grow(graph, m, overlap_hops) for m in members]
    return Partition(labels, k, _balance(labels, k, penalty), contiguous, overlap_hops, graph_hash(graph), members)


def partition_mesh(
    graph: Graph,
    dataset: Dataset,
    k: int,
    params: SimilarityParams | None = None,
    seed=0,
    m: int | None = None,
    penalty_scale: float = 1.0,
    overlap_hops: int = 0,
    local_scaling: bool = True,
) -> Partition:
    """Spectral partition into ``k`` contiguous, roughly balanced subdomains.

    ``m`` is the embedding dimension (default ``k - 1``). The k-means size
    penalty is ``penalty_scale`` times the embedding spread divided by a
    20% overshoot of the target cluster size. ``local_scaling`` widens the
    kernel around nodes unlike all their neighbors (see ``local_bandwidths``).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if overlap_hops < 0:
        raise ValueError("overlap_hops must be >= 0")
    V = graph.num_nodes
    if k == 1:
        return build_partition(graph, np.zeros(V, dtype=np.int64), 1, 0.0, overlap_hops)
    fields = mean_fields(dataset)
    params = median_bandwidths(graph, fields) if params is None else params
    local = local_bandwidths(graph, fields, params) if local_scaling else None
    W = similarity_matrix(graph, fields, params, local)
    emb = spectral_embedding(graph_laplacian(W), k - 1 if m is None else m)
    spread = float(((emb - emb.mean(0)) ** 2).sum(1).mean())
    penalty = penalty_scale * spread / (0.2 * V / k)
    labels = balanced_kmeans(emb, k, penalty, seed)
    labels = repair_contiguity(graph, labels, W, k)
    return build_partition(graph, labels, k, penalty, overlap_hops)


def save_partition(part: Partition, path):
    with open(path, "w") as fh:
        json.dump(part.to_dict(), fh, indent=1)


def load_partition(path, graph: Graph | None = None) -> Partition:
    with open(path) as fh:
        doc = json.load(fh)
    missing = {"k", "labels", "overlap_hops", "balance_report", "graph_hash"} - set(doc)
    if missing:
        raise PartitionError(f"partition file missing fields: {sorted(missing)}")
    if graph is not None and doc["graph_hash"] != graph_hash(graph):
        raise GraphError("partition refers to a different graph (hash mismatch)")
    labels = np.asarray(doc["labels"], dtype=np.int64)
    k = int(doc["k"])
    hops = int(doc["overlap_hops"])
    members = []
    if graph is not None:
        members = [np.flatnonzero(labels == c) for c in range(k)]
        if hops:
            members = [_grow(graph, mm, hops) for mm in members]
    return Partition(labels, k, doc["balance_report"], doc.get("contiguous", []), hops, doc["graph_hash"], members)
