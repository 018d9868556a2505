"""Attention-derived diagonal metrics on node and edge feature spaces.

For an edge ``(i, j)`` and head ``h`` the edge weight is

    exp(W_h q_i . K_h q_j + W_h q_j . K_h q_i)

and the multi-head edge metric is the mean over heads. Each node weight is
the sum of the weights of its incident edges, so ``a1 / a0[i]`` is a
row-stochastic attention over the neighborhood of ``i``.

Kernels accept latent arrays shaped ``(V, *batch, N_f)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, apply_sparse

__all__ = [
    "EXP_CAP",
    "AttentionParams",
    "MetricPair",
    "MetricOverflowError",
    "edge_metric",
    "node_metric",
    "attention",
    "attention_laplacian_apply",
    "metric_forward",
    "metric_backward",
]

# exponents are clamped here before exponentiation
EXP_CAP = 40.0


class MetricOverflowError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AttentionParams:
    """Query/key embeddings, stacked per head as ``(H, N_h, N_f)``."""

    W: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        K = np.asarray(self.K, dtype=np.float64)
        if W.ndim == 2:
            W, K = W[None], K[None]
        if W.shape != K.shape or W.ndim != 3:
            raise ValueError(f"W and K must share shape (H, N_h, N_f); got {W.shape} and {K.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(K))):
            raise ValueError("attention weights must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "K", K)

    @property
    def heads(self):
        return self.W.shape[0]

    @property
    def hidden(self):
        return self.W.shape[1]

    @property
    def latent(self):
        return self.W.shape[2]


@dataclass(frozen=True)
class MetricPair:
    a1_diag: np.ndarray  # (E, *batch)
    a0_diag: np.ndarray  # (V, *batch)
    clamped: int = 0


def _head_exponents(qi, qj, params):
    """Per-head exponents for matched rows of ``qi`` and ``qj``; shape (..., H)."""
    a = np.einsum("hnf,...f->...hn", params.W, qi)
    b = np.einsum("hnf,...f->...hn", params.K, qj)
    c = np.einsum("hnf,...f->...hn", params.W, qj)
    d = np.einsum("hnf,...f->...hn", params.K, qi)
    return (a * b).sum(-1) + (c * d).sum(-1)


def edge_metric(q, params: AttentionParams, edge) -> float:
    """Edge weight for a single edge ``(i, j)``; symmetric in ``i`` and ``j``."""
    i, j = edge
    q = np.asarray(q, dtype=np.float64)
    s = _head_exponents(q[i], q[j], params)
    if not np.all(np.isfinite(s)):
        raise MetricOverflowError(f"non-finite attention exponent on edge ({i}, {j})")
    return float(np.exp(np.minimum(s, EXP_CAP)).mean())


def _head_forms(params: AttentionParams):
    """Symmetric per-head forms ``M_h = W_h^T K_h + K_h^T W_h``, stacked as (N_f, H * N_f)."""
    M = np.einsum("hnf,hng->hfg", params.W, params.K)
    M = M + M.transpose(0, 2, 1)
    return np.concatenate(list(M), axis=1)


def metric_forward(ops, q, params: AttentionParams):
    """Vectorized metric over all edges.

    Returns ``(a1, a0, cache)`` where ``a1`` has shape ``(E, *batch)`` and
    ``a0`` has shape ``(V, *batch)``. ``cache`` feeds :func:`metric_backward`.
    """
    H, Nf = params.heads, params.latent
    Z = q @ _head_forms(params)  # (V, *batch, H * N_f)
    t, h = ops.tails, ops.heads
    qh = q[h]
    s = np.einsum("...hf,...f->...h", Z[t].reshape(qh.shape[:-1] + (H, Nf)), qh)
    if not np.all(np.isfinite(s)):
        raise MetricOverflowError("non-finite attention exponent")
    live = s < EXP_CAP
    m = np.exp(np.minimum(s, EXP_CAP))
    a1 = m.mean(-1)
    a0 = apply_sparse(ops.abs_d0T, a1)
    cache = (q, Z, m, live, params)
    return a1, a0, cache


def metric_backward(ops, cache, g_a1=None, g_a0=None):
    """Pull back cotangents of ``(a1, a0)`` to ``(q, W, K)``.

    The ``Z`` slot of ``cache`` may be ``None``; it is then rebuilt from ``q``.
    """
    q, Z, m, live, params = cache
    H, Nf = params.heads, params.latent
    if Z is None:
        Z = q @ _head_forms(params)
    if g_a1 is None:
        g_a1 = np.zeros(m.shape[:-1])
    if g_a0 is not None:
        g_a1 = g_a1 + g_a0[ops.tails] + g_a0[ops.heads]
    g_s = (g_a1[..., None] / H) * m * live  # (E, *batch, H)
    t, h = ops.tails, ops.heads
    qt, qh = q[t], q[h]
    zshape = qt.shape[:-1] + (H, Nf)
    # d s / d q_t = M q_h and d s / d q_h = M q_t, summed over heads
    gt = np.einsum("...h,...hf->...f", g_s, Z[h].reshape(zshape))
    gh = np.einsum("...h,...hf->...f", g_s, Z[t].reshape(zshape))
    gq = apply_sparse(ops.tail_T, gt) + apply_sparse(ops.head_T, gh)
    qt2 = qt.reshape(-1, Nf)
    qh2 = qh.reshape(-1, Nf)
    gs2 = g_s.reshape(-1, H)
    gW = np.empty_like(params.W)
    gK = np.empty_like(params.K)
    for k in range(H):
        G = (gs2[:, k, None] * qt2).T @ qh2
        G += G.T
        gW[k] = params.K[k] @ G
        gK[k] = params.W[k] @ G
    return gq, gW, gK


def node_metric(q, params: AttentionParams, graph: Graph) -> MetricPair:
    q = np.asarray(q, dtype=np.float64)
    a1, a0, cache = metric_forward(graph.ops, q, params)
    clamped = int((~cache[3]).sum())
    return MetricPair(a1_diag=a1, a0_diag=a0, clamped=clamped)


def _edge_index(graph: Graph, i, j):
    e = graph.edges
    hit = np.flatnonzero(((e[:, 0] == i) & (e[:, 1] == j)) | ((e[:, 0] == j) & (e[:, 1] == i)))
    if hit.size == 0:
        raise KeyError(f"({i}, {j}) is not an edge")
    return int(hit[0])


def attention(q, params: AttentionParams, graph: Graph, i, j, metric: MetricPair | None = None):
    """Row-normalized attention ``a1(i, j) / a0(i)``."""
    alpha = _edge_index(graph, i, j)
    if metric is None:
        metric = node_metric(q, params, graph)
    return float(metric.a1_diag[alpha] / metric.a0_diag[i])


def attention_laplacian_apply(q_metric, v, params: AttentionParams, graph: Graph, form="sum"):
    """Apply the attention Laplacian built from ``q_metric`` to ``v``.

    ``form="sum"`` evaluates ``sum_j att(i, j) (v_i - v_j)`` edge by edge;
    ``form="operator"`` evaluates ``A0^-1 d0^T A1 d0 v`` with sparse products.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != graph.num_nodes:
        raise ValueError(f"v must have {graph.num_nodes} rows, got {v.shape[0]}")
    metric = node_metric(q_metric, params, graph)
    a1, a0 = metric.a1_diag, metric.a0_diag
    ops = graph.ops
    tail_shape = (-1,) + (1,) * (v.ndim - 1)
    if form == "operator":
        dv = apply_sparse(ops.d0, v)
        return apply_sparse(ops.d0T, a1.reshape(tail_shape) * dv) / a0.reshape(tail_shape)
    if form != "sum":
        raise ValueError(f"unknown form {form!r}")
    out = np.zeros_like(v)
    t, h = ops.tails, ops.heads
    w = a1.reshape(tail_shape)
    diff = v[t] - v[h]
    np.add.at(out, t, w * diff)
    np.add.at(out, h, -w * diff)
    return out / a0.reshape(tail_shape)
