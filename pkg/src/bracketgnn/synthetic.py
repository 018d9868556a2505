"""Desk-scale stand-in for a glacier simulation ensemble.

A jittered grid is Delaunay-triangulated into the mesh graph. Bed, thickness
and friction are built from smooth random fields, and velocities come from a
local analytic oracle

    u = -c * H**a * |grad s|**(a - 1) * grad s / mu,   s = b + H

with ``grad s`` reconstructed per node by weighted least squares. Ice flows
towards ``x = side``, where the bed drops below sea level and ice floats.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import Delaunay, QhullError

from .data import Dataset, Sample, assign_splits
from .graph import Graph, GraphError, apply_sparse

__all__ = [
    "SyntheticConfig",
    "FLOTATION_RATIO",
    "delaunay_graph",
    "generate_mesh",
    "combinatorial_laplacian",
    "smoothing_params",
    "smooth_noise",
    "sample_smooth_field",
    "surface_gradient",
    "oracle_velocity",
    "build_dataset",
    "planted_partition_dataset",
]

# ice / sea-water density ratio
FLOTATION_RATIO = 0.917 / 1.028

# smoothing passes of (I + tau * Lap)^-1 per field
SMOOTHING_PASSES = 2


@dataclass(frozen=True)
class SyntheticConfig:
    num_nodes: int = 2000
    side: float = 50_000.0
    friction_length: float = 8_000.0
    num_realizations: int = 25
    num_snapshots: int = 10
    seed: int = 0
    flow_exponent: float = 3.0
    sliding_coeff: float = 0.01
    jitter: float = 0.3
    friction_logstd: float = 0.5
    thickness_amp: float = 4.0
    thickness_length: float = 15_000.0
    bed_amp: float = 2.0
    bed_length: float = 10_000.0
    n_val: int | None = None
    n_test: int | None = None

    def __post_init__(self):
        for name in ("num_nodes", "num_realizations", "num_snapshots"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("side", "friction_length", "thickness_length", "bed_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def splits(self):
        n_val = self.num_realizations // 5 if self.n_val is None else self.n_val
        n_test = self.num_realizations // 5 if self.n_test is None else self.n_test
        return n_val, n_test

    def to_dict(self):
        return asdict(self)


def _rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def delaunay_graph(points) -> Graph:
    """Graph of the Delaunay triangulation; edges ``(i, j)`` with ``i < j``, sorted."""
    points = np.asarray(points, dtype=np.float64)
    try:
        tri = Delaunay(points)
    except QhullError as exc:
        raise GraphError(f"degenerate triangulation: {exc}") from None
    if len(getattr(tri, "coplanar", [])):
        raise GraphError("triangulation dropped coincident points")
    s = tri.simplices
    pairs = np.concatenate([s[:, [0, 1]], s[:, [1, 2]], s[:, [0, 2]]])
    pairs.sort(axis=1)
    edges = np.unique(pairs, axis=0)
    return Graph(len(points), edges, points)


def generate_mesh(cfg: SyntheticConfig, attempts: int = 5) -> Graph:
    """Jittered grid over the square domain, Delaunay-triangulated."""
    if cfg.num_nodes < 16:
        raise ValueError("generate_mesh needs at least 16 nodes")
    n = cfg.num_nodes
    nx = int(np.ceil(np.sqrt(n)))
    ny = int(np.ceil(n / nx))
    dy = cfg.side / (ny - 1)
    k = np.arange(n)
    col, row = k % nx, k // nx
    # the top row may be short; spread it over the full width
    width = np.where(row == ny - 1, n - (ny - 1) * nx, nx)
    step = cfg.side / np.maximum(width - 1, 1)
    base = np.stack([col * step, row * dy], axis=1)
    # boundary nodes only move along their edge, so the hull stays the square
    free = np.stack([(col > 0) & (col < width - 1), (row > 0) & (row < ny - 1)], axis=1)
    scale = np.stack([step, np.full(n, dy)], axis=1) * free
    last = None
    for attempt in range(attempts):
        rng = _rng(cfg.seed, 0, attempt)
        pts = base + rng.uniform(-cfg.jitter, cfg.jitter, size=base.shape) * scale
        try:
            return delaunay_graph(pts)
        except GraphError as exc:
            last = exc
    raise GraphError(f"mesh generation failed after {attempts} attempts: {last}")


def combinatorial_laplacian(graph: Graph) -> sp.csr_matrix:
    d0 = graph.ops.d0
    return (d0.T @ d0).tocsr()


def _correlation_at(graph, lap, tau, length, probes):
    lu = splu((sp.identity(graph.num_nodes, format="csc") + tau * lap).tocsc())
    rho = []
    for i in probes:
        c = np.zeros(graph.num_nodes)
        c[i] = 1.0
        for _ in range(2 * SMOOTHING_PASSES):
            c = lu.solve(c)
        dist = np.linalg.norm(graph.coords - graph.coords[i], axis=1)
        ring = (dist > 0.9 * length) & (dist < 1.1 * length)
        if ring.any():
            rho.append(c[ring].mean() / c[i])
    return float(np.mean(rho)) if rho else 0.0


def smoothing_params(graph: Graph, length: float, target: float = 0.5) -> tuple[int, float]:
    """Fit ``(passes, tau)`` so the field correlation at ``length`` is ``target``.

    Works on the exact covariance ``(I + tau Lap)^(-2 passes)`` seen from a
    few interior probe nodes; ``tau`` is found by bisection in log-space.
    """
    lap = combinatorial_laplacian(graph)
    centre = graph.coords.mean(axis=0)
    probes = np.argsort(np.linalg.norm(graph.coords - centre, axis=1))[:4]
    lo, hi = -4.0, 12.0
    if _correlation_at(graph, lap, 10.0**hi, length, probes) < target:
        return SMOOTHING_PASSES, 10.0**hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _correlation_at(graph, lap, 10.0**mid, length, probes) < target:
            lo = mid
        else:
            hi = mid
    return SMOOTHING_PASSES, 10.0**hi


def smooth_noise(graph: Graph, tau: float, passes: int, rng) -> np.ndarray:
    """White noise smoothed by ``passes`` solves with ``I + tau Lap`` (not standardized)."""
    lap = combinatorial_laplacian(graph)
    lu = splu((sp.identity(graph.num_nodes, format="csc") + tau * lap).tocsc())
    f = rng.standard_normal(graph.num_nodes)
    for _ in range(passes):
        f = lu.solve(f)
    if not np.all(np.isfinite(f)):
        raise FloatingPointError("smoothing solve produced non-finite values")
    return f


def _standardize(f):
    s = f.std()
    return (f - f.mean()) / s if s > 0 else f - f.mean()


def sample_smooth_field(graph: Graph, length: float, seed=0, params=None) -> np.ndarray:
    """Zero-mean, unit-variance smooth random field with the given correlation length."""
    passes, tau = smoothing_params(graph, length) if params is None else params
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _standardize(smooth_noise(graph, tau, passes, rng))


def surface_gradient(s, graph: Graph) -> np.ndarray:
    """Per-node gradient of a nodal field by inverse-distance weighted least squares.

    Nodes whose edge stencil is (near) collinear fall back to the average of
    the directional edge slopes.
    """
    s = np.asarray(s, dtype=np.float64)
    ops = graph.ops
    d = graph.coords[ops.heads] - graph.coords[ops.tails]
    ds = s[ops.heads] - s[ops.tails]
    r2 = (d**2).sum(axis=1)
    w = 1.0 / r2
    outer = (w[:, None, None] * d[:, :, None] * d[:, None, :]).reshape(-1, 4)
    A = apply_sparse(ops.abs_d0T, outer).reshape(-1, 2, 2)
    rhs = apply_sparse(ops.abs_d0T, (w * ds)[:, None] * d)
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    tr = A[:, 0, 0] + A[:, 1, 1]
    ok = det > 1e-10 * tr**2
    g = np.zeros((graph.num_nodes, 2))
    if ok.any():
        g[ok] = np.linalg.solve(A[ok], rhs[ok][..., None])[..., 0]
    if not ok.all():
        slope = (ds / r2)[:, None] * d
        deg = apply_sparse(ops.abs_d0T, np.ones(len(d)))
        avg = apply_sparse(ops.abs_d0T, slope) / np.maximum(deg, 1)[:, None]
        g[~ok] = avg[~ok]
    return g


def oracle_velocity(H, b, mu, graph: Graph, a: float = 3.0, c: float = 0.01) -> np.ndarray:
    H, b, mu = (np.asarray(v, dtype=np.float64) for v in (H, b, mu))
    if np.any(H < 0):
        raise ValueError("thickness must be non-negative")
    if np.any(mu <= 0):
        raise ValueError("friction must be positive")
    g = surface_gradient(b + H, graph)
    norm = np.sqrt((g**2).sum(axis=1))
    scale = c * H**a * norm ** (a - 1) / mu
    return -scale[:, None] * g


def _profiles(graph, cfg):
    x = graph.coords[:, 0] / cfg.side
    bed = 700.0 - 1200.0 * x
    thick = 1600.0 * np.sqrt(np.clip(1.0 - 0.85 * x, 0.0, None)) - 200.0 * x
    return bed, thick


def build_dataset(cfg: SyntheticConfig, graph: Graph | None = None) -> Dataset:
    """Realizations differ in friction; snapshots differ in a smooth thickness signal."""
    graph = generate_mesh(cfg) if graph is None else graph
    fric_p = smoothing_params(graph, cfg.friction_length)
    thick_p = smoothing_params(graph, cfg.thickness_length)
    bed_p = smoothing_params(graph, cfg.bed_length)
    bed0, thick0 = _profiles(graph, cfg)
    bed = bed0 + cfg.bed_amp * sample_smooth_field(graph, cfg.bed_length, _rng(cfg.seed, 1), bed_p)
    lengths = graph.edge_lengths()[:, None]
    samples = []
    for r in range(cfg.num_realizations):
        mu = np.exp(cfg.friction_logstd * sample_smooth_field(graph, cfg.friction_length, _rng(cfg.seed, 2, r), fric_p))
        xi1 = sample_smooth_field(graph, cfg.thickness_length, _rng(cfg.seed, 3, r), thick_p)
        xi2 = sample_smooth_field(graph, cfg.thickness_length, _rng(cfg.seed, 4, r), thick_p)
        for t in range(cfg.num_snapshots):
            phase = 2.0 * np.pi * t / cfg.num_snapshots
            H = thick0 + cfg.thickness_amp * (np.cos(phase) * xi1 + np.sin(phase) * xi2)
            H = np.maximum(H, 1.0)
            floating = (bed + FLOTATION_RATIO * H < 0).astype(float)
            feats = np.stack([H, bed, mu, 1.0 - floating, floating], axis=1)
            u = oracle_velocity(H, bed, mu, graph, cfg.flow_exponent, cfg.sliding_coeff)
            samples.append(Sample(feats, lengths, u, r, t))
    n_val, n_test = cfg.splits()
    splits = assign_splits(range(cfg.num_realizations), n_val, n_test, _rng(cfg.seed, 5))
    return Dataset(graph, samples, splits)


def planted_partition_dataset(num_nodes=2000, k=3, seed=0, num_realizations=4, side=50_000.0):
    """Mesh split into ``k`` vertical strips with distinct velocity levels.

    Returns ``(dataset, labels)`` where ``labels`` are the planted strip ids.
    """
    cfg = SyntheticConfig(num_nodes=num_nodes, side=side, seed=seed, num_realizations=num_realizations, num_snapshots=1)
    graph = generate_mesh(cfg)
    x = graph.coords[:, 0]
    labels = np.minimum((k * (x - x.min()) / (np.ptp(x) + 1e-9)).astype(int), k - 1)
    rng = _rng(seed, 7)
    lengths = graph.edge_lengths()[:, None]
    samples = []
    for r in range(num_realizations):
        H = 1000.0 + 5.0 * rng.standard_normal(num_nodes)
        bed = np.where(labels == k - 1, -1000.0, 200.0) + 5.0 * rng.standard_normal(num_nodes)
        mu = np.exp(0.05 * rng.standard_normal(num_nodes))
        floating = (bed + FLOTATION_RATIO * H < 0).astype(float)
        feats = np.stack([H, bed, mu, 1.0 - floating, floating], axis=1)
        u = np.stack([100.0 * (1 + labels), 20.0 * labels], axis=1) + 10.0 * rng.standard_normal((num_nodes, 2))
        samples.append(Sample(feats, lengths, u, r, 0))
    splits = {r: "train" for r in range(num_realizations)}
    return Dataset(graph, samples, splits), labels
