"""Per-node features, global normalization statistics and dataset I/O.

Node features are, in column order: ice thickness [m], bed topography [m],
basal friction, grounded flag, floating flag. Continuous columns and the two
velocity targets are z-scored; edge lengths are min-max scaled; the two
Boolean flags pass through untouched.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import Graph, graph_hash, load_graph, save_graph

__all__ = [
    "FEATURES",
    "CONTINUOUS",
    "FLAGS",
    "Sample",
    "NormStats",
    "Dataset",
    "DataError",
    "compute_stats",
    "zscore",
    "minmax",
    "normalize_sample",
    "denormalize_predictions",
    "assign_splits",
    "write_dataset",
    "load_dataset",
]

FEATURES = ("thickness", "bed", "friction", "grounded", "floating")
CONTINUOUS = (0, 1, 2)
FLAGS = (3, 4)
SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    """One snapshot of one realization on a fixed graph.

    ``normalized`` marks samples produced by :func:`normalize_sample`; raw
    physical invariants are only checked on raw samples.
    """

    node_features: np.ndarray  # (V, 5)
    edge_features: np.ndarray  # (E, 1)
    targets: np.ndarray  # (V, 2)
    realization: int = 0
    snapshot: int = 0
    normalized: bool = False

    def __post_init__(self):
        nf = np.asarray(self.node_features, dtype=np.float64)
        ef = np.asarray(self.edge_features, dtype=np.float64).reshape(-1, 1)
        tg = np.asarray(self.targets, dtype=np.float64)
        if nf.ndim != 2 or nf.shape[1] != len(FEATURES):
            raise DataError(f"node_features must be (V, {len(FEATURES)}), got {nf.shape}")
        if tg.shape != (nf.shape[0], 2):
            raise DataError(f"targets must be ({nf.shape[0]}, 2), got {tg.shape}")
        for a in (nf, ef, tg):
            a.setflags(write=False)
        object.__setattr__(self, "node_features", nf)
        object.__setattr__(self, "edge_features", ef)
        object.__setattr__(self, "targets", tg)
        if not self.normalized:
            self.validate()

    @property
    def num_nodes(self):
        return self.node_features.shape[0]

    @property
    def num_edges(self):
        return self.edge_features.shape[0]

    def validate(self, graph: Graph | None = None):
        nf = self.node_features
        flags = nf[:, FLAGS]
        if not np.all((flags == 0) | (flags == 1)):
            raise DataError("grounded/floating flags must be 0 or 1")
        if not np.all(flags.sum(axis=1) == 1):
            raise DataError("exactly one of grounded/floating must be set per node")
        if np.any(nf[:, 0] < 0):
            raise DataError("ice thickness must be non-negative")
        if np.any(nf[:, 2] <= 0):
            raise DataError("basal friction must be positive")
        if np.any(self.edge_features <= 0):
            raise DataError("edge lengths must be positive")
        if graph is not None:
            self.check_shapes(graph)

    def check_shapes(self, graph: Graph):
        if self.num_nodes != graph.num_nodes or self.num_edges != graph.num_edges:
            raise DataError(
                f"sample is ({self.num_nodes} nodes, {self.num_edges} edges) but graph is "
                f"({graph.num_nodes}, {graph.num_edges})"
            )


@dataclass(frozen=True)
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray
    dist_min: float
    dist_max: float
    target_mu: np.ndarray
    target_sigma: np.ndarray

    def __post_init__(self):
        for name in ("mu", "sigma", "target_mu", "target_sigma"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.sigma <= 0) or np.any(self.target_sigma <= 0):
            raise DataError("standard deviations must be positive")
        if not self.dist_max > self.dist_min:
            raise DataError("dist_max must exceed dist_min")

    def to_dict(self):
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "dist_min": float(self.dist_min),
            "dist_max": float(self.dist_max),
            "target_mu": self.target_mu.tolist(),
            "target_sigma": self.target_sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["mu"], d["sigma"], d["dist_min"], d["dist_max"], d["target_mu"], d["target_sigma"])

    def __eq__(self, other):
        if not isinstance(other, NormStats):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _mean_std(columns):
    # fsum is exactly rounded, which makes the statistics order independent
    n = columns.shape[1]
    mus = np.array([math.fsum(c) / n for c in columns])
    sig = np.array([math.sqrt(math.fsum((c - m) ** 2) / n) for c, m in zip(columns, mus)])
    return mus, sig


def compute_stats(train_samples) -> NormStats:
    """Population statistics over every node of every training sample."""
    train_samples = list(train_samples)
    if not train_samples:
        raise DataError("cannot compute statistics of an empty training set")
    X = np.concatenate([s.node_features for s in train_samples]).T.copy()
    Y = np.concatenate([s.targets for s in train_samples]).T.copy()
    D = np.concatenate([s.edge_features[:, 0] for s in train_samples])
    mu, sigma = _mean_std(X)
    for k, name in enumerate(FEATURES):
        if sigma[k] == 0 or np.ptp(X[k]) == 0:
            raise DataError(f"feature {name!r} is constant over the training set")
    tmu, tsig = _mean_std(Y)
    for k in range(2):
        if tsig[k] == 0:
            raise DataError(f"target component {k} is constant over the training set")
    return NormStats(mu, sigma, float(D.min()), float(D.max()), tmu, tsig)


def zscore(value, mu, sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise DataError("sigma must be positive")
    return (value - mu) / sigma


def minmax(d, dmin, dmax):
    """Scale to [0, 1] over the training range; no clamping outside it."""
    if not dmax > dmin:
        raise DataError("dmax must exceed dmin")
    return (d - dmin) / (dmax - dmin)


def normalize_sample(sample: Sample, stats: NormStats) -> Sample:
    if sample.normalized:
        raise DataError("sample is already normalized")
    if stats.mu.shape != (sample.node_features.shape[1],):
        raise DataError("stats dimensionality does not match the sample")
    nf = np.array(sample.node_features)
    c = list(CONTINUOUS)
    nf[:, c] = zscore(nf[:, c], stats.mu[c], stats.sigma[c])
    ef = minmax(sample.edge_features, stats.dist_min, stats.dist_max)
    tg = zscore(sample.targets, stats.target_mu, stats.target_sigma)
    return replace(sample, node_features=nf, edge_features=ef, targets=tg, normalized=True)


def denormalize_sample(sample: Sample, stats: NormStats) -> Sample:
    nf = np.array(sample.node_features)
    c = list(CONTINUOUS)
    nf[:, c] = nf[:, c] * stats.sigma[c] + stats.mu[c]
    ef = sample.edge_features * (stats.dist_max - stats.dist_min) + stats.dist_min
    tg = denormalize_predictions(sample.targets, stats)
    return replace(sample, node_features=nf, edge_features=ef, targets=tg, normalized=False)


def denormalize_predictions(pred, stats: NormStats):
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[-1] != 2:
        raise DataError(f"predictions must have 2 components, got shape {pred.shape}")
    return pred * stats.target_sigma + stats.target_mu


@dataclass(eq=False)
class Dataset:
    graph: Graph
    samples: list
    splits: dict = field(default_factory=dict)  # realization id -> split name

    def __post_init__(self):
        for s in self.samples:
            s.check_shapes(self.graph)
        for r, name in self.splits.items():
            if name not in SPLITS:
                raise DataError(f"realization {r}: unknown split {name!r}")

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [s for s in self.samples if self.splits.get(s.realization) == name]

    @property
    def realizations(self):
        return sorted({s.realization for s in self.samples})

    def normalized(self, stats: NormStats) -> "Dataset":
        return Dataset(self.graph, [normalize_sample(s, stats) for s in self.samples], dict(self.splits))


def assign_splits(realizations, n_val: int, n_test: int, rng) -> dict:
    """Random split by realization so that snapshots never straddle splits."""
    realizations = list(realizations)
    if n_val + n_test >= len(realizations):
        raise DataError("need at least one training realization")
    order = rng.permutation(len(realizations))
    splits = {}
    for rank, k in enumerate(order):
        r = int(realizations[k])
        splits[r] = "validation" if rank < n_val else "test" if rank < n_val + n_test else "train"
    return splits


_SAMPLE_RE = re.compile(r"sample_(\d+)_(\d+)\.json$")


def write_dataset(path, dataset: Dataset, stats: NormStats | None = None):
    """Write ``graph.json``, ``stats.json``, ``splits.json`` and one file per sample.

    Statistics default to those of the training split.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(dataset.graph, out / "graph.json")
    if stats is None:
        stats = compute_stats(dataset.split("train"))
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=1))
    (out / "splits.json").write_text(
        json.dumps({str(r): n for r, n in sorted(dataset.splits.items())}, indent=1)
    )
    for s in dataset.samples:
        doc = {
            "node_features": s.node_features.tolist(),
            "edge_features": s.edge_features.tolist(),
            "targets": s.targets.tolist(),
        }
        (out / f"sample_{s.realization}_{s.snapshot}.json").write_text(json.dumps(doc))
    return out


def load_dataset(path) -> tuple[Dataset, NormStats]:
    root = Path(path)
    if not (root / "graph.json").is_file():
        raise DataError(f"{root} is not a dataset directory (graph.json missing)")
    graph = load_graph(root / "graph.json")
    stats = NormStats.from_dict(json.loads((root / "stats.json").read_text()))
    splits = {int(r): n for r, n in json.loads((root / "splits.json").read_text()).items()}
    samples = []
    files = []
    for f in root.iterdir():
        m = _SAMPLE_RE.match(f.name)
        if m:
            files.append((int(m.group(1)), int(m.group(2)), f))
    for r, t, f in sorted(files):
        doc = json.loads(f.read_text())
        extra = set(doc) - {"node_features", "edge_features", "targets"}
        if extra:
            raise DataError(f"{f.name}: unknown fields {sorted(extra)}")
        samples.append(Sample(doc["node_features"], doc["edge_features"], doc["targets"], r, t))
    ds = Dataset(graph, samples, splits)
    return ds, stats


def dataset_hash(path) -> str:
    """Graph hash of a dataset directory, used for provenance checks."""
    return graph_hash(load_graph(Path(path) / "graph.json"))
