"""Domain-decomposed training, prediction aggregation and parameter transfer.

Each subdomain gets an independent surrogate on its induced subgraph. Every
epoch trains all subdomains once, then a single coordinator aggregates their
validation predictions into a global field, scores it in physical units and
snapshots every subdomain's parameters whenever that score improves.
"""
from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, NormStats, Sample
from .dynamics import FlowConfig
from .graph import Graph, GraphError, NodeMap, extract_subgraph, graph_hash, subgraph_edge_ids
from .nnet import (
    Checkpoint,
    DimensionError,
    History,
    ModelConfig,
    OptimizerState,
    Surrogate,
    TrainConfig,
    fit,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    train_epoch,
)
from .partition import Partition, save_partition

__all__ = [
    "DDError",
    "DDConfig",
    "SubdomainSlice",
    "SubdomainModel",
    "DDResult",
    "slice_dataset",
    "aggregate",
    "boundary_distance_weights",
    "dd_train",
    "transfer_params",
    "fine_tune",
]


class DDError(RuntimeError):
    pass


@dataclass(frozen=True)
class DDConfig:
    num_subdomains: int = 1
    epochs: int = 200
    warm_start: str | None = None
    workers: int = 1
    seed: int = 0
    batch_size: int = 4
    validate_every: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.num_subdomains < 1:
            raise ValueError("num_subdomains must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.workers < 1 or self.validate_every < 1:
            raise ValueError("workers and validate_every must be >= 1")


@dataclass
class SubdomainSlice:
    index: int
    graph: Graph
    node_map: NodeMap
    edge_ids: np.ndarray
    dataset: Dataset
    stats: NormStats | None
    weights: np.ndarray  # per local node

    @property
    def nodes(self) -> np.ndarray:
        return self.node_map.to_global


@dataclass
class SubdomainModel:
    index: int
    graph: Graph
    node_map: NodeMap
    model: Surrogate
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ValueError("aggregation weights must be >= 0")


@dataclass
class DDResult:
    models: list
    history: History
    best_params: list
    best_prediction: np.ndarray | None
    train_loss: list = field(default_factory=list)  # per epoch, one entry per subdomain


def _identity_map(V):
    ids = np.arange(V)
    return NodeMap(ids, {i: i for i in range(V)})


def _restrict(sample: Sample, nodes, edge_ids) -> Sample:
    return Sample(
        sample.node_features[nodes],
        sample.edge_features[edge_ids],
        sample.targets[nodes],
        sample.realization,
        sample.snapshot,
        sample.normalized,
    )


def slice_dataset(dataset: Dataset, partition: Partition, stats: NormStats | None = None, weights=None) -> list:
    """Induced per-subdomain datasets; ``stats`` is attached to every slice unchanged."""
    graph = dataset.graph
    if partition.graph_hash is not None and partition.graph_hash != graph_hash(graph):
        raise GraphError("partition refers to a different graph (hash mismatch)")
    if partition.labels.size != graph.num_nodes:
        raise GraphError(f"partition labels {partition.labels.size} != graph nodes {graph.num_nodes}")
    slices = []
    for i in range(partition.k):
        nodes = np.asarray(partition.subdomain(i))
        w = np.ones(nodes.size) if weights is None else np.asarray(weights[i], dtype=np.float64)
        if nodes.size == graph.num_nodes:
            slices.append(SubdomainSlice(i, graph, _identity_map(graph.num_nodes), np.arange(graph.num_edges), dataset, stats, w))
            continue
        sub, nmap = extract_subgraph(graph, nodes)
        eids = subgraph_edge_ids(graph, nmap)
        samples = [_restrict(s, nmap.to_global, eids) for s in dataset.samples]
        slices.append(SubdomainSlice(i, sub, nmap, eids, Dataset(sub, samples, dict(dataset.splits)), stats, w))
    return slices


def boundary_distance_weights(graph: Graph, partition: Partition) -> list:
    """Optional weights growing with hop distance from a subdomain's boundary (1 at the boundary)."""
    from scipy.sparse.csgraph import shortest_path

    out = []
    for i in range(partition.k):
        nodes = np.asarray(partition.subdomain(i))
        sub, nmap = extract_subgraph(graph, nodes)
        inside = np.zeros(graph.num_nodes, dtype=bool)
        inside[nodes] = True
        t, h = graph.tails, graph.heads
        cut = inside[t] != inside[h]
        edge_nodes = np.unique(np.concatenate([t[cut], h[cut]]))
        bnd = [nmap.to_local[int(v)] for v in edge_nodes if inside[v]]
        if not bnd:
            out.append(np.ones(nodes.size))
            continue
        A = abs(sub.ops.d0).T @ abs(sub.ops.d0)
        dist = shortest_path(A, unweighted=True, indices=bnd).min(axis=0)
        out.append(1.0 + np.where(np.isfinite(dist), dist, 0.0))
    return out


def aggregate(predictions, node_maps, weights=None, num_nodes=None) -> np.ndarray:
    """Weighted mean of overlapping subdomain predictions, per global node.

    ``predictions[i]`` has shape ``(n_i, ..., C)``; ``node_maps[i]`` maps its
    rows to global ids. Contributions are summed in a canonical subdomain
    order so the result does not depend on how the lists are ordered.
    """
    ids = [np.asarray(m.to_global if isinstance(m, NodeMap) else m, dtype=np.int64) for m in node_maps]
    if len(ids) != len(predictions):
        raise ValueError("need one node map per prediction")
    if weights is None:
        weights = [np.ones(len(i)) for i in ids]
    V = int(num_nodes) if num_nodes is not None else int(max(i.max() for i in ids)) + 1
    order = sorted(range(len(ids)), key=lambda k: (len(ids[k]), ids[k].tobytes()))
    tail = np.asarray(predictions[0]).shape[1:]
    num = np.zeros((V,) + tail)
    den = np.zeros(V)
    for k in order:
        w = np.asarray(weights[k], dtype=np.float64)
        if np.any(w < 0):
            raise ValueError(f"subdomain {k} has negative weights")
        pred = np.asarray(predictions[k], dtype=np.float64)
        num[ids[k]] += w.reshape((-1,) + (1,) * len(tail)) * pred
        den[ids[k]] += w
    uncovered = np.flatnonzero(den <= 0)
    if uncovered.size:
        shown = uncovered[:20].tolist()
        raise DDError(f"{uncovered.size} node(s) not covered by any subdomain: {shown}")
    return num / den.reshape((-1,) + (1,) * len(tail))


def _check_compatible(source: ModelConfig, target: ModelConfig):
    for f in fields(ModelConfig):
        a, b = getattr(source, f.name), getattr(target, f.name)
        if a != b:
            raise DimensionError(f"dimension mismatch in {f.name}: source {a}, target {b}")


def transfer_params(source, target_graph: Graph, target_config: ModelConfig | None = None, flow=None, train: TrainConfig | None = None) -> Surrogate:
    """Copy encoder, decoder and attention weights onto a model for ``target_graph``.

    ``source`` may be a checkpoint path, a :class:`Checkpoint` or a
    :class:`Surrogate`. Optimizer state starts fresh; normalization
    statistics travel with the parameters.
    """
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, Checkpoint):
        params, src_flow, stats, opt = source.params, source.flow, source.stats, source.optimizer
    elif isinstance(source, Surrogate):
        params, src_flow, stats, opt = source.params, source.flow, source.stats, source.optimizer
    else:
        raise TypeError(f"cannot transfer from {type(source).__name__}")
    if target_config is not None:
        _check_compatible(params.config, target_config)
    if train is not None:
        settings = {"lr": train.lr, "gamma": train.gamma, "step_size": train.step_size}
    else:
        settings = opt.settings() if opt is not None else {}
    return Surrogate(params.copy(), target_graph, src_flow if flow is None else flow, OptimizerState.fresh(params, **settings), stats)


def fine_tune(model: Surrogate, train, val=(), epochs=1, rng=None, stats=None, batch_size=4, callback=None) -> History:
    """Continue training every parameter of a transferred model."""
    return fit(model, train, val, epochs, rng=rng, batch_size=batch_size, stats=stats, callback=callback)


# ------------------------------------------------------------------ training

_WORKER_SLICES = None


def _init_worker(slices, batch_size):
    global _WORKER_SLICES
    _WORKER_SLICES = (slices, batch_size)


def _epoch_task(i, params, optimizer, flow, stats, rng):
    slices, batch_size = _WORKER_SLICES
    sl = slices[i]
    model = Surrogate(params, sl.graph, flow, optimizer, stats)
    loss = train_epoch(model, sl.dataset.split("train"), rng, batch_size)
    return model.params, model.optimizer, rng, loss


def _new_model(sl: SubdomainSlice, cfg: DDConfig, rng, warm):
    if warm is not None:
        m = transfer_params(warm, sl.graph, cfg.model, cfg.flow, cfg.train)
        if m.stats is None:
            m.stats = sl.stats
        return m
    return Surrogate.create(sl.graph, cfg.train, cfg.model, cfg.flow, sl.stats, rng=rng)


def _global_validation(models, slices, stats, V):
    """Aggregated de-normalized validation prediction and target, shape (S, V, 2)."""
    val = [sl.dataset.split("validation") for sl in slices]
    if not val[0]:
        return None, None
    preds = [np.moveaxis(m.predict(v), 0, 1) for m, v in zip(models, val)]
    maps = [sl.node_map for sl in slices]
    # contiguous (S, V, 2) so reductions match a single global model exactly
    agg = np.ascontiguousarray(np.moveaxis(aggregate(preds, maps, [sl.weights for sl in slices], V), 1, 0))
    targ = np.ascontiguousarray(
        np.moveaxis(aggregate([np.stack([s.targets for s in v], axis=1) for v in val], maps, None, V), 1, 0)
    )
    if stats is not None:
        agg = agg * stats.target_sigma + stats.target_mu
        targ = targ * stats.target_sigma + stats.target_mu
    return agg, targ


def dd_train(slices, config: DDConfig, warm_start=None, run_dir=None, partition: Partition | None = None, callback=None) -> DDResult:
    """Train one surrogate per subdomain with a shared per-epoch validation barrier.

    Subdomain ``i`` draws its initialization and shuffles from
    ``default_rng(config.seed + i)``, so results do not depend on ``workers``.
    """
    slices = list(slices)
    if len(slices) != config.num_subdomains:
        raise DDError(f"config expects {config.num_subdomains} subdomains, got {len(slices)} slices")
    stats = slices[0].stats
    for sl in slices:
        if sl.stats != stats:
            raise DDError(f"subdomain {sl.index} carries different normalization statistics")
    V = int(max(sl.nodes.max() for sl in slices)) + 1
    warm = warm_start if warm_start is not None else config.warm_start
    rngs = [np.random.default_rng(config.seed + i) for i in range(len(slices))]
    models = [_new_model(sl, config, rng, warm) for sl, rng in zip(slices, rngs)]
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "best").mkdir(parents=True, exist_ok=True)
        if partition is not None:
            save_partition(partition, run_dir / "partition.json")
    hist = History()
    result = DDResult(models, hist, [m.params.copy() for m in models], None)
    pool = None
    if config.workers > 1 and len(slices) > 1:
        pool = ProcessPoolExecutor(max_workers=min(config.workers, len(slices)), initializer=_init_worker, initargs=(slices, config.batch_size))
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            losses = _run_epoch(pool, models, rngs, slices, config.batch_size)
            result.train_loss.append(losses)
            hist.train_loss.append(float(np.mean(losses)))
            val_loss = np.nan
            if (epoch + 1) % config.validate_every == 0 or epoch + 1 == config.epochs:
                agg, targ = _global_validation(models, slices, stats, V)
                if agg is not None:
                    val_loss = mse_loss(agg, targ)
                    if not np.isfinite(val_loss):
                        raise FloatingPointError(f"non-finite global validation loss at epoch {epoch}")
                    if val_loss < hist.best_val:
                        hist.best_val, hist.best_epoch = val_loss, epoch
                        result.best_params = [m.params.copy() for m in models]
                        result.best_prediction = agg
                        if run_dir is not None:
                            _save_all(models, slices, run_dir / "best", epoch, val_loss)
            hist.val_loss.append(val_loss)
            hist.wall_time.append(time.perf_counter() - t0)
            if run_dir is not None:
                _save_all(models, slices, run_dir, epoch, val_loss)
                _write_history(run_dir / "history.csv", result)
            if callback is not None and callback(epoch, models, hist):
                break
    finally:
        if pool is not None:
            pool.shutdown()
    hist.best_params = result.best_params[0] if len(result.best_params) == 1 else None
    return result


def _run_epoch(pool, models, rngs, slices, batch_size):
    losses = [None] * len(models)
    if pool is None:
        for i, m in enumerate(models):
            try:
                losses[i] = train_epoch(m, slices[i].dataset.split("train"), rngs[i], batch_size)
            except Exception as exc:
                raise DDError(f"subdomain {i} failed: {exc}") from exc
        return losses
    futures = [pool.submit(_epoch_task, i, m.params, m.optimizer, m.flow, m.stats, rngs[i]) for i, m in enumerate(models)]
    for i, fut in enumerate(futures):
        try:
            params, opt, rng, loss = fut.result()
        except Exception as exc:
            raise DDError(f"subdomain {i} failed: {exc}") from exc
        models[i].params, models[i].optimizer = params, opt
        rngs[i].bit_generator.state = rng.bit_generator.state
        losses[i] = loss
    return losses


def _save_all(models, slices, directory, epoch, val_loss):
    for m, sl in zip(models, slices):
        extra = {"subdomain": sl.index, "epoch": epoch, "val_loss": float(val_loss), "nodes": sl.nodes.tolist()}
        save_checkpoint(Path(directory) / f"sub_{sl.index}.ckpt", m, graph_hash(sl.graph), extra)


def _write_history(path, result: DDResult):
    n = len(result.models)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *[f"train_loss_{i}" for i in range(n)], "val_loss", "wall_time"])
        for ep, (losses, vl, wt) in enumerate(zip(result.train_loss, result.history.val_loss, result.history.wall_time)):
            w.writerow([ep, *[repr(float(x)) for x in losses], repr(float(vl)), f"{wt:.6f}"])
