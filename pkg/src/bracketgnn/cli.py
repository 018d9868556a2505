"""Command-line entry point: ``gen-data``, ``partition``, ``train``, ``predict``, ``evaluate``.

Every command writes into ``--out`` a ``config.toml`` holding the fully
resolved configuration and an ``inputs.json`` with the hashes of everything
it read.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import DataError, Dataset, compute_stats, dataset_hash, load_dataset, write_dataset
from .dd import DDConfig, aggregate, boundary_distance_weights, dd_train, slice_dataset, transfer_params
from .graph import GraphError, graph_hash
from .nnet import CheckpointError, DimensionError, Surrogate, load_checkpoint, predict, relative_l2, save_checkpoint, train_surrogate
from .partition import PartitionError, SimilarityParams, load_partition, partition_mesh, save_partition
from .synthetic import build_dataset

__all__ = ["main", "build_parser", "evaluate_predictions", "load_predictor"]


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prepare_out(out, cfg: RunConfig, inputs: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.resolved_text())
    (out / "inputs.json").write_text(json.dumps(inputs, indent=1, sort_keys=True) + "\n")
    return out


def _config(args, command) -> RunConfig:
    overrides = {"run.seed": getattr(args, "seed", None)}
    if getattr(args, "workers", None) is not None:
        overrides["dd.workers"] = args.workers
    if getattr(args, "split", None) is not None:
        overrides["run.split"] = args.split
    if getattr(args, "k", None) is not None:
        overrides["partition.k"] = args.k
    return load_config(args.config, overrides).validate(command)


def _base_inputs(args):
    return {"config": _sha256_file(args.config) if args.config else None}


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> Path:
    cfg = _config(args, "gen-data")
    ds = build_dataset(cfg.synthetic())
    out = _prepare_out(args.out, cfg, _base_inputs(args))
    write_dataset(out, ds, compute_stats(ds.split("train")))
    return out


def cmd_partition(args) -> Path:
    cfg = _config(args, "partition")
    ds, stats = load_dataset(args.dataset)
    ps = cfg.partition()
    params = None
    if ps.sigma_x > 0 and ps.sigma_f > 0 and ps.sigma_y > 0:
        params = SimilarityParams(ps.sigma_x, ps.sigma_f, ps.sigma_y)
    part = partition_mesh(
        ds.graph,
        ds,
        ps.k,
        params,
        seed=cfg.seed,
        m=ps.m or None,
        penalty_scale=ps.penalty_scale,
        overlap_hops=ps.overlap_hops,
        local_scaling=ps.local_scaling,
    )
    inputs = {**_base_inputs(args), "dataset": dataset_hash(args.dataset), "graph": graph_hash(ds.graph)}
    out = _prepare_out(args.out, cfg, inputs)
    save_partition(part, out / "partition.json")
    return out


def _write_global_history(path, hist):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "wall_time"])
        vals = hist.val_loss or [float("nan")] * len(hist.train_loss)
        for ep, (tl, vl, wt) in enumerate(zip(hist.train_loss, vals, hist.wall_time)):
            w.writerow([ep, repr(float(tl)), repr(float(vl)), f"{wt:.6f}"])


def cmd_train(args) -> Path:
    cfg = _config(args, "train")
    ds, stats = load_dataset(args.dataset)
    nd = ds.normalized(stats)
    ghash = graph_hash(ds.graph)
    inputs = {**_base_inputs(args), "dataset": dataset_hash(args.dataset), "graph": ghash}
    warm = None
    if args.warm_start:
        inputs["warm_start"] = _sha256_file(args.warm_start)
        warm = load_checkpoint(args.warm_start)
        if warm.stats is not None:
            stats = warm.stats
            nd = ds.normalized(stats)
    part = None
    if args.partition:
        inputs["partition"] = _sha256_file(args.partition)
        part = load_partition(args.partition, ds.graph)
    out = _prepare_out(args.out, cfg, inputs)
    train = cfg.train()
    if part is None:
        model = None
        if warm is not None:
            model = transfer_params(warm, ds.graph, cfg.model(), cfg.flow(), train)
        model, hist = train_surrogate(
            ds.graph, nd.split("train"), nd.split("validation"), train, cfg.model(), cfg.flow(), stats, warm=model
        )
        _write_global_history(out / "history.csv", hist)
        save_checkpoint(out / "model.ckpt", model, ghash)
        if hist.best_params is not None:
            best = Surrogate(hist.best_params, ds.graph, model.flow, model.optimizer, stats)
            save_checkpoint(out / "best.ckpt", best, ghash, {"epoch": hist.best_epoch, "val_loss": hist.best_val})
        else:
            save_checkpoint(out / "best.ckpt", model, ghash)
        return out
    dds = cfg.dd()
    weights = boundary_distance_weights(ds.graph, part) if dds.weighting == "boundary-distance" else None
    slices = slice_dataset(nd, part, stats, weights)
    ddc = DDConfig(
        num_subdomains=part.k,
        epochs=train.epochs,
        workers=dds.workers,
        seed=cfg.seed,
        batch_size=train.batch_size,
        validate_every=dds.validate_every,
        train=train,
        model=cfg.model(),
        flow=cfg.flow(),
    )
    dd_train(slices, ddc, warm_start=warm, run_dir=out, partition=part)
    return out


# ------------------------------------------------------------- prediction


def load_predictor(source, dataset: Dataset, stats):
    """Return ``f(samples) -> de-normalized (S, V, 2)`` for a checkpoint, run dir or ``"oracle"``."""
    if str(source) == "oracle":
        return lambda raw: np.stack([s.targets for s in raw])
    path = Path(source)
    if path.is_dir() and (path / "partition.json").exists():
        part = load_partition(path / "partition.json", dataset.graph)
        cks = [load_checkpoint(path / "best" / f"sub_{i}.ckpt") for i in range(part.k)]
        st = cks[0].stats or stats
        slices = slice_dataset(dataset, part, st)

        def run(raw):
            normed = [s if s.normalized else _norm(s, st) for s in raw]
            preds = []
            for ck, sl in zip(cks, slices):
                sub = [_restrict_like(s, sl) for s in normed]
                preds.append(np.moveaxis(predict(ck.params, sub, sl.graph, ck.flow), 0, 1))
            agg = np.moveaxis(aggregate(preds, [sl.node_map for sl in slices], [sl.weights for sl in slices], dataset.graph.num_nodes), 1, 0)
            return agg * st.target_sigma + st.target_mu

        return run
    if path.is_dir():
        path = path / "best.ckpt"
    ck = load_checkpoint(path)
    st = ck.stats or stats
    if ck.graph_hash is not None and ck.graph_hash != graph_hash(dataset.graph):
        raise GraphError(f"{path} was trained on a different graph (hash mismatch)")

    def run(raw):
        normed = [_norm(s, st) for s in raw]
        return predict(ck.params, normed, dataset.graph, ck.flow) * st.target_sigma + st.target_mu

    return run


def _norm(sample, stats):
    from .data import normalize_sample

    return normalize_sample(sample, stats)


def _restrict_like(sample, sl):
    from .dd import _restrict

    if len(sl.node_map) == sample.node_features.shape[0]:
        return sample
    return _restrict(sample, sl.node_map.to_global, sl.edge_ids)


def evaluate_predictions(pred, truth) -> dict:
    """MSE and global relative L2 error over all samples, nodes and components."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    err = pred - truth
    return {
        "num_samples": int(truth.shape[0]),
        "mse": float(np.mean(np.sum(err**2, axis=(1, 2)))),
        "rel_l2": relative_l2(pred, truth),
    }


def _predict_split(args, cfg):
    ds, stats = load_dataset(args.dataset)
    split = cfg.get("run.split")
    raw = ds.split(split)
    if not raw:
        raise DataError(f"split {split!r} is empty")
    pred = load_predictor(args.model, ds, stats)(raw)
    inputs = {**_base_inputs(args), "dataset": dataset_hash(args.dataset), "graph": graph_hash(ds.graph)}
    mp = Path(args.model)
    if mp.is_file():
        inputs["model"] = _sha256_file(mp)
    elif mp.is_dir():
        inputs["model"] = {str(p.relative_to(mp)): _sha256_file(p) for p in sorted(mp.rglob("*.ckpt"))}
    else:
        inputs["model"] = str(args.model)
    return ds, raw, pred, split, inputs


def _write_predictions(out, raw, pred, split):
    doc = {
        "split": split,
        "samples": [
            {"realization": s.realization, "snapshot": s.snapshot, "velocity": p.tolist()} for s, p in zip(raw, pred)
        ],
    }
    (out / "predictions.json").write_text(json.dumps(doc) + "\n")


def cmd_predict(args) -> Path:
    cfg = _config(args, "predict")
    _, raw, pred, split, inputs = _predict_split(args, cfg)
    out = _prepare_out(args.out, cfg, inputs)
    _write_predictions(out, raw, pred, split)
    return out


def cmd_evaluate(args) -> Path:
    cfg = _config(args, "evaluate")
    ds, raw, pred, split, inputs = _predict_split(args, cfg)
    out = _prepare_out(args.out, cfg, inputs)
    _write_predictions(out, raw, pred, split)
    truth = np.stack([s.targets for s in raw])
    m = evaluate_predictions(pred, truth)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "num_samples", "mse", "rel_l2"])
        w.writerow([split, m["num_samples"], repr(m["mse"]), repr(m["rel_l2"])])
    err = pred - truth
    rms = np.sqrt(np.mean(np.sum(err**2, axis=2), axis=0))
    ref = np.sqrt(np.mean(np.sum(truth**2, axis=2), axis=0))
    with open(out / "node_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "x", "y", "rms_error", "rms_speed"])
        for v, ((x, y), e, r) in enumerate(zip(ds.graph.coords, rms, ref)):
            w.writerow([v, repr(float(x)), repr(float(y)), repr(float(e)), repr(float(r))])
    return out


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bracketgnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value run configuration")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    pa = sub.add_parser("partition", help="spectral partition of a dataset's mesh")
    pa.add_argument("dataset")
    pa.add_argument("--k", type=int, help="overrides partition.k")
    common(pa)
    pa.set_defaults(func=cmd_partition)

    t = sub.add_parser("train", help="train a global or domain-decomposed surrogate")
    t.add_argument("dataset")
    t.add_argument("--warm-start", help="checkpoint to transfer parameters from")
    t.add_argument("--partition", help="partition.json; enables domain-decomposed training")
    t.add_argument("--workers", type=int, help="overrides dd.workers")
    common(t)
    t.set_defaults(func=cmd_train)

    for name, func in (("predict", cmd_predict), ("evaluate", cmd_evaluate)):
        e = sub.add_parser(name, help=f"{name} on a dataset split")
        e.add_argument("model", help="checkpoint, run directory, or 'oracle'")
        e.add_argument("dataset")
        e.add_argument("--split", choices=("train", "validation", "test"), help="overrides run.split")
        common(e)
        e.set_defaults(func=func)
    return p


_EXPECTED = (ConfigError, DataError, GraphError, PartitionError, CheckpointError, DimensionError, FileNotFoundError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = args.func(args)
    except _EXPECTED as exc:
        print(f"bracketgnn {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
