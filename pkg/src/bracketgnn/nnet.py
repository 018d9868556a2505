"""Encoder / bracket flow / decoder surrogate, its loss, gradients and training.

Samples on one graph are batched along a middle axis: node arrays are
``(V, B, C)`` and edge arrays ``(E, B, C)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams
from .data import NormStats
from .dynamics import FlowConfig, FlowStats, LatentState, integrate, integrate_tape
from .graph import Graph

__all__ = [
    "ModelConfig",
    "ModelParams",
    "OptimizerState",
    "Surrogate",
    "TrainConfig",
    "History",
    "CheckpointError",
    "init_params",
    "encode",
    "decode",
    "forward",
    "predict",
    "mse_loss",
    "relative_l2",
    "loss_and_grad",
    "grad",
    "adam_step",
    "lr_at",
    "train_epoch",
    "evaluate_loss",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 5
    d_edge: int = 1
    width: int = 32
    latent: int = 20
    hidden: int = 20
    heads: int = 2
    d_out: int = 2

    def shapes(self) -> dict:
        """Parameter names and shapes in checkpoint order."""
        w, f = self.width, self.latent
        return {
            "node_enc.W1": (self.d_in, w),
            "node_enc.b1": (w,),
            "node_enc.W2": (w, f),
            "node_enc.b2": (f,),
            "edge_enc.W1": (self.d_edge, w),
            "edge_enc.b1": (w,),
            "edge_enc.W2": (w, f),
            "edge_enc.b2": (f,),
            "dec.W1": (f, w),
            "dec.b1": (w,),
            "dec.W2": (w, self.d_out),
            "dec.b2": (self.d_out,),
            "att.W": (self.heads, self.hidden, f),
            "att.K": (self.heads, self.hidden, f),
        }

    @property
    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))


class DimensionError(ValueError):
    pass


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    arrays: dict

    def __post_init__(self):
        shapes = self.config.shapes()
        if list(self.arrays) != list(shapes):
            missing = set(shapes) ^ set(self.arrays)
            raise DimensionError(f"parameter names differ from configuration: {sorted(missing)}")
        for name, shape in shapes.items():
            a = np.asarray(self.arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite weights")
            self.arrays[name] = a

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def attention(self) -> AttentionParams:
        return AttentionParams(self.arrays["att.W"], self.arrays["att.K"])

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, vec) -> "ModelParams":
        out, k = {}, 0
        for name, a in self.arrays.items():
            out[name] = np.asarray(vec[k : k + a.size], dtype=np.float64).reshape(a.shape).copy()
            k += a.size
        return ModelParams(self.config, out)

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(a, other.arrays[k]) for k, a in self.arrays.items()
        )


def init_params(config: ModelConfig, rng) -> ModelParams:
    """Glorot-uniform dense layers, zero biases, small Gaussian attention weights."""
    arrays = {}
    for name, shape in config.shapes().items():
        if name.startswith("att."):
            arrays[name] = rng.normal(0.0, 0.1 / np.sqrt(config.latent), size=shape)
        elif name.rsplit(".", 1)[1].startswith("W"):
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-a, a, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(config, arrays)


def _mlp(x, P, prefix):
    h = ad.tanh(ad.linear(x, P[prefix + ".W1"], P[prefix + ".b1"]))
    return ad.linear(h, P[prefix + ".W2"], P[prefix + ".b2"])


def _stack(samples, attr):
    return np.stack([getattr(s, attr) for s in samples], axis=1)


def _check_batch(samples, graph, config):
    for s in samples:
        s.check_shapes(graph)
        if s.node_features.shape[1] != config.d_in or s.edge_features.shape[1] != config.d_edge:
            raise DimensionError(
                f"sample feature widths ({s.node_features.shape[1]}, {s.edge_features.shape[1]}) "
                f"do not match the model ({config.d_in}, {config.d_edge})"
            )


def _forward_tape(P, node_x, edge_x, graph: Graph, flow: FlowConfig, stats=None):
    q = _mlp(node_x, P, "node_enc")
    p = _mlp(edge_x, P, "edge_enc")
    X = ad.concat0(q, p)
    XT = integrate_tape(X, P["att.W"], P["att.K"], graph.ops, flow, stats)
    qT = ad.slice0(XT, 0, graph.num_nodes)
    return _mlp(qT, P, "dec")


def _leaves(params: ModelParams):
    return {k: ad.Tensor(v, name=k) for k, v in params.arrays.items()}


def encode(sample, params: ModelParams) -> LatentState:
    P = _leaves(params)
    q = _mlp(sample.node_features, P, "node_enc").data
    p = _mlp(sample.edge_features, P, "edge_enc").data
    return LatentState(q, p)


def decode(xT: LatentState, params: ModelParams) -> np.ndarray:
    return _mlp(xT.q, _leaves(params), "dec").data


def forward(sample, params: ModelParams, flow: FlowConfig, graph: Graph) -> np.ndarray:
    """Normalized ``(V, 2)`` prediction for one normalized sample."""
    _check_batch([sample], graph, params.config)
    x0 = encode(sample, params)
    xT = integrate(x0, params.attention, graph, flow)
    return decode(xT, params)


def predict(params: ModelParams, samples, graph: Graph, flow: FlowConfig, batch_size=4) -> np.ndarray:
    """Normalized predictions stacked as ``(N, V, 2)``."""
    samples = list(samples)
    _check_batch(samples, graph, params.config)
    P = _leaves(params)
    out = []
    for k in range(0, len(samples), batch_size):
        chunk = samples[k : k + batch_size]
        pred = _forward_tape(P, _stack(chunk, "node_features"), _stack(chunk, "edge_features"), graph, flow)
        out.append(np.moveaxis(pred.data, 1, 0))
    return np.concatenate(out) if out else np.zeros((0, graph.num_nodes, params.config.d_out))


def mse_loss(pred, target) -> float:
    """Mean over samples of the per-sample sum of squared errors.

    Accepts a single ``(V, C)`` pair or stacked ``(N, V, C)`` arrays.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    r = pred - target
    if r.ndim == 2:
        return float(np.sum(r * r))
    return float(np.sum(r * r) / r.shape[0])


def relative_l2(pred, truth) -> float:
    """``||pred - truth|| / ||truth||`` over every sample, node and component."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.linalg.norm(pred - truth) / np.linalg.norm(truth))


def loss_and_grad(params: ModelParams, samples, graph: Graph, flow: FlowConfig, stats=None):
    """Batch loss and its exact gradient through the unrolled integrator."""
    samples = list(samples)
    _check_batch(samples, graph, params.config)
    P = _leaves(params)
    pred = _forward_tape(P, _stack(samples, "node_features"), _stack(samples, "edge_features"), graph, flow, stats)
    loss = ad.batch_sse(pred, _stack(samples, "targets"))
    ad.backward(loss)
    grads = {}
    for name, t in P.items():
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        grads[name] = g
    return float(loss.data), grads


def grad(params: ModelParams, samples, graph: Graph, flow: FlowConfig) -> dict:
    return loss_and_grad(params, samples, graph, flow)[1]


@dataclass
class OptimizerState:
    """Adam moments plus a step-decay learning-rate schedule."""

    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    gamma: float = 0.95
    step_size: int = 250
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, **kw) -> "OptimizerState":
        zeros = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, **kw)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def copy(self):
        return replace(self, m={k: a.copy() for k, a in self.m.items()}, v={k: a.copy() for k, a in self.v.items()})

    def settings(self):
        return {k: getattr(self, k) for k in ("step", "lr", "gamma", "step_size", "beta1", "beta2", "eps")}


def lr_at(state: OptimizerState, step: int | None = None) -> float:
    step = state.step if step is None else step
    return state.lr * state.gamma ** (step // state.step_size)


def adam_step(params: ModelParams, grads: dict, state: OptimizerState):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    lr = lr_at(state)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_arrays, m_new, v_new = {}, {}, {}
    for name, theta in params.arrays.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        upd = theta - lr * mhat / (np.sqrt(vhat) + state.eps)
        if not np.all(np.isfinite(upd)):
            raise FloatingPointError(f"non-finite Adam update for {name}")
        new_arrays[name], m_new[name], v_new[name] = upd, m, v
    new_state = replace(state, m=m_new, v=v_new, step=t)
    return ModelParams(params.config, new_arrays), new_state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    gamma: float = 0.95
    step_size: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class Surrogate:
    """Trainable model bound to one graph."""

    params: ModelParams
    graph: Graph
    flow: FlowConfig = field(default_factory=FlowConfig)
    optimizer: OptimizerState | None = None
    stats: NormStats | None = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = OptimizerState.fresh(self.params)

    @classmethod
    def create(cls, graph, train: TrainConfig = TrainConfig(), model=ModelConfig(), flow=FlowConfig(), stats=None, rng=None):
        rng = np.random.default_rng(train.seed) if rng is None else rng
        params = init_params(model, rng)
        opt = OptimizerState.fresh(params, lr=train.lr, gamma=train.gamma, step_size=train.step_size)
        return cls(params, graph, flow, opt, stats)

    def predict(self, samples, batch_size=4):
        return predict(self.params, samples, self.graph, self.flow, batch_size)


def train_epoch(model: Surrogate, samples, rng, batch_size: int = 4) -> float:
    """One shuffled pass in mini-batches; returns the mean per-sample training loss."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot train on an empty split")
    order = rng.permutation(len(samples))
    total = 0.0
    for k in range(0, len(samples), batch_size):
        batch = [samples[i] for i in order[k : k + batch_size]]
        loss, g = loss_and_grad(model.params, batch, model.graph, model.flow)
        model.params, model.optimizer = adam_step(model.params, g, model.optimizer)
        total += loss * len(batch)
    return total / len(samples)


def evaluate_loss(model: Surrogate, samples, stats: NormStats | None = None, batch_size=4) -> float:
    """Validation MSE on de-normalized velocities (normalized if ``stats`` is None)."""
    samples = list(samples)
    pred = model.predict(samples, batch_size)
    target = np.stack([s.targets for s in samples])
    if stats is not None:
        pred = pred * stats.target_sigma + stats.target_mu
        target = target * stats.target_sigma + stats.target_mu
    return mse_loss(pred, target)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = np.inf
    best_params: ModelParams | None = None
    extra: dict = field(default_factory=dict)


def fit(model: Surrogate, train, val=(), epochs=1, rng=None, batch_size=4, stats=None, callback=None) -> History:
    """Train for ``epochs`` epochs, keeping the parameters with the best validation loss.

    ``callback(epoch, model, history)`` runs after each epoch; returning True
    stops training early.
    """
    import time

    rng = np.random.default_rng(0) if rng is None else rng
    stats = model.stats if stats is None else stats
    hist = History()
    val = list(val)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        hist.train_loss.append(train_epoch(model, train, rng, batch_size))
        hist.wall_time.append(time.perf_counter() - t0)
        if val:
            vl = evaluate_loss(model, val, stats, batch_size)
            if not np.isfinite(vl):
                raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
            hist.val_loss.append(vl)
            if vl < hist.best_val:
                hist.best_val, hist.best_epoch = vl, epoch
                hist.best_params = model.params.copy()
        if callback is not None and callback(epoch, model, hist):
            break
    return hist


def train_surrogate(graph, train, val=(), config: TrainConfig = TrainConfig(), model=ModelConfig(), flow=FlowConfig(), stats=None, warm=None, callback=None):
    """Build and fit a global model; returns ``(surrogate, history)``.

    One generator seeded with ``config.seed`` drives initialization and then
    shuffling, which is the same schedule a single-subdomain decomposed run uses.
    """
    rng = np.random.default_rng(config.seed)
    sur = Surrogate.create(graph, config, model, flow, stats, rng=rng) if warm is None else warm
    hist = fit(sur, train, val, config.epochs, rng=rng, batch_size=config.batch_size, stats=stats, callback=callback)
    return sur, hist


# ---------------------------------------------------------------- checkpoints

MAGIC = b"BGNNCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    flow: FlowConfig
    optimizer: OptimizerState | None
    stats: NormStats | None
    graph_hash: str | None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: Surrogate, graph_hash: str | None = None, extra: dict | None = None):
    """Write a JSON header followed by little-endian float64 arrays in header order."""
    arrays = list(model.params.arrays.items())
    opt = model.optimizer
    if opt is not None:
        arrays += [(f"adam.m/{k}", a) for k, a in opt.m.items()]
        arrays += [(f"adam.v/{k}", a) for k, a in opt.v.items()]
    header = {
        "version": CKPT_VERSION,
        "model": asdict(model.params.config),
        "flow": asdict(model.flow),
        "optimizer": opt.settings() if opt is not None else None,
        "norm_stats": model.stats.to_dict() if model.stats is not None else None,
        "graph_hash": graph_hash,
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return Path(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    off = 16 + n
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(spec["shape"]).copy()
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    config = ModelConfig(**header["model"])
    params = ModelParams(config, {k: arrays[k] for k in config.shapes()})
    opt = None
    if header["optimizer"] is not None:
        s = header["optimizer"]
        opt = OptimizerState(
            m={k: arrays[f"adam.m/{k}"] for k in config.shapes()},
            v={k: arrays[f"adam.v/{k}"] for k in config.shapes()},
            **s,
        )
    stats = NormStats.from_dict(header["norm_stats"]) if header["norm_stats"] else None
    return Checkpoint(params, FlowConfig(**header["flow"]), opt, stats, header["graph_hash"], header.get("extra", {}))
