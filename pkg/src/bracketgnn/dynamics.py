"""Hamiltonian latent flow on node/edge features.

The state ``x = (q, p)`` holds node latents ``q`` and edge latents ``p``.
With ``A = diag(A0(q), A1(q))`` and energy ``E = (|q|^2 + |p|^2) / 2`` the
flow is

    dq/dt = -A0^-1 d0^T p
    dp/dt =  d0 A0^-1 q

which is ``L(x) A^-1 x`` for the A-skew-adjoint ``L = [[0, -d0*], [d0, 0]]``
after cancelling ``A1 A1^-1`` analytically. The Euclidean inner product of
``x`` with its rate vanishes identically, so ``E`` is conserved in time.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, MetricOverflowError, metric_backward, metric_forward
from .graph import Graph, apply_sparse

__all__ = [
    "LatentState",
    "FlowConfig",
    "FlowStats",
    "CorrectorError",
    "vector_field",
    "energy",
    "check_skew_adjoint",
    "integrate",
    "field_forward",
    "field_backward",
    "field_op",
    "integrate_stacked",
]

METHODS = ("forward-euler", "implicit-abm")


class CorrectorError(RuntimeError):
    """Fixed-point corrector did not reach tolerance."""

    def __init__(self, residual, iterations):
        super().__init__(f"corrector did not converge after {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class LatentState:
    q: np.ndarray  # (V, ..., N_f)
    p: np.ndarray  # (E, ..., N_f)

    def stacked(self):
        return np.concatenate([self.q, self.p])

    @classmethod
    def unstack(cls, X, num_nodes):
        return cls(X[:num_nodes], X[num_nodes:])


@dataclass(frozen=True)
class FlowConfig:
    T: float = 1.0
    n_steps: int = 2
    method: str = "implicit-abm"
    tol: float = 1e-10
    max_iter: int = 50
    # on corrector failure, retry with the step count doubled up to this many times
    max_refine: int = 4

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be an integer >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.max_refine < 0:
            raise ValueError("max_refine must be >= 0")

    @property
    def h(self):
        return self.T / self.n_steps


@dataclass
class FlowStats:
    """Diagnostics accumulated over an integration."""

    field_evals: int = 0
    corrector_iters: list = field(default_factory=list)
    clamped: int = 0
    refinements: int = 0


def field_forward(ops, X, params: AttentionParams):
    V = ops.num_nodes
    q, p = X[:V], X[V:]
    _, a0, mcache = metric_forward(ops, q, params)
    if not (np.all(np.isfinite(a0)) and np.all(a0 > 0)):
        raise FloatingPointError("node metric lost positivity")
    inv = 1.0 / a0[..., None]
    u = apply_sparse(ops.d0T, p)
    Xdot = np.concatenate([-u * inv, apply_sparse(ops.d0, q * inv)])
    # keep only what is expensive to rebuild; the pullback recomputes the rest
    _, _, m, live, _ = mcache
    return Xdot, (X, m, live, params, inv)


def field_backward(ops, cache, g):
    X, m, live, params, inv = cache
    V = ops.num_nodes
    q, p = X[:V], X[V:]
    u = apply_sparse(ops.d0T, p)
    y = q * inv
    gq_out, gp_out = g[:V], g[V:]
    gu = -gq_out * inv
    gp = apply_sparse(ops.d0, gu)
    gy = apply_sparse(ops.d0T, gp_out)
    inv0 = inv[..., 0]
    ga0 = ((gq_out * u).sum(-1) * inv0 - (gy * y).sum(-1)) * inv0
    gq, gW, gK = metric_backward(ops, (q, None, m, live, params), g_a0=ga0)
    gq += gy * inv
    return np.concatenate([gq, gp]), gW, gK


def _count(stats, cache):
    if stats is not None:
        stats.field_evals += 1
        stats.clamped += int((~cache[2]).sum())


def field_op(ops, X: ad.Tensor, W: ad.Tensor, K: ad.Tensor, stats: FlowStats | None = None):
    """Bracket vector field recorded on the autodiff tape."""
    value, cache = field_forward(ops, X.data, AttentionParams(W.data, K.data))
    _count(stats, cache)
    return ad.custom(value, (X, W, K), lambda g: field_backward(ops, cache, g), name="field")


def shifted_field_op(ops, base: ad.Tensor, c: float, X: ad.Tensor, W: ad.Tensor, K: ad.Tensor, stats=None):
    """``base + c * f(X)`` as one tape entry, so ``f(X)`` itself is never stored."""
    rate, cache = field_forward(ops, X.data, AttentionParams(W.data, K.data))
    _count(stats, cache)
    value = base.data + c * rate
    del rate

    def vjp(g):
        gX, gW, gK = field_backward(ops, cache, c * g)
        return g, gX, gW, gK

    return ad.custom(value, (base, X, W, K), vjp, name="shifted_field")


def vector_field(x: LatentState, params: AttentionParams, graph: Graph) -> LatentState:
    X = x.stacked()
    Xdot, _ = field_forward(graph.ops, X, params)
    return LatentState.unstack(Xdot, graph.num_nodes)


def energy(x: LatentState) -> float:
    return 0.5 * (float(np.sum(x.q * x.q)) + float(np.sum(x.p * x.p)))


def check_skew_adjoint(q, params: AttentionParams, graph: Graph, max_nodes: int = 200) -> float:
    """Dense ``max |L^T A + A L|`` for the bracket operator at ``q``.

    Test-only helper; refuses graphs with more than ``max_nodes`` nodes.
    """
    if graph.num_nodes > max_nodes:
        raise ValueError(f"dense assembly refused for {graph.num_nodes} > {max_nodes} nodes")
    from .attention import node_metric

    m = node_metric(q, params, graph)
    d0 = graph.ops.d0.toarray()
    A0, A1 = np.diag(m.a0_diag), np.diag(m.a1_diag)
    V, E = graph.num_nodes, graph.num_edges
    d0_adj = np.linalg.inv(A0) @ d0.T @ A1
    L = np.block([[np.zeros((V, V)), -d0_adj], [d0, np.zeros((E, E))]])
    A = np.block([[A0, np.zeros((V, E))], [np.zeros((E, V)), A1]])
    return float(np.max(np.abs(L.T @ A + A @ L)))


class _ArrayBackend:
    """Plain-array arithmetic for the shared stepping schedule."""

    def __init__(self, ops, params, stats):
        self.ops, self.params, self.stats = ops, params, stats

    def f(self, X):
        out, cache = field_forward(self.ops, X, self.params)
        _count(self.stats, cache)
        return out

    def shifted_f(self, base, c, X):
        return base + c * self.f(X)

    @staticmethod
    def comb(terms):
        out = terms[0][0] * terms[0][1]
        for c, x in terms[1:]:
            out = out + c * x
        return out

    @staticmethod
    def value(X):
        return X


class _TapeBackend:
    def __init__(self, ops, W, K, stats):
        self.ops, self.W, self.K, self.stats = ops, W, K, stats

    def f(self, X):
        return field_op(self.ops, X, self.W, self.K, self.stats)

    def shifted_f(self, base, c, X):
        return shifted_field_op(self.ops, base, c, X, self.W, self.K, self.stats)

    comb = staticmethod(ad.lincomb)

    @staticmethod
    def value(X):
        return X.data


def _schedule(x0, be, cfg: FlowConfig, f_prev=None, stats=None):
    """Advance ``cfg.n_steps`` steps; returns ``(x_T, f(x_{N-1}))``.

    ``f_prev`` is the rate one step before ``x0`` and lets a multistep run
    resume without a fresh start-up step.
    """
    h = cfg.h
    x = x0
    if cfg.method == "forward-euler":
        for _ in range(cfg.n_steps):
            fx = be.f(x)
            x = be.comb([(1.0, x), (h, fx)])
        return x, None

    fx = be.f(x)
    for k in range(cfg.n_steps):
        if f_prev is None:
            # start-up: Heun step
            xp = be.comb([(1.0, x), (h, fx)])
            x_new = be.comb([(1.0, x), (0.5 * h, fx), (0.5 * h, be.f(xp))])
        else:
            # AB2 predictor, then the two-step AM corrector by fixed-point iteration
            xi = be.comb([(1.0, x), (1.5 * h, fx), (-0.5 * h, f_prev)])
            base = be.comb([(1.0, x), (8.0 * h / 12.0, fx), (-h / 12.0, f_prev)])
            iters, res = 0, np.inf
            while True:
                try:
                    nxt = be.shifted_f(base, 5.0 * h / 12.0, xi)
                except (FloatingPointError, MetricOverflowError):
                    # a diverging iterate, not a property of the true solution
                    raise CorrectorError(np.inf, iters) from None
                iters += 1
                res = float(np.max(np.abs(be.value(nxt) - be.value(xi))))
                xi = nxt
                if res < cfg.tol:
                    break
                if iters >= cfg.max_iter or not np.isfinite(res):
                    raise CorrectorError(res, iters)
            if stats is not None:
                stats.corrector_iters.append(iters)
            x_new = xi
        f_prev, x = fx, x_new
        fx = be.f(x) if k + 1 < cfg.n_steps else None
    return x, f_prev


def _refining(run, cfg: FlowConfig, stats, allow=True):
    """Call ``run(cfg)``, doubling ``n_steps`` after each corrector failure."""
    for level in range(cfg.max_refine + 1 if allow else 1):
        try:
            return run(cfg)
        except CorrectorError:
            if level == (cfg.max_refine if allow else 0):
                raise
            cfg = replace(cfg, n_steps=2 * cfg.n_steps)
            if stats is not None:
                stats.refinements += 1


def integrate_stacked(X0, params: AttentionParams, ops, cfg: FlowConfig, f_prev=None, stats=None):
    """Integrate a stacked ``(V + E, ..., N_f)`` array; returns ``(X_T, f_prev)``.

    A continuation (``f_prev`` given) is tied to the current step size and is
    never refined.
    """
    be = _ArrayBackend(ops, params, stats)
    return _refining(lambda c: _schedule(X0, be, c, f_prev, stats), cfg, stats, allow=f_prev is None)


def integrate_tape(X0: ad.Tensor, W: ad.Tensor, K: ad.Tensor, ops, cfg: FlowConfig, stats=None):
    be = _TapeBackend(ops, W, K, stats)
    x, _ = _refining(lambda c: _schedule(X0, be, c, None, stats), cfg, stats)
    return x


def integrate(
    x0: LatentState,
    params: AttentionParams,
    graph: Graph,
    cfg: FlowConfig = FlowConfig(),
    prev_rate=None,
    return_rate: bool = False,
    stats: FlowStats | None = None,
):
    """Evolve ``x0`` to pseudo-time ``cfg.T``.

    If the implicit corrector fails, the run is repeated with twice as many
    steps, at most ``cfg.max_refine`` times, before the error propagates.

    With ``return_rate=True`` the rate at the second-to-last step is returned
    as well; passing it back as ``prev_rate`` continues a multistep run
    exactly as if it had never stopped.
    """
    X, f_prev = integrate_stacked(x0.stacked(), params, graph.ops, cfg, prev_rate, stats)
    out = LatentState.unstack(X, graph.num_nodes)
    return (out, f_prev) if return_rate else out
