import numpy as np
import pytest

from bracketgnn.data import Sample
from bracketgnn.dynamics import FlowConfig, LatentState
from bracketgnn.graph import Graph, graph_hash
from bracketgnn.nnet import (
    CheckpointError,
    DimensionError,
    ModelConfig,
    ModelParams,
    OptimizerState,
    Surrogate,
    TrainConfig,
    adam_step,
    decode,
    encode,
    fit,
    forward,
    grad,
    init_params,
    load_checkpoint,
    loss_and_grad,
    lr_at,
    mse_loss,
    predict,
    save_checkpoint,
    train_epoch,
    train_surrogate,
)

from gradcheck import SMALL, fd_gradient, random_problem, relative_errors


def zero_params(config=ModelConfig()):
    return ModelParams(config, {k: np.zeros(s) for k, s in config.shapes().items()})


def test_parameter_count_is_a_function_of_config():
    c = ModelConfig()
    assert c.num_params == 5 * 32 + 32 + 32 * 20 + 20 + 32 + 32 + 640 + 20 + 640 + 32 + 64 + 2 + 2 * 2 * 20 * 20
    rng = np.random.default_rng(0)
    assert init_params(c, rng).flat().size == c.num_params


def test_init_scales():
    p = init_params(ModelConfig(), np.random.default_rng(0))
    a = np.sqrt(6 / (5 + 32))
    assert np.abs(p["node_enc.W1"]).max() <= a
    assert not p["dec.b1"].any()
    assert p["att.W"].std() == pytest.approx(0.1 / np.sqrt(20), rel=0.1)


def test_bad_shapes_rejected():
    arrays = {k: np.zeros(s) for k, s in SMALL.shapes().items()}
    arrays["dec.W2"] = np.zeros((3, 3))
    with pytest.raises(DimensionError, match="dec.W2"):
        ModelParams(SMALL, arrays)


def test_zero_encoder_and_decoder():
    g, samples, _ = random_problem(0, config=ModelConfig())
    x = encode(samples[0], zero_params())
    assert not x.q.any() and not x.p.any()
    xT = LatentState(np.ones((8, 20)), np.ones((g.num_edges, 20)))
    assert not decode(xT, zero_params()).any()
    assert not forward(samples[0], zero_params(), FlowConfig(), g).any()


def test_encode_is_rowwise():
    g, samples, p = random_problem(1)
    s = samples[0]
    nf = np.array(s.node_features)
    nf[3] = nf[5]
    x = encode(Sample(nf, s.edge_features, s.targets, normalized=True), p)
    np.testing.assert_array_equal(x.q[3], x.q[5])
    perm = np.random.default_rng(0).permutation(8)
    xp = encode(Sample(nf[perm], s.edge_features, s.targets, normalized=True), p)
    np.testing.assert_array_equal(xp.q, x.q[perm])


def test_decode_is_local():
    _, _, p = random_problem(2)
    q = np.random.default_rng(0).normal(size=(8, SMALL.latent))
    base = decode(LatentState(q, np.zeros((1, SMALL.latent))), p)
    q2 = q.copy()
    q2[4] += 1.0
    moved = decode(LatentState(q2, np.zeros((1, SMALL.latent))), p)
    changed = np.flatnonzero(np.any(moved != base, axis=1))
    assert changed.tolist() == [4]


def test_forward_permutation_equivariant():
    g, samples, p = random_problem(3)
    s = samples[0]
    perm = np.random.default_rng(1).permutation(8)
    inv = np.argsort(perm)
    g2 = Graph(8, perm[g.edges], g.coords[inv])
    s2 = Sample(s.node_features[inv], s.edge_features, s.targets[inv], normalized=True)
    a = forward(s, p, FlowConfig(), g)
    b = forward(s2, p, FlowConfig(), g2)
    assert np.array_equal(b, a[inv])


def test_forward_deterministic_and_matches_batched():
    g, samples, p = random_problem(4, batch=3)
    a = forward(samples[0], p, FlowConfig(), g)
    assert np.array_equal(a, forward(samples[0], p, FlowConfig(), g))
    batched = predict(p, samples, g, FlowConfig())
    assert batched.shape == (3, 8, 2)
    np.testing.assert_allclose(batched[0], a, rtol=0, atol=1e-9)


def test_mse_examples():
    t = np.random.default_rng(0).normal(size=(3, 5, 2))
    assert mse_loss(t, t) == 0
    assert mse_loss(np.ones((1, 2)), np.zeros((1, 2))) == 2
    r = np.random.default_rng(1).normal(size=(3, 5, 2))
    assert mse_loss(t + 2 * r, t) == pytest.approx(4 * mse_loss(t + r, t), rel=1e-14)
    assert mse_loss(t + r, t) == pytest.approx(np.mean([np.sum(r[i] ** 2) for i in range(3)]), rel=1e-14)
    with pytest.raises(ValueError):
        mse_loss(t, t[:, :4])


def test_gradient_matches_finite_differences_sampled():
    # full-width model, a random subset of coordinates
    g, samples, p = random_problem(5, config=ModelConfig(), perturb=0.1)
    coords = np.random.default_rng(0).choice(p.flat().size, size=120, replace=False)
    analytic, fd, loss = fd_gradient(p, samples, g, coords=coords)
    # coordinates below the central-difference round-off floor are compared absolutely
    floor = 100 * np.finfo(float).eps * max(1.0, loss) / 1e-6
    assert np.all(np.abs(analytic - fd) <= 1e-5 * np.maximum(np.abs(analytic), np.abs(fd)) + floor)


@pytest.mark.parametrize("method", ["forward-euler", "implicit-abm"])
def test_gradient_every_coordinate(method):
    g, samples, p = random_problem(11)
    analytic, fd, _ = fd_gradient(p, samples, g, flow=FlowConfig(method=method))
    assert relative_errors(analytic, fd).max() <= 1e-5


def test_gradient_of_scaled_loss():
    from bracketgnn import autodiff as ad
    from bracketgnn.nnet import _forward_tape, _leaves, _stack

    g, samples, p = random_problem(6)
    grads = []
    for c in (1.0, -3.5):
        P = _leaves(p)
        pred = _forward_tape(P, _stack(samples, "node_features"), _stack(samples, "edge_features"), g, FlowConfig())
        ad.backward(ad.batch_sse(pred, _stack(samples, "targets")), seed=c)
        grads.append({k: t.grad for k, t in P.items()})
    for k in grads[0]:
        np.testing.assert_allclose(grads[1][k], -3.5 * grads[0][k], rtol=1e-13, atol=1e-13 * np.abs(grads[1][k]).max())


def test_zero_residual_gives_zero_gradient():
    g, samples, p = random_problem(6)
    perfect = [Sample(s.node_features, s.edge_features, predict(p, [s], g, FlowConfig())[0], normalized=True) for s in samples]
    g0 = grad(p, perfect, g, FlowConfig())
    assert max(np.abs(v).max() for v in g0.values()) < 1e-12


def test_loss_scaling_scales_gradient():
    g, samples, p = random_problem(7)
    _, g1 = loss_and_grad(p, samples, g, FlowConfig())
    doubled = samples + samples
    _, g2 = loss_and_grad(p, doubled, g, FlowConfig())
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-12, atol=1e-15)


def test_adam_zero_gradient_decays_moments():
    p = init_params(SMALL, np.random.default_rng(0))
    st = OptimizerState.fresh(p)
    st.m = {k: np.ones_like(a) for k, a in p.arrays.items()}
    st.v = {k: np.ones_like(a) for k, a in p.arrays.items()}
    zeros = {k: np.zeros_like(a) for k, a in p.arrays.items()}
    _, st2 = adam_step(p, zeros, st)
    np.testing.assert_array_equal(st2.m["dec.b2"], 0.9)
    np.testing.assert_array_equal(st2.v["dec.b2"], 0.999)


def test_adam_zero_gradient_fresh_keeps_params():
    p = init_params(SMALL, np.random.default_rng(0))
    zeros = {k: np.zeros_like(a) for k, a in p.arrays.items()}
    p2, _ = adam_step(p, zeros, OptimizerState.fresh(p))
    assert p2.equals(p)


def test_adam_first_step_by_hand():
    p = init_params(SMALL, np.random.default_rng(0))
    gvals = {k: np.random.default_rng(1).normal(size=a.shape) for k, a in p.arrays.items()}
    p2, st = adam_step(p, gvals, OptimizerState.fresh(p))
    for k, g in gvals.items():
        # bias-corrected first step: m_hat = g, v_hat = g^2
        np.testing.assert_allclose(p2[k], p[k] - 1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-18)
    assert st.step == 1


def test_lr_schedule():
    st = OptimizerState.fresh(init_params(SMALL, np.random.default_rng(0)))
    assert [lr_at(st, s) for s in (0, 249, 250, 500)] == [1e-3, 1e-3, 1e-3 * 0.95, 1e-3 * 0.95**2]
    with pytest.raises(ValueError):
        OptimizerState.fresh(init_params(SMALL, np.random.default_rng(0)), lr=0.0)


def test_nonfinite_update_rejected():
    p = init_params(SMALL, np.random.default_rng(0))
    bad = {k: np.full_like(a, np.nan) for k, a in p.arrays.items()}
    with pytest.raises(FloatingPointError):
        adam_step(p, bad, OptimizerState.fresh(p))


def _toy(seed=0):
    g, samples, _ = random_problem(seed, batch=4)
    return g, samples


def test_train_epoch_empty_split():
    g, _ = _toy()
    with pytest.raises(ValueError):
        train_epoch(Surrogate.create(g, model=SMALL), [], np.random.default_rng(0))


def test_full_batch_step_descends():
    g, samples = _toy()
    sur = Surrogate.create(g, TrainConfig(lr=1e-4), model=SMALL)
    before = loss_and_grad(sur.params, samples, g, sur.flow)[0]
    train_epoch(sur, samples, np.random.default_rng(0), batch_size=len(samples))
    after = loss_and_grad(sur.params, samples, g, sur.flow)[0]
    assert after <= before


def test_training_is_reproducible():
    g, samples = _toy(1)
    runs = [train_surrogate(g, samples, samples[:2], TrainConfig(epochs=3, seed=5), model=SMALL)[1] for _ in range(2)]
    assert runs[0].train_loss == runs[1].train_loss
    assert runs[0].val_loss == runs[1].val_loss
    assert runs[0].best_params.equals(runs[1].best_params)


def test_fit_best_and_callback():
    g, samples = _toy(2)
    sur = Surrogate.create(g, model=SMALL)
    hist = fit(sur, samples, samples[:1], epochs=5, callback=lambda e, m, h: e == 1)
    assert len(hist.train_loss) == 2
    assert hist.best_val == min(hist.val_loss)


def test_checkpoint_roundtrip(tmp_path):
    g, samples = _toy(3)
    sur = Surrogate.create(g, model=SMALL, flow=FlowConfig(n_steps=3))
    train_epoch(sur, samples, np.random.default_rng(0))
    path = save_checkpoint(tmp_path / "m.ckpt", sur, graph_hash(g), {"note": 1})
    ck = load_checkpoint(path)
    assert ck.params.equals(sur.params)
    assert ck.flow == sur.flow and ck.graph_hash == graph_hash(g) and ck.extra == {"note": 1}
    assert ck.optimizer.step == sur.optimizer.step
    for k in sur.optimizer.m:
        assert np.array_equal(ck.optimizer.m[k], sur.optimizer.m[k])
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.ckpt")


def test_feature_width_mismatch():
    g, samples = _toy(4)
    with pytest.raises(DimensionError):
        predict(init_params(ModelConfig(d_in=7, width=8, latent=6, hidden=5), np.random.default_rng(0)), samples, g, FlowConfig())
