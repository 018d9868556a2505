import numpy as np
import pytest

from bracketgnn import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (f(up) - f(dn)) / (2 * eps)
    return g


def reverse(build, *arrays):
    leaves = [ad.Tensor(a.copy()) for a in arrays]
    out = build(*leaves)
    ad.backward(out)
    return [leaf.grad for leaf in leaves]


rng = np.random.default_rng(0)
X, W, b = rng.normal(size=(4, 3, 2)), rng.normal(size=(2, 5)), rng.normal(size=5)
C = rng.normal(size=(4, 3, 5))


def weighted(t, c):
    return ad.custom(np.sum(t.data * c), (t,), lambda g: (g * c,))


def test_linear_layer():
    gx, gW, gb = reverse(lambda x, w, bb: weighted(ad.linear(x, w, bb), C), X, W, b)
    np.testing.assert_allclose(gx, numeric_grad(lambda x: np.sum((x @ W + b) * C), X), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(gW, numeric_grad(lambda w: np.sum((X @ w + b) * C), W), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(gb, numeric_grad(lambda bb: np.sum((X @ W + bb) * C), b), rtol=1e-7, atol=1e-9)


def test_tanh_chain():
    (gx,) = reverse(lambda x: weighted(ad.tanh(ad.linear(x, W)), C), X)
    np.testing.assert_allclose(gx, numeric_grad(lambda x: np.sum(np.tanh(x @ W) * C), X), rtol=1e-7, atol=1e-9)


def test_concat_slice_lincomb():
    a, c = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    K = rng.normal(size=(2, 2))

    def build(a, c):
        z = ad.concat0(a, c)
        return weighted(ad.lincomb([(2.0, z), (-0.5, z)]), np.vstack([K, K, K[:1]]))

    ga, gc = reverse(build, a, c)
    np.testing.assert_allclose(ga, 1.5 * np.vstack([K, K[:1]]))
    np.testing.assert_allclose(gc, 1.5 * np.vstack([K[1:], K[:1]]))
    (gs,) = reverse(lambda x: weighted(ad.slice0(x, 1, 3), K), a)
    np.testing.assert_array_equal(gs, np.vstack([np.zeros((1, 2)), K]))


def test_batch_sse_value_and_gradient():
    pred, target = rng.normal(size=(5, 3, 2)), rng.normal(size=(5, 3, 2))
    val = ad.batch_sse(ad.Tensor(pred), target).data
    assert val == pytest.approx(np.sum((pred - target) ** 2) / 3, rel=1e-14)
    (g,) = reverse(lambda p: ad.batch_sse(p, target), pred)
    np.testing.assert_allclose(g, 2 * (pred - target) / 3, rtol=1e-14)
    with pytest.raises(ValueError):
        ad.batch_sse(ad.Tensor(pred), target[:4])


def test_shared_subexpression_accumulates():
    x = ad.Tensor(np.array([1.5, -2.0]))
    y = ad.lincomb([(1.0, x), (3.0, x)])
    ad.backward(weighted(y, np.ones(2)))
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_unused_leaf_gets_no_gradient():
    x, unused = ad.Tensor(np.ones(2)), ad.Tensor(np.ones(2))
    ad.backward(weighted(ad.tanh(x), np.ones(2)))
    assert unused.grad is None
