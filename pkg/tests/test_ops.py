import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbd_fusion import ops
from rgbd_fusion.ops import RunningStats, ShapeError
from rgbd_fusion.tensor import Param, Tensor, backward


def conv_loops(x, w, b, stride, padding, groups):
    """Plain nested-loop cross-correlation, used as an independent oracle."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += w[oc, ci, di, dj] * xp[bi, g * cg + ci, i * stride + di, j * stride + dj]
                    out[bi, oc, i, j] = acc + (0.0 if b is None else b[oc])
    return out


def numeric_grad(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 1, 4)])
def test_conv2d_matches_loop_oracle(rng, stride, padding, groups):
    x = rng.normal(size=(2, 4, 6, 5))
    w = rng.normal(size=(4, 4 // groups, 3, 3))
    b = rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, groups)
    np.testing.assert_allclose(out.data, conv_loops(x, w, b, stride, padding, groups), atol=1e-12)


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_conv2d_gradients_against_finite_differences(rng, groups):
    x = rng.normal(size=(1, 4, 5, 5))
    w = rng.normal(size=(4, 4 // groups, 3, 3))
    b = rng.normal(size=4)
    r = rng.normal(size=(1, 4, 3, 3))
    xt, wt, bt = Param(x), Param(w), Param(b)
    backward((ops.conv2d(xt, wt, bt, 2, 1, groups) * Tensor(r)).sum())

    def f():
        return float((conv_loops(x, w, b, 2, 1, groups) * r).sum())

    for got, arr in ((xt.grad, x), (wt.grad, w), (bt.grad, b)):
        np.testing.assert_allclose(got, numeric_grad(f, arr), atol=1e-6)


def test_conv2d_shape_error_names_axis():
    with pytest.raises(ShapeError, match="channel"):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ShapeError, match="height"):
        ops.conv2d(Tensor(np.zeros((1, 1, 1, 4))), Tensor(np.zeros((1, 1, 3, 3))))


def test_sigmoid_formula_and_clamp():
    z = np.array([-50.0, -30.0, -2.0, 0.0, 1.5, 30.0, 50.0])
    out = ops.sigmoid(Tensor(z)).data
    ref = 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))
    np.testing.assert_allclose(out, ref, rtol=1e-15)
    assert out[3] == 0.5
    assert np.all((out > 0) & (out < 1))


def test_sigmoid_gradient():
    z = np.array([-3.0, -0.2, 0.0, 0.7, 4.0])
    p = Param(z.copy())
    backward(ops.sigmoid(p).sum())
    s = 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(p.grad, s * (1 - s), rtol=1e-12)


def test_cross_entropy_matches_loop_oracle(rng):
    logits = rng.normal(size=(2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    labels[1, 2, 1] = 255
    total, count = 0.0, 0
    for n in range(2):
        for i in range(3):
            for j in range(3):
                if labels[n, i, j] == 255:
                    continue
                z = logits[n, :, i, j]
                total += -(z[labels[n, i, j]] - np.log(np.sum(np.exp(z))))
                count += 1
    loss = ops.softmax_cross_entropy(Tensor(logits), labels)
    assert loss.item() == pytest.approx(total / count, rel=1e-12)


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(1, 3, 2, 2))
    labels = np.array([[[0, 2], [255, 1]]])
    p = Param(logits.copy())
    backward(ops.softmax_cross_entropy(p, labels))

    def f():
        return ops.softmax_cross_entropy(Tensor(logits), labels).item()

    np.testing.assert_allclose(p.grad, numeric_grad(f, logits), atol=1e-7)
    assert np.all(p.grad[0, :, 1, 0] == 0)


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(Tensor(np.zeros((1, 2, 1, 1))), np.full((1, 1, 1), 255))


def test_resize_hand_values():
    a = np.array([[0.0, 4.0]])
    # half-pixel centres, 2 -> 4 columns: sources -0.25, 0.25, 0.75, 1.25 clamped to [0, 1]
    np.testing.assert_allclose(ops.resize_array(a, 1, 4), [[0.0, 1.0, 3.0, 4.0]])
    b = np.arange(4.0).reshape(2, 2)
    np.testing.assert_allclose(ops.resize_array(b, 1, 1), [[1.5]])


@given(st.floats(-1e3, 1e3, allow_nan=False), st.integers(1, 9), st.integers(1, 9))
def test_resize_keeps_constants_exact(value, oh, ow):
    a = np.full((2, 3, 4), value)
    assert np.all(ops.resize_array(a, oh, ow) == value)


def test_resize_gradient_is_adjoint(rng):
    x = rng.normal(size=(1, 2, 3, 5))
    g = rng.normal(size=(1, 2, 7, 4))
    p = Param(x)
    backward((ops.bilinear_resize(p, 7, 4) * Tensor(g)).sum())
    # <R x, g> == <x, R^T g> for a linear map R
    lhs = float((ops.resize_array(x, 7, 4) * g).sum())
    assert float((x * p.grad).sum()) == pytest.approx(lhs, rel=1e-12)


def test_batch_norm_training_and_running_stats(rng):
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    stats = RunningStats(np.zeros(2), np.ones(2))
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, stats)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    ref = (x - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    np.testing.assert_allclose(stats.mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    x = np.full((1, 1, 2, 2), 3.0)
    stats = RunningStats(np.array([1.0]), np.array([4.0 - 1e-5]))
    out = ops.batch_norm(Tensor(x), Tensor([2.0]), Tensor([0.5]), False, stats)
    np.testing.assert_allclose(out.data, 2.0 * (3.0 - 1.0) / 2.0 + 0.5)


def test_batch_norm_training_gradient(rng):
    x = rng.normal(size=(3, 2, 2, 2))
    sc, sh = rng.normal(size=2), rng.normal(size=2)
    r = rng.normal(size=x.shape)
    px, ps, pb = Param(x), Param(sc), Param(sh)
    backward((ops.batch_norm(px, ps, pb, True, RunningStats(np.zeros(2), np.ones(2))) * Tensor(r)).sum())

    def f():
        out = ops.batch_norm(Tensor(x), Tensor(sc), Tensor(sh), True, RunningStats(np.zeros(2), np.ones(2)))
        return float((out.data * r).sum())

    for got, arr in ((px.grad, x), (ps.grad, sc), (pb.grad, sh)):
        np.testing.assert_allclose(got, numeric_grad(f, arr), atol=1e-6)


def test_concat_and_slice_roundtrip(rng):
    a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3))
    pa, pb = Param(a), Param(b)
    cat = ops.concat([pa, pb])
    np.testing.assert_array_equal(ops.channel_slice(cat, 2, 5).data, b)
    backward(ops.channel_slice(cat, 1, 3).sum())
    assert pa.grad[0, 1].sum() == 9 and pa.grad[0, 0].sum() == 0
    assert pb.grad[0, 0].sum() == 9 and pb.grad[0, 1:].sum() == 0
    with pytest.raises(ShapeError, match="height"):
        ops.concat([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])
