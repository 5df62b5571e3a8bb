"""Differentiable operators on NCHW tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_result

IGNORE_INDEX = 255
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
# Clamp keeps sigmoid strictly inside (0, 1) in float64.
SIGMOID_CLAMP = 30.0


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the axis."""

    def __init__(self, op: str, axis: str, expected, got):
        super().__init__(f"{op}: {axis} mismatch (expected {expected}, got {got})")
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), bw, "mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return make_result(np.asarray(x.data.sum()), (x,), bw, "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size

    def bw(g):
        return (np.full(shape, g.reshape(()) / n, dtype=g.dtype),)

    return make_result(np.asarray(x.data.mean()), (x,), bw, "mean")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out = 1.0 / (1.0 + np.exp(-z))
    inside = np.abs(x.data) < SIGMOID_CLAMP

    def bw(g):
        return (g * out * (1.0 - out) * inside,)

    return make_result(out, (x,), bw, "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax in range(len(ref)):
            if ax != axis and t.shape[ax] != ref[ax]:
                raise ShapeError("concat", _AXIS_NAMES[ax], ref[ax], t.shape[ax])
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result(x.data[:, start:stop].copy(), (x,), bw, "slice")


_AXIS_NAMES = ("batch", "channel", "height", "width")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of NCHW input with an (O, C/groups, kh, kw) kernel.

    Evaluated as a sum over kernel taps of strided views, each a small
    matrix product; no im2col buffer is materialised.
    """
    if x.data.ndim != 4:
        raise ShapeError("conv2d", "rank", 4, x.data.ndim)
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if c % groups or o % groups:
        raise ShapeError("conv2d", "channel", f"multiple of groups={groups}", c)
    if cg != c // groups:
        raise ShapeError("conv2d", "channel", cg * groups, c)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1:
        raise ShapeError("conv2d", "height", f">= {kh - 2 * padding}", h)
    if wo < 1:
        raise ShapeError("conv2d", "width", f">= {kw - 2 * padding}", w)
    if bias is not None and bias.data.size != o:
        raise ShapeError("conv2d", "channel", o, bias.data.size)

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    og = o // groups
    depthwise = groups == c and cg == 1 and og == 1

    def view(arr, i, j):
        return arr[:, :, i:i + hspan:stride, j:j + wspan:stride]

    out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
    if groups == 1:
        # accumulate as (N, Ho, Wo, O) then transpose once
        acc = np.zeros((n, ho, wo, o), dtype=xd.dtype)
        xt = xp.transpose(0, 2, 3, 1)
        for i in range(kh):
            for j in range(kw):
                acc += xt[:, i:i + hspan:stride, j:j + wspan:stride, :] @ wd[:, :, i, j].T
        out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    elif depthwise:
        for i in range(kh):
            for j in range(kw):
                out += view(xp, i, j) * wd[:, 0, i, j][None, :, None, None]
    else:
        wg = wd.reshape(groups, og, cg, kh, kw)
        outg = out.reshape(n, groups, og, ho, wo)
        for i in range(kh):
            for j in range(kw):
                xs = view(xp, i, j).reshape(n, groups, cg, ho, wo)
                outg += np.einsum("ngchw,goc->ngohw", xs, wg[:, :, :, i, j])
        out = outg.reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        if groups == 1:
            gt = g.transpose(0, 2, 3, 1)  # N, Ho, Wo, O
            gt2 = gt.reshape(-1, o)
            xt = xp.transpose(0, 2, 3, 1)
            gxt = gx.transpose(0, 2, 3, 1) if gx is not None else None
            for i in range(kh):
                for j in range(kw):
                    if gw is not None:
                        xs = xt[:, i:i + hspan:stride, j:j + wspan:stride, :].reshape(-1, c)
                        gw[:, :, i, j] = gt2.T @ xs
                    if gxt is not None:
                        gxt[:, i:i + hspan:stride, j:j + wspan:stride, :] += gt @ wd[:, :, i, j]
        elif depthwise:
            for i in range(kh):
                for j in range(kw):
                    if gw is not None:
                        gw[:, 0, i, j] = (g * view(xp, i, j)).sum(axis=(0, 2, 3))
                    if gx is not None:
                        view(gx, i, j)[...] += g * wd[:, 0, i, j][None, :, None, None]
        else:
            gg = g.reshape(n, groups, og, ho, wo)
            wg_ = wd.reshape(groups, og, cg, kh, kw)
            gwg = gw.reshape(groups, og, cg, kh, kw) if gw is not None else None
            for i in range(kh):
                for j in range(kw):
                    if gwg is not None:
                        xs = view(xp, i, j).reshape(n, groups, cg, ho, wo)
                        gwg[:, :, :, i, j] = np.einsum("ngohw,ngchw->goc", gg, xs)
                    if gx is not None:
                        view(gx, i, j)[...] += np.einsum(
                            "ngohw,goc->ngchw", gg, wg_[:, :, :, i, j]).reshape(n, c, ho, wo)
        if gx is not None and padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_result(out, parents, lambda g: bw(g)[:2], "conv2d")
    return make_result(out, parents, bw, "conv2d")


def depthwise_separable_conv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor,
                               padding: int | None = None) -> Tensor:
    """Per-channel spatial conv followed by 1x1 channel mixing (same padding)."""
    c = x.shape[1]
    if depthwise.shape[0] != c or depthwise.shape[1] != 1:
        raise ShapeError("depthwise_separable_conv2d", "channel", (c, 1), depthwise.shape[:2])
    if padding is None:
        padding = depthwise.shape[2] // 2
    mid = conv2d(x, depthwise, None, stride=1, padding=padding, groups=c)
    return conv2d(mid, pointwise, None)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _linear_axis(n_in: int, n_out: int):
    """Half-pixel-centre source indices and weights along one axis."""
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    i0, i1, frac = _linear_axis(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes, half-pixel centres, edge clamp.

    Interpolates as ``a0 + t * (a1 - a0)`` so constant inputs stay exactly
    constant.
    """
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a.copy()
    i0, i1, t = _linear_axis(h, out_h)
    t = t.astype(a.dtype)[:, None]
    lo, hi = a[..., i0, :], a[..., i1, :]
    a = lo + t * (hi - lo)
    j0, j1, s = _linear_axis(w, out_w)
    s = s.astype(a.dtype)
    lo, hi = a[..., j0], a[..., j1]
    return lo + s * (hi - lo)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output extents must be >= 1, got {(out_h, out_w)}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    out = resize_array(x.data, out_h, out_w)

    def bw(g):
        mh = _interp_matrix(h, out_h, g.dtype)
        mw = _interp_matrix(w, out_w, g.dtype)
        return (mh.T @ g @ mw,)

    return make_result(out, (x,), bw, "resize")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, training: bool,
               stats: RunningStats, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    Training mode normalises with batch statistics and folds them into
    ``stats`` as ``stats = momentum * stats + (1 - momentum) * batch``.
    """
    c = x.shape[1]
    if scale.data.size != c or shift.data.size != c:
        raise ShapeError("batch_norm", "channel", c, scale.data.size)
    xd = x.data
    sc = scale.data.reshape(1, c, 1, 1)
    sh = shift.data.reshape(1, c, 1, 1)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var * (m / (m - 1)) if m > 1 else var
        stats.mean = (momentum * stats.mean + (1 - momentum) * mean.reshape(stats.mean.shape)).astype(stats.mean.dtype)
        stats.var = (momentum * stats.var + (1 - momentum) * unbiased.reshape(stats.var.shape)).astype(stats.var.dtype)

        def bw(g):
            gsc = (g * xhat).sum(axis=(0, 2, 3)).reshape(scale.shape)
            gsh = g.sum(axis=(0, 2, 3)).reshape(shift.shape)
            gxhat = g * sc
            gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, gsc, gsh
    else:
        mean = stats.mean.reshape(1, c, 1, 1).astype(xd.dtype)
        inv = 1.0 / np.sqrt(stats.var.reshape(1, c, 1, 1).astype(xd.dtype) + eps)
        xhat = (xd - mean) * inv

        def bw(g):
            gsc = (g * xhat).sum(axis=(0, 2, 3)).reshape(scale.shape)
            gsh = g.sum(axis=(0, 2, 3)).reshape(shift.shape)
            return g * sc * inv, gsc, gsh

    return make_result(xhat * sc + sh, (x, scale, shift), bw, "batch_norm")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def log_softmax_array(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of -log softmax at the true class over non-ignored pixels."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError("softmax_cross_entropy", "label", (n, h, w), labels.shape)
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every pixel is ignored")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"softmax_cross_entropy: label values outside [0, {k}) and != {ignore_index}")
    safe = np.where(valid, labels, 0).astype(np.intp)
    logp = log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (p - onehot) * valid[:, None] / count
        return (grad * g.reshape(()),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_xent")
