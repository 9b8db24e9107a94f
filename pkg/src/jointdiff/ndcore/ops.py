"""Differentiable ops over channel-last arrays.

Images are ``(H, W, C)`` or batched ``(N, H, W, C)``.  Matmul-style
reductions run in :func:`~jointdiff.ndcore.tensor.accumulation_dtype`
(float64 unless a caller opts out) and are rounded back to the input dtype.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, accumulation_dtype, as_tensor, make_result


def _out_dtype(*arrays: np.ndarray):
    return np.result_type(*[a.dtype for a in arrays])


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _mm(a: np.ndarray, b: np.ndarray, acc) -> np.ndarray:
    a2 = np.ascontiguousarray(a, dtype=acc).reshape(-1, a.shape[-1])
    return a2 @ b.astype(acc, copy=False)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = (a.data + b.data).astype(_out_dtype(a.data, b.data), copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = (a.data - b.data).astype(_out_dtype(a.data, b.data), copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting; also serves as layer-scale."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        s = float(b)
        out = (a.data * s).astype(a.dtype, copy=False)
        return make_result(out, (a,), lambda g: (g * s,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    out = (a.data * b.data).astype(_out_dtype(a.data, b.data), copy=False)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and avoids masked indexing
    return (0.5 * (1.0 + np.tanh(0.5 * v))).astype(v.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x) -> Tensor:
    """x * sigmoid(x), fused."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s * (1 + x.data * (1 - s))),)

    return make_result(out, (x,), bw, "silu")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype, copy=False)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return make_result(s, (x,), bw, "softmax")


# ---------------------------------------------------------------- structural


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tuple(ts), bw, "concat")


def total(x) -> Tensor:
    """Sum of all entries, accumulated in float64."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims), dtype=x.dtype)
    count = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make_result(out, (x,), bw, "mean")


# ---------------------------------------------------------------- linear maps


def dense(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input width {x.shape[-1]} does not match weight {w.shape}")
    acc = accumulation_dtype()
    lead = x.shape[:-1]
    dt = _out_dtype(x.data, w.data)
    y = _mm(x.data, w.data, acc)
    parents: tuple = (x, w)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data.astype(acc)
        parents = (x, w, b)
    out = y.reshape(*lead, w.shape[1]).astype(dt)

    def bw(g):
        g2 = np.ascontiguousarray(g, dtype=acc).reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T.astype(acc)).reshape(x.shape) if x.requires_grad else None
        gw = np.ascontiguousarray(x.data, dtype=acc).reshape(-1, w.shape[0]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0).reshape(b.shape)

    return make_result(out, parents, bw, "dense")


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel[kh, kw, Cin, Cout]``, zero padded.

    The window offsets are visited in row-major order and each offset's
    contribution is added to a float64 (by default) accumulator.
    """
    x, w = as_tensor(x), as_tensor(kernel)
    xd, squeeze = _batched(x)
    n, h, wd, cin = xd.shape
    kh, kw, kcin, cout = w.shape
    if kcin != cin:
        raise ValueError(
            f"conv2d: input has {cin} channels but kernel {tuple(w.shape)} expects {kcin}"
        )
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    acc = accumulation_dtype()
    dt = _out_dtype(x.data, w.data)

    def window(i: int, j: int) -> tuple[slice, slice]:
        return (slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))

    y = np.zeros((n * ho * wo, cout), dtype=acc)
    for i in range(kh):
        for j in range(kw):
            si, sj = window(i, j)
            y += _mm(xp[:, si, sj, :], w.data[i, j], acc)
    out = y.reshape(n, ho, wo, cout).astype(dt)
    if squeeze:
        out = out[0]

    def bw(g):
        g2 = np.ascontiguousarray(g, dtype=acc).reshape(-1, cout)
        gxp = np.zeros(xp.shape, dtype=acc) if x.requires_grad else None
        gw = np.zeros(w.shape, dtype=acc) if w.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                si, sj = window(i, j)
                if gw is not None:
                    patch = np.ascontiguousarray(xp[:, si, sj, :], dtype=acc).reshape(-1, cin)
                    gw[i, j] = patch.T @ g2
                if gxp is not None:
                    gxp[:, si, sj, :] += (g2 @ w.data[i, j].T.astype(acc)).reshape(n, ho, wo, cin)
        gx = None
        if gxp is not None:
            gx = gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp
            if squeeze:
                gx = gx[0]
        return gx, gw

    return make_result(out, (x, w), bw, "conv2d")


def conv_transpose2x(x, kernel) -> Tensor:
    """Stride-2 transposed convolution with a ``(2, 2, Cin, Cout)`` kernel (exact x2 upsample)."""
    x, w = as_tensor(x), as_tensor(kernel)
    xd, squeeze = _batched(x)
    n, h, wd, cin = xd.shape
    if w.shape[:3] != (2, 2, cin):
        raise ValueError(f"conv_transpose2x: kernel {tuple(w.shape)} incompatible with {cin} input channels")
    cout = w.shape[3]
    acc = accumulation_dtype()
    dt = _out_dtype(x.data, w.data)
    out = np.empty((n, 2 * h, 2 * wd, cout), dtype=dt)
    for a in range(2):
        for b in range(2):
            out[:, a::2, b::2, :] = _mm(xd, w.data[a, b], acc).reshape(n, h, wd, cout)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros((n * h * wd, cin), dtype=acc) if x.requires_grad else None
        gw = np.zeros(w.shape, dtype=acc) if w.requires_grad else None
        xf = np.ascontiguousarray(xd, dtype=acc).reshape(-1, cin) if gw is not None else None
        for a in range(2):
            for b in range(2):
                ga = np.ascontiguousarray(g4[:, a::2, b::2, :], dtype=acc).reshape(-1, cout)
                if gx is not None:
                    gx += ga @ w.data[a, b].T.astype(acc)
                if gw is not None:
                    gw[a, b] = xf.T @ ga
        if gx is not None:
            gx = gx.reshape(n, h, wd, cin)
            if squeeze:
                gx = gx[0]
        return gx, gw

    return make_result(out, (x, w), bw, "conv_transpose2x")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Integer-factor nearest-neighbour upsampling of the two spatial axes."""
    x = as_tensor(x)
    f = int(factor)
    out = x.data.repeat(f, axis=-3).repeat(f, axis=-2)

    def bw(g):
        *lead, hh, ww, c = g.shape
        return (g.reshape(*lead, hh // f, f, ww // f, f, c).sum(axis=(-4, -2)),)

    return make_result(out, (x,), bw, "upsample_nearest")


def resize_nearest(x, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize to an arbitrary ``(out_h, out_w)``."""
    x = as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    out = x.data[..., rows, :, :][..., :, cols, :]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        tmp = np.zeros(x.shape[:-3] + (h, out_w, x.shape[-1]), dtype=g.dtype)
        np.add.at(tmp, (Ellipsis, rows, slice(None), slice(None)), g)
        np.add.at(gx, (Ellipsis, slice(None), cols, slice(None)), tmp)
        return (gx,)

    return make_result(out, (x,), bw, "resize_nearest")


# ---------------------------------------------------------------- losses


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over every entry, as a scalar."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def bw(g):
        gp = (2.0 / n) * float(g) * diff
        return gp.astype(pred.dtype), (-gp).astype(target.dtype)

    return make_result(out, (pred, target), bw, "mse_loss")


def cross_entropy(logits, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise cross-entropy; ``ignore_index`` pixels contribute nothing.

    With every pixel ignored the loss is 0 and the gradient is identically 0.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_index
    if np.any(labels[valid] >= k) or np.any(labels[valid] < 0):
        raise ValueError(f"cross_entropy: label outside 0..{k - 1}")
    n_valid = int(valid.sum())
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / n_valid if n_valid else 0.0
    out = np.asarray(loss, dtype=logits.dtype)

    def bw(g):
        if not n_valid:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], axis=-1) - 1.0, axis=-1)
        p *= valid[..., None] * (float(g) / n_valid)
        return (p.astype(logits.dtype),)

    return make_result(out, (logits,), bw, "cross_entropy")
