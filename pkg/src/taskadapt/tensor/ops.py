"""Differentiable operations on :class:`~taskadapt.tensor.autograd.Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per parent (``None`` for parents
that do not need one).
"""

from __future__ import annotations

import numpy as np

from .autograd import DTYPE, Tensor, as_tensor

_node = Tensor._node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        c = float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g * b.data, sa) if a.requires_grad else None,
                _unbroadcast(g * a.data, sb) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, sa) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, sb) if b.requires_grad else None)

    return _node(out, (a, b), back, "div")


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = x.data <= 0
    em1 = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(neg, alpha * em1, x.data)
    slope = np.where(neg, alpha * (em1 + 1.0), 1.0)
    return _node(out, (x,), lambda g: (g * slope,), "elu")


# -- reductions and shape ---------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a] for a in axes]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _node(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), back, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    return _node(x.data.T, (x,), lambda g: (g.T,), "transpose")


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), back, "index")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) if t.requires_grad else None for i, t in enumerate(tensors))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def set_mean(x: Tensor) -> Tensor:
    """Mean over the leading (set/instance) axis."""
    return mean(x, axis=0)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    if a.ndim > 2 or b.ndim > 2:
        raise ValueError(f"matmul supports 1-d/2-d operands, got {a.shape} @ {b.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = g @ b.data.T
            else:
                ga = np.outer(g, b.data) if a.ndim == 2 else g * b.data
        if b.requires_grad:
            if a.ndim == 2:
                gb = a.data.T @ g
            else:
                gb = np.outer(a.data, g) if b.ndim == 2 else g * a.data
        return ga, gb

    return _node(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (N, in) or (in,); weight is (in, out)."""
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    vec = x.ndim == 1

    def back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.outer(x.data, g) if vec else x.data.T @ g
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g if vec else g.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back, "linear")


# -- convolution and pooling ------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input and OIHW kernel, via im2col."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input C={c} but kernel I={ci}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input H={hp}, W={wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # Columns are laid out (C, kh, kw, N, Ho, Wo) so every copy below is a
    # contiguous block write.
    xt = x.data.transpose(1, 0, 2, 3)
    if pad:
        xp = np.zeros((c, n, hp, wp), dtype=DTYPE)
        xp[:, :, pad:pad + h, pad:pad + w] = xt
    else:
        xp = xt
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j]
            if pad:
                dxp = dxp[:, :, pad:pad + h, pad:pad + w]
            gx = np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ValueError(f"max_pool2d needs spatial size >= 2, got {h}x{w}")
    win = x.data[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def back(g):
        dwin = np.zeros((n, c, ho, wo, 4), dtype=DTYPE)
        np.put_along_axis(dwin, arg, g[..., None], axis=-1)
        d = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        if (2 * ho, 2 * wo) != (h, w):
            d = np.pad(d, ((0, 0), (0, 0), (0, h - 2 * ho), (0, w - 2 * wo)))
        return (d,)

    return _node(out, (x,), back, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),)

    return _node(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


def _adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_avg_pool2d(x: Tensor, output_size: int | tuple[int, int]) -> Tensor:
    """Average pooling onto a fixed output grid (bin edges floor/ceil)."""
    oh, ow = (output_size, output_size) if isinstance(output_size, int) else output_size
    n, c, h, w = x.shape
    rows, cols = _adaptive_bins(h, oh), _adaptive_bins(w, ow)
    out = np.empty((n, c, oh, ow), dtype=DTYPE)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def back(g):
        d = np.zeros((n, c, h, w), dtype=DTYPE)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                d[:, :, r0:r1, c0:c1] += g[:, :, i, j][:, :, None, None] / ((r1 - r0) * (c1 - c0))
        return (d,)

    return _node(out, (x,), back, "adaptive_avg_pool2d")


# -- normalisation and modulation -------------------------------------------

def batch_norm(x: Tensor, mean: np.ndarray, var: np.ndarray, scale: Tensor, shift: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Eval-mode batch norm with fixed per-channel statistics.

    Output is ``scale * (x - mean) / sqrt(var + eps) + shift`` channel-wise and
    is computed elementwise, so each example is independent of the batch.
    """
    mean = np.asarray(mean, dtype=DTYPE)
    var = np.asarray(var, dtype=DTYPE)
    if np.any(var < 0):
        raise ValueError("batch_norm variance must be non-negative")
    c = x.shape[1]
    if mean.shape != (c,) or var.shape != (c,) or scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batch_norm statistics must have shape ({c},)")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    a = scale.data * inv
    out = x.data * a.reshape(bshape) + (shift.data - mean * a).reshape(bshape)
    axes = (0,) + tuple(range(2, x.ndim))

    def back(g):
        gx = g * a.reshape(bshape) if x.requires_grad else None
        gs = None
        if scale.requires_grad:
            xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
            gs = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes) if shift.requires_grad else None
        return gx, gs, gb

    return _node(out, (x, scale, shift), back, "batch_norm")


def batch_norm_train(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5):
    """Train-mode batch norm using the statistics of ``x`` itself.

    Returns ``(out, batch_mean, batch_var_unbiased)``; the statistics are plain
    arrays for the caller's running-average update.
    """
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.data.size // c
    mu = x.data.mean(axis=axes)
    centered = x.data - mu.reshape(bshape)
    var = (centered * centered).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv.reshape(bshape)
    out = scale.data.reshape(bshape) * xhat + shift.data.reshape(bshape)

    def back(g):
        gs = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gb = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * scale.data.reshape(bshape)
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = inv.reshape(bshape) * (dxhat - s1 / count - xhat * s2 / count)
        return gx, gs, gb

    unbiased = var * count / (count - 1) if count > 1 else var
    return _node(out, (x, scale, shift), back, "batch_norm_train"), mu, unbiased


def film(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine modulation ``gamma[c] * x[n, c, ...] + beta[c]``."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"film vectors must have length {c} (channels), got {gamma.shape} and {beta.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    out = gamma.data.reshape(bshape) * x.data + beta.data.reshape(bshape)

    def back(g):
        gx = g * gamma.data.reshape(bshape) if x.requires_grad else None
        gg = (g * x.data).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return _node(out, (x, gamma, beta), back, "film")


# -- softmax and losses -------------------------------------------------------

def softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), back, "log_softmax")


def softmax(x: Tensor) -> Tensor:
    p = softmax_array(x.data)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), back, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` is (M, C); stabilised with log-sum-exp.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects (M, C) logits and M labels, got {logits.shape} and {labels.shape}")
    m, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {labels.tolist()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    nll = lse - shifted[rows, labels]
    p = np.exp(shifted - lse[:, None])

    def back(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / m),)

    return _node(np.asarray(nll.mean()), (logits,), back, "cross_entropy")


def softmax_nll(logits: Tensor, label: int) -> Tensor:
    """−log softmax(logits)[label] for a single logit vector of length C."""
    c = logits.shape[-1]
    if logits.ndim != 1:
        raise ValueError(f"softmax_nll expects a logit vector, got shape {logits.shape}")
    if not 0 <= int(label) < c:
        raise ValueError(f"label {label} out of range [0, {c})")
    return cross_entropy(reshape(logits, (1, c)), [int(label)])
