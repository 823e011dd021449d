"""Differentiable operators.

Layout conventions: sequences are ``[B, C, T]``; dense features ``[B, F]``;
conv kernels ``[C_out, C_in, K]`` applied as cross-correlation (no flip).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    # plain numbers/arrays adopt the tensor operand's dtype
    if isinstance(a, Tensor):
        return a, as_tensor(b, dtype=None if isinstance(b, Tensor) else a.dtype)
    return as_tensor(a, dtype=b.dtype), b


# ------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return make(out, (a, b), backward, "div")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    return make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); the gradient passes only where x is above the floor."""
    mask = x.data > floor
    return make(np.maximum(x.data, floor).astype(x.dtype), (x,), lambda g: (g * mask,), "clamp_min")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make(np.asarray(out), (x,), backward, "mean")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, T] -> [B, C], mean over time."""
    if x.shape[-1] == 0:
        raise ValueError("global average pool over an empty time axis")
    return mean(x, axis=-1)


# ------------------------------------------------------------ shape / index


def reshape(x: Tensor, shape) -> Tensor:
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make(np.array(x.data[index]), (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; duplicates in ``indices`` sum their gradients."""
    indices = np.asarray(indices)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return make(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


concat_channels = concat


# ------------------------------------------------------------------ dense


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped ``[out, in]``."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight fan-in {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, backward, "linear")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ----------------------------------------------------------- convolution


def conv_output_length(n_time: int, kernel: int, stride: int, pad: int) -> int:
    return (n_time + 2 * pad - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    n_batch, c_in, n_time = x.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise ValueError(f"conv1d: input has {c_in} channels, kernel expects {w_in}")
    if k > n_time + 2 * pad:
        raise ValueError("conv1d: kernel longer than padded input")
    t_out = conv_output_length(n_time, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :t_out]
    cols = windows.transpose(0, 2, 1, 3).reshape(n_batch * t_out, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    out = (cols @ w2.T).reshape(n_batch, t_out, c_out).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(n_batch * t_out, c_out)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n_batch, t_out, c_in, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, pad : pad + n_time] if pad else gxp
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, backward, "conv1d")


# ------------------------------------------------------------ batch norm


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, time).

    In training mode the running buffers are updated in place (unbiased variance,
    as is conventional); eval mode normalizes with the buffers.
    """
    shape = (1, -1, 1)
    if training:
        n = x.shape[0] * x.shape[2]
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2))
            gb = g.sum(axis=(0, 2))
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(shape)
                s1 = dxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                gx = inv.reshape(shape) / n * (n * dxhat - s1 - xhat * s2)
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)

        def backward(g):
            gx = g * (gamma.data * inv).reshape(shape)
            return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    out = (gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)).astype(x.dtype)
    return make(out, (x, gamma, beta), backward, "batchnorm1d")


# ------------------------------------------------------- softmax family


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return make(
        out,
        (x,),
        lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
        "log_softmax",
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
        "softmax",
    )
