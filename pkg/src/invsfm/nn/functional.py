"""Differentiable layer primitives on NCHW tensors."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateBatch, ShapeMismatch
from .tensor import Tensor, make


def _pads(padding):
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    (pt, pb), (pl, pr) = padding
    return (pt, pb), (pl, pr)


def conv_output_size(size: int, kernel: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (size + pad_lo + pad_hi - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw).

    ``padding`` is an int or ``((top, bottom), (left, right))``.  The product is
    accumulated one kernel tap at a time, so no im2col buffer is materialized.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and weights, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if C != Ci:
        raise ShapeMismatch(f"conv2d: input has {C} channels, weights expect {Ci}")
    (pt, pb), (pl, pr) = _pads(padding)
    Ho = conv_output_size(H, kh, stride, pt, pb)
    Wo = conv_output_size(W, kw, stride, pl, pr)
    if Ho <= 0 or Wo <= 0:
        raise ShapeMismatch(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw}")
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    wd = w.data
    # per-tap (O, C) matrices must be contiguous for matmul to reach BLAS
    wt = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))

    def tap(i, j):
        return xp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s].reshape(N, C, Ho * Wo)

    out = np.zeros((N, O, Ho * Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.matmul(wt[i, j], tap(i, j))
    out = out.reshape(N, O, Ho, Wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(N, O, Ho * Wo)
        dw = np.empty_like(wd) if w.requires_grad else None
        dxp = np.zeros_like(xp) if x.requires_grad else None
        wtt = np.ascontiguousarray(wd.transpose(2, 3, 1, 0)) if dxp is not None else None
        for i in range(kh):
            for j in range(kw):
                if dw is not None:
                    dw[:, :, i, j] = np.matmul(g2, tap(i, j).transpose(0, 2, 1)).sum(axis=0)
                if dxp is not None:
                    dxs = np.matmul(wtt[i, j], g2).reshape(N, C, Ho, Wo)
                    dxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dxs
        dx = None if dxp is None else dxp[:, :, pt:pt + H, pl:pl + W]
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward if b is not None else (lambda g: backward(g)[:2]))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalization over (N, H, W) for 4-D or over N for 2-D input.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (biased variance),
    unless ``update_stats`` is false.
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    m = x.data.size // x.shape[1]
    if training:
        if m <= 1:
            raise DegenerateBatch(f"batch norm needs more than one value per channel in training mode (got {m})")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    mu = mu.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            ) * inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make(x.data * pos, (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1 - out * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (N, C, H, 2, W, 2)).reshape(N, C, 2 * H, 2 * W)
    return make(out, (x,), lambda g: (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),))


def maxpool2x2(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros(win.shape, g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        return (dx,)

    return make(out, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weights {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        return g @ w.data, g.T @ x.data, (g.sum(axis=0) if b is not None else None)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward if b is not None else (lambda g: backward(g)[:2]))


def concat(tensors, axis: int = 1) -> Tensor:
    """Stack along ``axis`` (channels by default); other dims must agree."""
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(s, ref)) if k != axis % len(ref)):
            raise ShapeMismatch(f"concat along axis {axis}: incompatible shapes {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [s[axis] for s in shapes])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make(out, tuple(tensors), backward)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
