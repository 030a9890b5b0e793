"""Composite differentiable operations with hand-written backward passes."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy. ``targets`` holds class indices or one-hot rows."""
    targets = np.asarray(targets)
    if targets.ndim == logits.ndim:
        onehot = targets.astype(logits.dtype)
    else:
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        onehot[np.arange(len(targets)), targets.astype(int)] = 1.0
    n = logits.shape[0] if logits.ndim > 1 else 1
    return -(log_softmax(logits, axis=-1) * onehot).sum() * (1.0 / n)


def binary_cross_entropy(p: Tensor, targets: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities ``p``; probabilities are clamped to [eps, 1-eps]."""
    y = np.asarray(targets, dtype=p.dtype)
    pc = p.clip(eps, 1.0 - eps)
    return -(pc.log() * y + (1.0 - pc).log() * (1.0 - y)).mean()


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) via im2col.

    ``x`` is (N, C, H, W); ``weight`` is (O, C, kh, kw).
    """
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    w2 = weight.data.reshape(O, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    xp_shape = xp.shape

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(weight.shape)
        dcols = (gm @ w2).reshape(N, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + Ho, j : j + Wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        grads = [gxp, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(np.ascontiguousarray(out), parents, bw)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    N, C, H, W = x.shape
    if H % size or W % size:
        raise ValueError(f"avg_pool2d: spatial dims {H}x{W} not divisible by {size}")
    out = x.data.reshape(N, C, H // size, size, W // size, size).mean(axis=(3, 5))

    def bw(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (up / (size * size),)

    return Tensor._make(out, (x,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over axis 0 (and spatial axes for 4-D input).

    Running statistics are updated in place when ``training`` is true.
    """
    if x.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    else:
        axes = (0,)
        bshape = (1, -1)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if not training:
        inv_std = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std
        out = g_ * xhat + b_

        def bw_eval(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return Tensor._make(out, (x, gamma, beta), bw_eval)

    m = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = g_ * xhat + b_

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(-1) * (m / max(m - 1, 1))

    def bw(g):
        dxhat = g * g_
        dx = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(out, (x, gamma, beta), bw)
