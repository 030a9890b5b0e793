from __future__ import annotations

from typing import Iterable

import numpy as np

from .layers import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """SGD with momentum and L2 weight decay, updating parameters in place.

    buffer <- momentum * buffer + (grad + weight_decay * param)
    param  <- param - lr * buffer
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter '{p.name or '<unnamed>'}' has no gradient")
    for p in params:
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        buf = p.momentum_buffer
        buf *= momentum
        buf += d
        p.data -= lr * buf


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm
