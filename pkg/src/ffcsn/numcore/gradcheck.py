"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from .layers import Parameter
from .tensor import Tensor


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckResult:
    max_relative_error: float
    per_parameter: Dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error <= tol


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tuple[str, Parameter]],
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``params`` is a sequence of (name, parameter) pairs, all float64. Returns the
    max over every checked entry of |a - n| / max(|a|, |n|, 1e-8). With ``max_entries``
    only that many randomly chosen entries per parameter are perturbed.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    for name, p in params:
        if p.dtype != np.float64:
            raise GradCheckError(f"parameter '{name}' is {p.dtype}; gradient checking needs float64")
    if not params:
        return GradCheckResult(0.0, {})

    for _, p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("loss is not finite at the base point")
    loss.backward()

    result = GradCheckResult(0.0)
    pick = np.random.default_rng(seed)
    for name, p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not np.isfinite(analytic).all():
            raise GradCheckError(f"non-finite analytic gradient for parameter '{name}'")
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(pick.choice(flat.size, size=max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(loss_fn().data)
            flat[i] = orig - epsilon
            fm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite loss while perturbing parameter '{name}'")
            numeric.reshape(-1)[i] = (fp - fm) / (2 * epsilon)
        err = _relative_error(analytic.reshape(-1)[entries], numeric.reshape(-1)[entries])
        result.per_parameter[name] = err
        result.max_relative_error = max(result.max_relative_error, err)
    return result


def grad_check(graph, x: Tensor, epsilon: float = 1e-5, loss: Callable[[Tensor], Tensor] | None = None,
               seed: int = 0) -> float:
    """Max relative gradient error of a layer graph applied to ``x``.

    Without an explicit ``loss``, the output is contracted against a fixed
    random tensor so every output entry contributes.
    """
    from .layers import Module, Sequential

    if isinstance(graph, Module) and not isinstance(graph, Sequential):
        graph = Sequential([graph])
    elif not isinstance(graph, Sequential):
        graph = Sequential(graph)
    if loss is None:
        probe = None

        def loss(out: Tensor) -> Tensor:
            nonlocal probe
            if probe is None:
                probe = np.random.default_rng(seed).standard_normal(out.shape)
            return (out * probe).sum()

    params = list(graph.named_parameters())
    return check_gradients(lambda: loss(graph(x)), params, epsilon).max_relative_error
