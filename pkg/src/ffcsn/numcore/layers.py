"""Parameterised layers and the module tree that names their parameters."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor


class ShapeError(ValueError):
    pass


class Parameter(Tensor):
    """A trainable leaf tensor carrying its SGD momentum buffer."""

    __slots__ = ("momentum_buffer",)

    def __init__(self, data: np.ndarray, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.momentum_buffer = np.zeros_like(self.data)


def gaussian_init(rng: np.random.Generator, shape, std: float = 0.01, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def fan_in_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    """He-style init, std = sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    kind = "module"

    def __init__(self):
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            if p.name is None:
                p.name = prefix + name
            yield prefix + name, p
        for mname, m in self._modules.items():
            yield from m.named_parameters(prefix + mname + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for mname, m in self._modules.items():
            yield from m.named_buffers(prefix + mname + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        unknown = sorted(set(state) - set(own))
        missing = sorted(set(own) - set(state))
        if unknown:
            raise KeyError(f"unknown parameter name(s): {', '.join(unknown)}")
        if missing:
            raise KeyError(f"missing parameter name(s): {', '.join(missing)}")
        for name, target in own.items():
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise ShapeError(f"shape mismatch for '{name}': checkpoint {src.shape} vs model {target.shape}")
            # in-place keeps Parameter identity and buffer references alive
            target[...] = src

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def check_input(self, shape: Tuple[int, ...]) -> None:
        """Raise ShapeError if ``shape`` cannot be consumed."""

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return shape

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


def _mismatch(layer: "Module", expected, got) -> ShapeError:
    return ShapeError(f"{layer.describe()}: expected input shape {expected}, got {tuple(got)}")


class Linear(Module):
    kind = "fully-connected"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 init: str = "gaussian", std: float = 0.01, dtype=np.float64):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        shape = (in_features, out_features)
        if init == "gaussian":
            w = gaussian_init(rng, shape, std, dtype)
        elif init == "fan_in":
            w = fan_in_init(rng, shape, in_features, dtype)
        elif init == "zeros":
            w = np.zeros(shape, dtype=dtype)
        else:
            raise ValueError(f"unknown init '{init}'")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def describe(self) -> str:
        return f"fully-connected({self.in_features}->{self.out_features})"

    def check_input(self, shape):
        if len(shape) < 1 or shape[-1] != self.in_features:
            raise _mismatch(self, ("...", self.in_features), shape)

    def output_shape(self, shape):
        return tuple(shape[:-1]) + (self.out_features,)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    """3x3 convolution, stride 1, 'same' padding. No bias: always followed by batch-norm."""

    kind = "conv2d-3x3"

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 init: str = "gaussian", std: float = 0.01, bias: bool = False, dtype=np.float64):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        shape = (out_channels, in_channels, 3, 3)
        if init == "gaussian":
            w = gaussian_init(rng, shape, std, dtype)
        else:
            w = fan_in_init(rng, shape, in_channels * 9, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def describe(self) -> str:
        return f"conv2d-3x3({self.in_channels}->{self.out_channels})"

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise _mismatch(self, ("N", self.in_channels, "H", "W"), shape)

    def output_shape(self, shape):
        return (shape[0], self.out_channels, shape[2], shape[3])

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding=1)


class BatchNorm(Module):
    kind = "batch-norm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def describe(self) -> str:
        return f"batch-norm({self.channels})"

    def check_input(self, shape):
        if len(shape) not in (2, 4) or shape[1] != self.channels:
            raise _mismatch(self, ("N", self.channels, "..."), shape)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        return x.relu()


class ELU(Module):
    kind = "elu"

    def __init__(self, alpha: float = 1.0):
        super().__init__()
        self.alpha = alpha

    def forward(self, x):
        return x.elu(self.alpha)


class Sigmoid(Module):
    kind = "sigmoid"

    def forward(self, x):
        return x.sigmoid()


class Softmax(Module):
    kind = "softmax"

    def __init__(self, axis: int = -1):
        super().__init__()
        self.axis = axis

    def forward(self, x):
        return F.softmax(x, self.axis)


class AvgPool(Module):
    kind = "average-pool"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def check_input(self, shape):
        if len(shape) != 4 or shape[2] % self.size or shape[3] % self.size:
            raise _mismatch(self, ("N", "C", f"H%{self.size}==0", f"W%{self.size}==0"), shape)

    def output_shape(self, shape):
        return (shape[0], shape[1], shape[2] // self.size, shape[3] // self.size)

    def forward(self, x):
        return F.avg_pool2d(x, self.size)


class DepthDownsample(Module):
    """Average channel groups of ``group`` consecutive maps: (N, C, H, W) -> (N, C/group, H, W)."""

    kind = "depth-downsample"

    def __init__(self, group: int):
        super().__init__()
        self.group = group

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] % self.group:
            raise _mismatch(self, ("N", f"C%{self.group}==0", "H", "W"), shape)

    def output_shape(self, shape):
        return (shape[0], shape[1] // self.group, shape[2], shape[3])

    def forward(self, x):
        n, c, h, w = x.shape
        return x.reshape(n, c // self.group, self.group, h, w).mean(axis=2)


class Flatten(Module):
    kind = "flatten"

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class ReshapePool(Module):
    """Regroup per-frame maps by snippet: (N*F, C, H, W) -> (N, F, C), or (N, F, C*H*W) with ``flatten``.

    The default averages each frame's maps spatially; ``flatten=True`` keeps the spatial layout.
    """

    kind = "reshape-pool"

    def __init__(self, frames: int = 5, flatten: bool = False):
        super().__init__()
        self.frames = frames
        self.flatten = flatten

    def check_input(self, shape):
        if len(shape) != 4 or shape[0] % self.frames:
            raise _mismatch(self, (f"N*{self.frames}", "C", "H", "W"), shape)

    def output_shape(self, shape):
        width = int(np.prod(shape[1:])) if self.flatten else shape[1]
        return (shape[0] // self.frames, self.frames, width)

    def forward(self, x):
        n = x.shape[0]
        if self.flatten:
            return x.reshape(n // self.frames, self.frames, -1)
        return x.mean(axis=(2, 3)).reshape(n // self.frames, self.frames, x.shape[1])


@dataclass
class LayerSpec:
    """Declarative description of one layer: ``kind`` plus kind-specific ``dims``."""

    kind: str
    dims: Dict[str, float] = field(default_factory=dict)

    def build(self, rng: np.random.Generator, dtype=np.float64) -> Module:
        d = self.dims
        if self.kind == "fully-connected":
            return Linear(int(d["in"]), int(d["out"]), rng, init=d.get("init", "gaussian"),
                          std=d.get("std", 0.01), dtype=dtype)
        if self.kind == "conv2d-3x3":
            return Conv2d(int(d["in"]), int(d["out"]), rng, init=d.get("init", "gaussian"),
                          std=d.get("std", 0.01), dtype=dtype)
        if self.kind == "batch-norm":
            return BatchNorm(int(d["channels"]), dtype=dtype)
        if self.kind == "relu":
            return ReLU()
        if self.kind == "elu":
            return ELU(d.get("alpha", 1.0))
        if self.kind == "sigmoid":
            return Sigmoid()
        if self.kind == "softmax":
            return Softmax(int(d.get("axis", -1)))
        if self.kind == "average-pool":
            return AvgPool(int(d.get("size", 2)))
        if self.kind == "depth-downsample":
            return DepthDownsample(int(d["group"]))
        if self.kind == "reshape-pool":
            return ReshapePool(int(d.get("frames", 5)), bool(d.get("flatten", False)))
        if self.kind == "flatten":
            return Flatten()
        raise ValueError(f"unknown layer kind '{self.kind}'")


class Sequential(Module):
    kind = "sequential"

    def __init__(self, layers: Sequence[Module] = ()):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            setattr(self, str(i), layer)

    @classmethod
    def from_specs(cls, specs: Sequence[LayerSpec], rng: np.random.Generator, dtype=np.float64) -> "Sequential":
        return cls([s.build(rng, dtype) for s in specs])

    def output_shape(self, shape):
        for layer in self.layers:
            layer.check_input(shape)
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(x.shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} {exc}") from None
            x = layer(x)
        return x


def forward(graph: Sequence[Module] | Sequential, x: Tensor) -> Tensor:
    """Run ``x`` through a composed layer list (an empty list is the identity)."""
    if not isinstance(graph, Sequential):
        graph = Sequential(graph)
    return graph(x)
