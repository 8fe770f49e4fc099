"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype, linear


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=default_dtype()), requires_grad=True)


def split_rng(rng: np.random.Generator) -> np.random.Generator:
    """Child generator with its own stream; keeps per-layer init independent of draw counts."""
    return rng.spawn(1)[0]


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: attributes that are Parameters or Modules are registered by name."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used to run a float32 model in float64)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        super().__init__()
        w = np.zeros((in_dim, out_dim)) if zero else uniform_init(split_rng(rng), (in_dim, out_dim), in_dim)
        self.weight = Parameter(w)
        self.bias = None
        if bias:
            self.bias = Parameter(np.zeros(out_dim) if zero else uniform_init(split_rng(rng), (out_dim,), in_dim))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True, zero: bool = False):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        shape = (out_ch, in_ch, kernel, kernel)
        self.weight = Parameter(np.zeros(shape) if zero else uniform_init(split_rng(rng), shape, fan_in))
        self.bias = None
        if bias:
            self.bias = Parameter(np.zeros(out_ch) if zero else uniform_init(split_rng(rng), (out_ch,), fan_in))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 2, padding: int = 0):
        super().__init__()
        shape = (in_ch, out_ch, kernel, kernel)
        self.weight = Parameter(uniform_init(split_rng(rng), shape, in_ch * kernel * kernel))
        self.bias = Parameter(uniform_init(split_rng(rng), (out_ch,), in_ch * kernel * kernel))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.transpose_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv(Module):
    """Channels-last depthwise conv; zero-initialised by default."""

    def __init__(self, dim: int, kernel: int = 3, rng: np.random.Generator | None = None, zero: bool = True):
        super().__init__()
        shape = (dim, kernel, kernel)
        w = np.zeros(shape) if zero or rng is None else uniform_init(split_rng(rng), shape, kernel * kernel)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d_nhwc(x, self.weight, self.bias)
