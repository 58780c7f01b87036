"""Parameter containers and the handful of layers the network is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from denet import ops
from denet.tensor import Tensor


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                    dtype=np.float64, gain: float = math.sqrt(2.0)) -> Tensor:
    """Uniform fan-in init with variance ``gain**2 / fan_in``."""
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True, dtype=np.float64):
        self.weight = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = zeros((cout,), dtype) if bias else None
        self.stride = stride
        self.pad = (k - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Conv1x1(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64, gain: float = math.sqrt(2.0)):
        self.weight = kaiming_uniform(rng, (cout, cin), cin, dtype, gain)
        self.bias = zeros((cout,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1x1(x, self.weight, self.bias)


class StridedConv1x1(Module):
    """1x1 projection that also subsamples by ``stride``."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = kaiming_uniform(rng, (cout, cin, 1, 1), cin, dtype)
        self.bias = zeros((cout,), dtype)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=0)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = kaiming_uniform(rng, (cout, cin), cin, dtype)
        self.bias = zeros((cout,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class DepthwiseConv(Module):
    def __init__(self, channels: int, k: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = kaiming_uniform(rng, (channels, k, k), k * k, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight)


class InstanceNorm(Module):
    """Per-sample, per-channel normalisation with a learned affine map."""

    def __init__(self, channels: int, dtype=np.float64):
        self.gamma = ones((channels, 1, 1), dtype)
        self.beta = zeros((channels, 1, 1), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.instance_norm(x) * self.gamma + self.beta


class ConvNormAct(Module):
    """conv3x3 -> instance norm -> rectifier."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 stride: int = 1, dtype=np.float64):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, dtype=dtype)
        self.norm = InstanceNorm(cout, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.norm(self.conv(x)))


def param_total(module: Module) -> int:
    return int(sum(p.data.size for p in module.parameters().values()))
