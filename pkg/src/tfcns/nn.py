"""Small module system: parameter registration plus the primitive layers
(linear, conv, transposed conv, layer norm) that the architecture blocks
are assembled from.

Weights use He fan-in initialization, biases start at zero, and embedding
tables use N(0, 0.02). Construction order fixes the parameter registry
order, so a fixed seed yields bit-identical parameters.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Base class: walks its attributes (in definition order) to enumerate
    parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.tensor.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.grad = None


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype))


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def embedding_init(rng: np.random.Generator, shape: tuple, dtype) -> Tensor:
    return Tensor((rng.standard_normal(shape) * 0.02).astype(dtype))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(he_normal(rng, (in_features, out_features), in_features, dtype))
        if bias:
            self.bias = Parameter(zeros((out_features,), dtype), no_decay=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight.tensor)
        return y if self.bias is None else ad.add(y, self.bias.tensor)

    __call__ = forward


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dtype=np.float32, bias: bool = True):
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            he_normal(rng, (out_channels, in_channels, k, k), in_channels * k * k, dtype)
        )
        if bias:
            self.bias = Parameter(zeros((out_channels,), dtype), no_decay=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight.tensor,
                         None if self.bias is None else self.bias.tensor,
                         self.stride, self.padding)

    __call__ = forward


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, dtype=np.float32):
        k = kernel_size
        self.stride = stride
        self.weight = Parameter(
            he_normal(rng, (in_channels, out_channels, k, k), in_channels * k * k, dtype)
        )
        self.bias = Parameter(zeros((out_channels,), dtype), no_decay=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight.tensor, self.bias.tensor, self.stride)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-6):
        self.eps = eps
        self.gamma = Parameter(ones((dim,), dtype))
        self.beta = Parameter(zeros((dim,), dtype), no_decay=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma.tensor, self.beta.tensor, self.eps)

    __call__ = forward


class Dropout(Module):
    def __init__(self, p: float):
        self.p = p

    def forward(self, x: Tensor, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
        return ad.dropout(x, self.p, training, rng)

    __call__ = forward
