"""Parameter containers and the basic layers the model is assembled from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import conv as C
from .tensor import DTYPE, Tensor, layer_norm


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    out *= std
    return out


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain * math.sqrt(2.0 / fan_in))


def param(data) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=DTYPE), requires_grad=True)


class Module:
    """Anything holding parameter tensors, directly or in child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} "
                           f"unexpected={sorted(unexpected)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.ascontiguousarray(arr.copy())


class Linear(Module):
    """y = x @ W + b with W stored as (in, out)."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, std: float = 0.02):
        self.weight = param(trunc_normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, gain: float = 1.0):
        self.weight = param(he_normal(rng, (c_out, c_in, k, k), c_in * k * k, gain))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return C.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class TransposeConv2d(Module):
    """Transpose conv with kernel == stride, optionally initialised to nearest-neighbour copy."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int | None = None,
                 bias: bool = True, nearest_init: bool = False):
        stride = k if stride is None else stride
        if nearest_init:
            if c_in != c_out:
                raise ValueError("nearest-neighbour init needs c_in == c_out")
            w = np.zeros((c_in, c_out, k, k))
            w[np.arange(c_in), np.arange(c_in)] = 1.0
        else:
            w = he_normal(rng, (c_in, c_out, k, k), c_in)
        self.weight = param(w)
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return C.transpose_conv2d(x, self.weight, self.bias, self.stride)
