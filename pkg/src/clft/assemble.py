"""Token sequences to image-like feature maps at four scales."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import conv as C
from . import tensor as T
from .encoder import EncoderConfig
from .nn import Conv2d, Linear, Module, param, he_normal
from .tensor import ConfigError, ShapeError, Tensor

SCALES = (4, 8, 16, 32)
DEFAULT_FEATURES = 256


def readout_project(seq: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate the class token onto every patch token, then GELU(linear).

    ``seq`` is (B, N+1, D) or (N+1, D); ``weight`` is (2D, D).
    """
    seq = T.as_tensor(seq)
    squeeze = seq.ndim == 2
    if squeeze:
        seq = seq.reshape(1, *seq.shape)
    b, n1, d = seq.shape
    if n1 < 2:
        raise ShapeError(f"token sequence needs a class token and patches, got {seq.shape}")
    patches = seq[:, 1:, :]
    cls = T.broadcast_to(seq[:, :1, :], (b, n1 - 1, d))
    out = T.gelu(T.concat([patches, cls], axis=-1) @ weight + bias)
    return out.reshape(n1 - 1, -1) if squeeze else out


def spatialize(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """(B, N, D) row-major tokens -> (B, D, gh, gw); inverse of patch flattening."""
    tokens = T.as_tensor(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape(1, *tokens.shape)
    b, n, d = tokens.shape
    gh, gw = grid
    if n != gh * gw:
        raise ShapeError(f"{n} tokens cannot fill a {gh}x{gw} grid")
    out = tokens.transpose(0, 2, 1).reshape(b, d, gh, gw)
    return out.reshape(d, gh, gw) if squeeze else out


def flatten_map(fmap: Tensor) -> Tensor:
    b, d, gh, gw = fmap.shape
    return fmap.reshape(b, d, gh * gw).transpose(0, 2, 1)


def resample_factor(cfg: EncoderConfig, scale: int) -> Fraction:
    """Grid change taking the h/p token grid to h/scale."""
    if cfg.input[0] % scale or cfg.input[1] % scale:
        raise ConfigError(f"input {cfg.input} not divisible by scale {scale}")
    return Fraction(cfg.patch, scale)


@dataclass
class FeatureMap:
    data: Tensor
    stream: str
    stage: int

    @property
    def shape(self):
        return self.data.shape


class AssembleStage(Module):
    """Readout MLP, channel projection D -> features, and tap-dependent resampling."""

    def __init__(self, rng, cfg: EncoderConfig, tap: int, scale: int,
                 features: int = DEFAULT_FEATURES):
        if scale not in SCALES:
            raise ConfigError(f"unsupported scale {scale}; expected one of {SCALES}")
        self.tap = tap
        self.scale = scale
        self.cfg = cfg
        self.readout = Linear(rng, 2 * cfg.dim, cfg.dim)
        self.project = Conv2d(rng, cfg.dim, features, 1)
        self.factor = resample_factor(cfg, scale)
        kind, k, _, _ = C.resample_geometry(self.factor)
        if kind == "identity":
            self.resample_weight = None
        else:
            fan_in = features * (k * k if kind == "down" else 1)
            self.resample_weight = param(he_normal(rng, (features, features, k, k), fan_in))
        self.resample_bias = param(np.zeros(features)) if kind != "identity" else None

    def __call__(self, seq: Tensor) -> Tensor:
        x = readout_project(seq, self.readout.weight, self.readout.bias)
        x = spatialize(x, self.cfg.grid)
        x = self.project(x)
        return C.resample(x, self.factor, self.resample_weight, self.resample_bias)


class Assembler(Module):
    """Four stages pairing taps with scales 4, 8, 16, 32 in ascending order."""

    def __init__(self, cfg: EncoderConfig, rng=0, features: int = DEFAULT_FEATURES):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.features = features
        self.stages = [AssembleStage(rng, cfg, tap, s, features) for tap, s in zip(cfg.taps, SCALES)]

    def __call__(self, taps: list[Tensor], stream: str = "camera") -> list[FeatureMap]:
        if len(taps) != len(self.stages):
            raise ShapeError(f"expected {len(self.stages)} tapped sequences, got {len(taps)}")
        return [FeatureMap(stage(seq), stream, i) for i, (stage, seq) in enumerate(zip(self.stages, taps))]
