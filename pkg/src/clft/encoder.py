"""ViT encoder: patch or conv-stem embedding, class token, positional table, pre-norm layers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, param, trunc_normal
from .tensor import ConfigError, ShapeError, Tensor

VARIANTS = ("base", "large", "huge", "hybrid", "toy")

_PRESETS = {
    "base": dict(patch=16, depth=12, dim=768, heads=12, taps=(2, 5, 8, 11), input=(384, 384)),
    "large": dict(patch=16, depth=24, dim=1024, heads=16, taps=(5, 11, 17, 23), input=(384, 384)),
    "huge": dict(patch=16, depth=32, dim=1280, heads=16, taps=None, input=(384, 384)),
    "hybrid": dict(patch=16, depth=12, dim=768, heads=12, taps=(2, 5, 8, 11), input=(384, 384)),
    "toy": dict(patch=8, depth=8, dim=64, heads=4, taps=(1, 3, 5, 7), input=(96, 96)),
}


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "toy"
    patch: int = 8
    depth: int = 8
    dim: int = 64
    heads: int = 4
    taps: tuple[int, ...] | None = (1, 3, 5, 7)
    input: tuple[int, int] = (96, 96)
    # "patch" splits the image into p x p patches, "hybrid" uses the conv stem.
    embedding: str = field(default="")

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.embedding:
            object.__setattr__(self, "embedding", "hybrid" if self.variant == "hybrid" else "patch")
        if self.embedding not in ("patch", "hybrid"):
            raise ConfigError(f"unknown embedding {self.embedding!r}")
        object.__setattr__(self, "input", tuple(int(n) for n in self.input))
        if self.taps is None:
            raise ConfigError(f"variant {self.variant!r} has no preset taps; pass taps explicitly")
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        h, w = self.input
        if h <= 0 or w <= 0 or h % self.patch or w % self.patch:
            raise ConfigError(f"input {self.input} not divisible by patch {self.patch}")
        if len(self.taps) != 4:
            raise ConfigError(f"exactly 4 taps required, got {self.taps}")
        if any(b <= a for a, b in zip(self.taps, self.taps[1:])) or self.taps[0] < 0 \
                or self.taps[-1] >= self.depth:
            raise ConfigError(f"taps {self.taps} must ascend strictly within depth {self.depth}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @classmethod
    def preset(cls, variant: str, **overrides) -> EncoderConfig:
        if variant not in _PRESETS:
            raise ConfigError(f"unknown variant {variant!r}")
        values = dict(_PRESETS[variant], variant=variant)
        values.update(overrides)
        return cls(**values)

    @property
    def grid(self) -> tuple[int, int]:
        return self.input[0] // self.patch, self.input[1] // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["taps"] = list(self.taps)
        d["input"] = list(self.input)
        return d

    def with_(self, **changes) -> EncoderConfig:
        return replace(self, **changes)


def _as_batch(image) -> Tensor:
    image = T.as_tensor(image)
    if image.ndim == 3:
        return image.reshape(1, *image.shape)
    return image


class PatchEmbed(Module):
    """Non-overlapping p x p patches, flattened as (channel, row, col) and projected to D."""

    def __init__(self, rng, cfg: EncoderConfig, channels: int = 3):
        self.cfg = cfg
        self.channels = channels
        self.proj = Linear(rng, channels * cfg.patch * cfg.patch, cfg.dim)

    def __call__(self, image) -> Tensor:
        x = _as_batch(image)
        b, c, h, w = x.shape
        p = self.cfg.patch
        if (h, w) != self.cfg.input or c != self.channels:
            if h % p or w % p:
                raise ConfigError(f"image {h}x{w} not divisible by patch {p}")
            raise ShapeError(f"image {x.shape[1:]} does not match configured input "
                             f"{(self.channels, *self.cfg.input)}")
        gh, gw = h // p, w // p
        patches = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        patches = patches.reshape(b, gh * gw, c * p * p)
        return self.proj(patches)


class HybridStem(Module):
    """Three strided conv blocks reducing the image by the patch factor.

    Strides are 2, 2 and patch/4, so a 16-pixel patch grid gives 2*2*4 and the
    toy 8-pixel grid gives 2*2*2. Kernels are 4 wide with stride 2, pad 1, which
    halves even extents exactly.
    """

    def __init__(self, rng, cfg: EncoderConfig, channels: int = 3):
        if cfg.patch % 4:
            raise ConfigError(f"hybrid stem needs a patch size divisible by 4, got {cfg.patch}")
        self.cfg = cfg
        self.channels = channels
        c1 = max(cfg.dim // 8, 16)
        c2 = max(cfg.dim // 4, 32)
        last = cfg.patch // 4
        self.block1 = Conv2d(rng, channels, c1, 4, stride=2, pad=1)
        self.block2 = Conv2d(rng, c1, c2, 4, stride=2, pad=1)
        if last == 2:
            self.block3 = Conv2d(rng, c2, cfg.dim, 4, stride=2, pad=1)
        else:
            self.block3 = Conv2d(rng, c2, cfg.dim, last, stride=last, pad=0)

    def feature_map(self, image) -> Tensor:
        x = _as_batch(image)
        if x.shape[1:] != (self.channels, *self.cfg.input):
            h, w = x.shape[2:]
            if h % self.cfg.patch or w % self.cfg.patch:
                raise ConfigError(f"image {h}x{w} not divisible by {self.cfg.patch}")
            raise ShapeError(f"image {x.shape[1:]} does not match configured input")
        x = T.relu(self.block1(x))
        x = T.relu(self.block2(x))
        return self.block3(x)

    def __call__(self, image) -> Tensor:
        fmap = self.feature_map(image)
        b, d, gh, gw = fmap.shape
        return fmap.reshape(b, d, gh * gw).transpose(0, 2, 1)


class Attention(Module):
    def __init__(self, rng, dim: int, heads: int):
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def attention_weights(self, x: Tensor) -> Tensor:
        q, k = self._split(self.q(x)), self._split(self.k(x))
        scale = 1.0 / math.sqrt(q.shape[-1])
        return T.softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        att = self.attention_weights(x)
        ctx = (att @ self._split(self.v(x))).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(ctx)


class TransformerLayer(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x)) with a 4D GELU hidden layer."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class ViTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | int = 0, channels: int = 3):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.cfg = cfg
        if cfg.embedding == "hybrid":
            self.embed = HybridStem(rng, cfg, channels)
        else:
            self.embed = PatchEmbed(rng, cfg, channels)
        self.cls_token = param(trunc_normal(rng, (1, 1, cfg.dim)))
        self.pos_embed = param(trunc_normal(rng, (1, cfg.num_patches + 1, cfg.dim)))
        self.layers = [TransformerLayer(rng, cfg.dim, cfg.heads) for _ in range(cfg.depth)]

    def patch_tokens(self, image) -> Tensor:
        """(B, N, D) tokens before the class token is attached."""
        return self.embed(image)

    def add_class_and_position(self, seq: Tensor) -> Tensor:
        b, n, d = seq.shape
        if n != self.cfg.num_patches:
            raise ShapeError(f"expected {self.cfg.num_patches} patch tokens, got {n}")
        cls = T.broadcast_to(self.cls_token, (b, 1, d))
        return T.concat([cls, seq], axis=1) + self.pos_embed

    def run_layers(self, tokens: Tensor, taps=None) -> list[Tensor]:
        """Apply every layer; return the outputs of the tapped layers in order."""
        taps = self.cfg.taps if taps is None else taps
        outputs = []
        x = tokens
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in taps:
                outputs.append(x)
            if i >= taps[-1]:
                break
        return outputs

    def encode(self, image) -> list[Tensor]:
        """Four tapped (B, N+1, D) token sequences."""
        return self.run_layers(self.add_class_and_position(self.patch_tokens(image)))

    __call__ = encode
