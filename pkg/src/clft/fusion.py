"""Residual conv units, cross-fusion blocks, the segmentation head and the full network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import conv as C
from . import tensor as T
from .assemble import DEFAULT_FEATURES, Assembler
from .encoder import EncoderConfig, ViTEncoder
from .nn import Conv2d, Module, TransposeConv2d
from .tensor import ConfigError, ShapeError, Tensor

NUM_CLASSES = 3
MODALITIES = ("C", "L", "C+L")


def rcu(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """x + conv2(relu(conv1(relu(x)))), bias-free 3x3 convs."""
    h = C.conv2d(T.relu(x), w1, None, 1, 1)
    return x + C.conv2d(T.relu(h), w2, None, 1, 1)


class RCU(Module):
    def __init__(self, rng, features: int, residual_gain: float = 1.0):
        self.conv1 = Conv2d(rng, features, features, 3, pad=1, bias=False)
        self.conv2 = Conv2d(rng, features, features, 3, pad=1, bias=False, gain=residual_gain)

    def __call__(self, x: Tensor) -> Tensor:
        return rcu(x, self.conv1.weight, self.conv2.weight)


class FusionBlock(Module):
    """Two RCUs per stream, sum with the previous stage, one more RCU, then 2x up-sampling."""

    def __init__(self, rng, features: int):
        gain = 0.5
        self.cam = [RCU(rng, features, gain), RCU(rng, features, gain)]
        self.lid = [RCU(rng, features, gain), RCU(rng, features, gain)]
        self.post = RCU(rng, features, gain)
        self.up = TransposeConv2d(rng, features, features, 2, bias=False, nearest_init=True)

    def __call__(self, cam: Tensor | None, lid: Tensor | None, prev: Tensor | None = None,
                 lid_gate: np.ndarray | None = None) -> Tensor:
        if cam is not None and lid is not None and cam.shape != lid.shape:
            raise ShapeError(f"camera map {cam.shape} and LiDAR map {lid.shape} differ")
        terms = []
        if cam is not None:
            x = cam
            for unit in self.cam:
                x = unit(x)
            terms.append(x)
        if lid is not None:
            y = lid
            for unit in self.lid:
                y = unit(y)
            if lid_gate is not None:
                y = y * lid_gate
            terms.append(y)
        if prev is not None:
            terms.append(prev)
        if not terms:
            raise ShapeError("fusion block received no inputs")
        total = terms[0]
        for t in terms[1:]:
            if t.shape != total.shape:
                raise ShapeError(f"fusion inputs differ in shape: {total.shape} vs {t.shape}")
            total = total + t
        return self.up(self.post(total))


class SegmentationHead(Module):
    """2x transpose conv, ReLU, then a 1x1 conv to class logits."""

    def __init__(self, rng, features: int, num_classes: int = NUM_CLASSES):
        self.up = TransposeConv2d(rng, features, features, 2)
        self.classify = Conv2d(rng, features, num_classes, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.classify(T.relu(self.up(x)))


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    features: int = DEFAULT_FEATURES
    num_classes: int = NUM_CLASSES

    @classmethod
    def preset(cls, variant: str, **encoder_overrides) -> ModelConfig:
        features = encoder_overrides.pop("features", 32 if variant == "toy" else DEFAULT_FEATURES)
        return cls(EncoderConfig.preset(variant, **encoder_overrides), features)

    def to_dict(self) -> dict:
        d = self.encoder.to_dict()
        d.update(features=self.features, num_classes=self.num_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        features = d.pop("features", DEFAULT_FEATURES)
        num_classes = d.pop("num_classes", NUM_CLASSES)
        return cls(EncoderConfig(**d), features, num_classes)


def _batch(x) -> Tensor | None:
    if x is None:
        return None
    x = T.as_tensor(x)
    return x.reshape(1, *x.shape) if x.ndim == 3 else x


class CLFT(Module):
    """Camera and LiDAR ViT streams, progressive assembly, cross-fusion, head.

    The LiDAR input is the normalised 3-channel plane image. A sample whose
    LiDAR image is identically zero carries no returns and its stream is
    treated as absent: the LiDAR branch contributes exactly nothing at the
    fusion sums, the same as camera-only mode.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.cam_encoder = ViTEncoder(cfg.encoder, rng)
        self.lid_encoder = ViTEncoder(cfg.encoder, rng)
        self.cam_assemble = Assembler(cfg.encoder, rng, cfg.features)
        self.lid_assemble = Assembler(cfg.encoder, rng, cfg.features)
        self.blocks = [FusionBlock(rng, cfg.features) for _ in range(4)]
        self.head = SegmentationHead(rng, cfg.features, cfg.num_classes)

    def pyramids(self, rgb, lidar, modality: str = "C+L"):
        """Camera and LiDAR feature pyramids (either may be None) plus the LiDAR gate."""
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
        rgb, lidar = _batch(rgb), _batch(lidar)
        if "C" in modality and rgb is None:
            raise ValueError(f"modality {modality} requires an RGB image")
        if modality in ("L", "C+L") and lidar is None:
            raise ValueError(f"modality {modality} requires LiDAR planes")
        cam = lid = gate = None
        if "C" in modality:
            cam = self.cam_assemble(self.cam_encoder(rgb), "camera")
        if modality in ("L", "C+L"):
            present = np.any(lidar.data != 0, axis=(1, 2, 3))
            if present.all():
                gate = None
            elif not present.any():
                lidar = None
            else:
                gate = present.astype(float)[:, None, None, None]
            if lidar is not None:
                lid = self.lid_assemble(self.lid_encoder(lidar), "lidar")
        return cam, lid, gate

    def decode(self, cam, lid, gate=None) -> Tensor:
        """Fold the fusion blocks from the coarsest stage to the finest, then apply the head."""
        prev = None
        for stage in reversed(range(4)):
            c = cam[stage].data if cam is not None else None
            l = lid[stage].data if lid is not None else None
            ref = c if c is not None else l
            if prev is not None and ref is not None and prev.shape != ref.shape:
                raise ShapeError(f"stage {stage}: previous fusion output {prev.shape} "
                                 f"does not match {ref.shape}")
            prev = self.blocks[stage](c, l, prev, gate)
        return self.head(prev)

    def forward(self, rgb=None, lidar=None, modality: str = "C+L") -> Tensor:
        cam, lid, gate = self.pyramids(rgb, lidar, modality)
        if cam is None and lid is None:
            # L mode with an all-empty LiDAR batch: nothing to fuse.
            b = _batch(lidar).shape[0]
            h, w = self.cfg.encoder.input
            return Tensor(np.zeros((b, self.cfg.num_classes, h, w)))
        return self.decode(cam, lid, gate)

    __call__ = forward


def clft_forward(model: CLFT, rgb, planes, modality: str = "C+L") -> Tensor:
    return model.forward(rgb, planes, modality)
