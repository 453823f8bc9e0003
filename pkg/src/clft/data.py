"""Dataset directories, LiDAR input normalisation and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import CLFT, ModelConfig
from .geometry import (PlaneStack, SensorRig, boxes_to_mask, densify, filter_and_populate,
                       load_boxes, load_cloud, save_boxes, save_cloud, DEFAULT_DILATION)
from .tensor import load_tensor, save_tensor


@dataclass
class LidarNormalizer:
    """Per-channel mean/std over occupied pixels; empty pixels stay exactly zero."""

    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def fit(cls, planes: list[PlaneStack]) -> LidarNormalizer:
        vals = [p.stack()[:, p.occupancy] for p in planes if p.occupancy.any()]
        if not vals:
            return cls()
        allv = np.concatenate(vals, axis=1)
        std = allv.std(axis=1)
        std[std < 1e-9] = 1.0
        return cls(tuple(float(m) for m in allv.mean(axis=1)), tuple(float(s) for s in std))

    def apply(self, planes: PlaneStack) -> np.ndarray:
        x = (planes.stack() - np.asarray(self.mean)[:, None, None]) / np.asarray(self.std)[:, None, None]
        return np.where(planes.occupancy[None], x, 0.0)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> LidarNormalizer:
        return cls(tuple(d["mean"]), tuple(d["std"]))


@dataclass
class Frame:
    rgb: np.ndarray           # (3, h, w)
    planes: PlaneStack        # densified
    mask: np.ndarray          # (h, w) uint8
    tag: str = "light-dry"
    cloud: np.ndarray | None = None
    boxes: list = field(default_factory=list)


def rgb_input(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=float) - 0.5) / 0.5


@dataclass
class Dataset:
    frames: list[Frame]
    rig: SensorRig
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, idx) -> Dataset:
        return Dataset([self.frames[i] for i in idx], self.rig, self.meta)

    def arrays(self, idx, normalizer: LidarNormalizer):
        """Stacked network inputs (rgb, lidar, mask) for frame indices ``idx``."""
        fr = [self.frames[i] for i in idx]
        rgb = np.stack([rgb_input(f.rgb) for f in fr])
        lid = np.stack([normalizer.apply(f.planes) for f in fr])
        mask = np.stack([f.mask for f in fr])
        return rgb, lid, mask

    @classmethod
    def from_scenes(cls, scenes, rig: SensorRig, meta: dict | None = None) -> Dataset:
        frames = [Frame(s.rgb, s.planes, s.mask, s.tag, s.cloud, s.boxes) for s in scenes]
        return cls(frames, rig, dict(meta or {}))

    # directory layout: frame_%06d.{rgb,cloud,boxes,planes,mask} + dataset.json
    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        tags = []
        for i, f in enumerate(self.frames):
            stem = root / f"frame_{i:06d}"
            save_tensor(stem.with_suffix(".rgb"), f.rgb)
            if f.cloud is not None:
                save_cloud(stem.with_suffix(".cloud"), f.cloud)
            save_boxes(stem.with_suffix(".boxes"), f.boxes)
            f.planes.save(stem.with_suffix(".planes"))
            save_tensor(stem.with_suffix(".mask"), f.mask.astype(float))
            tags.append(f.tag)
        manifest = {"rig": self.rig.to_dict(), "tags": tags, **self.meta}
        (root / "dataset.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, root, radius: int = DEFAULT_DILATION) -> Dataset:
        """Read a dataset directory; planes and masks are derived and cached when missing."""
        root = Path(root)
        manifest = json.loads((root / "dataset.json").read_text())
        rig = SensorRig.from_dict(manifest.pop("rig"))
        tags = manifest.pop("tags", None)
        stems = sorted(p.with_suffix("") for p in root.glob("frame_*.rgb"))
        frames = []
        for i, stem in enumerate(stems):
            rgb = load_tensor(stem.with_suffix(".rgb"))
            cloud_path, box_path = stem.with_suffix(".cloud"), stem.with_suffix(".boxes")
            cloud = load_cloud(cloud_path) if cloud_path.exists() else None
            boxes = load_boxes(box_path) if box_path.exists() else []
            planes_path, mask_path = stem.with_suffix(".planes"), stem.with_suffix(".mask")
            if planes_path.exists():
                planes = PlaneStack.load(planes_path)
            else:
                planes = densify(filter_and_populate(cloud, rig), radius)
                planes.save(planes_path)
            if mask_path.exists():
                mask = load_tensor(mask_path).astype(np.uint8)
            else:
                mask = boxes_to_mask(cloud, boxes, rig)
                save_tensor(mask_path, mask.astype(float))
            tag = tags[i] if tags else "light-dry"
            frames.append(Frame(rgb, planes, mask, tag, cloud, boxes))
        return cls(frames, rig, manifest)


def save_checkpoint(root, model: CLFT, normalizer: LidarNormalizer, extra: dict | None = None) -> None:
    """Directory of named tensor files plus manifest.json."""
    root = Path(root)
    tensors = root / "tensors"
    tensors.mkdir(parents=True, exist_ok=True)
    for old in tensors.glob("*.bin"):
        old.unlink()
    for name, p in model.named_parameters():
        save_tensor(tensors / f"{name}.bin", p.data)
    manifest = model.cfg.to_dict()
    manifest["lidar_norm"] = normalizer.to_dict()
    manifest.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(root) -> tuple[CLFT, LidarNormalizer, dict]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg_keys = {"variant", "patch", "depth", "dim", "heads", "taps", "input", "embedding",
                "features", "num_classes"}
    cfg = ModelConfig.from_dict({k: v for k, v in manifest.items() if k in cfg_keys})
    model = CLFT(cfg)
    state = {p.stem: load_tensor(p) for p in (root / "tensors").glob("*.bin")}
    model.load_state_dict(state)
    norm = LidarNormalizer.from_dict(manifest.get("lidar_norm", {"mean": [0, 0, 0], "std": [1, 1, 1]}))
    return model, norm, manifest
