"""Ray-cast scenes of coloured boxes over a ground plane, seen by a camera and a LiDAR.

The LiDAR frame is x forward, y left, z up, with the sensor at the origin and
the ground at ``z = -MOUNT_HEIGHT``. Objects are placed in image space first
and then pushed to a sampled depth with every coordinate scaled about the
camera centre, so the camera image of an object does not depend on its depth.
Only the LiDAR returns carry depth.

Separability modes decide the class of an object:

* ``color``: by palette colour, depth random;
* ``depth``: by depth band, colour random;
* ``joint``: by (colour XOR depth band), so neither cue works alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (Box3D, PlaneStack, SensorRig, boxes_to_mask, densify,
                       filter_and_populate, DEFAULT_DILATION)

MOUNT_HEIGHT = 6.0
SEPARABILITY = ("color", "depth", "joint")
PALETTE = np.array([[0.90, 0.45, 0.10],    # orange
                    [0.10, 0.55, 0.85]])   # blue
DEPTH_BANDS = ((5.0, 8.0), (12.0, 18.0))   # near, far (m)
SKY = np.array([0.70, 0.80, 0.95])
GROUND = np.array([0.33, 0.36, 0.30])
FACE_SHADE = np.array([0.85, 0.85, 0.70, 0.70, 0.55, 1.0])   # +-x, +-y, -z, +z faces
TAG_WEIGHTS = {"light-dry": 14940, "dark-dry": 1640, "light-wet": 4520, "dark-wet": 900}
LABEL_MARGIN = 0.08   # label boxes are this much larger than the rendered solid on every side (m)
RANGE_NOISE = 0.01


def default_rig(size: int = 96, focal: float = 80.0) -> SensorRig:
    """Forward-looking camera just ahead of and below the LiDAR."""
    return SensorRig((math.pi / 2, math.pi, math.pi / 2), (0.1, 0.0, -0.05),
                     (focal, focal), (size, size))


@dataclass
class SyntheticScene:
    rgb: np.ndarray           # (3, h, w) in [0, 1]
    cloud: np.ndarray         # (n, 3) LiDAR frame
    boxes: list[Box3D]
    planes: PlaneStack        # densified
    mask: np.ndarray          # (h, w) uint8 codes
    tag: str
    instances: np.ndarray     # (h, w) camera-visible object index, -1 for none


def _ray_boxes(origin: np.ndarray, dirs: np.ndarray, boxes: list[Box3D]):
    """Nearest positive hit distance and box/face index for each ray (slab test)."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_box = np.full(n, -1)
    best_face = np.full(n, -1)
    for bi, box in enumerate(boxes):
        c, s = math.cos(box.heading), math.sin(box.heading)
        rot = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])      # world -> box local
        o = rot @ (origin - np.asarray(box.center))
        d = dirs @ rot.T
        half = np.asarray(box.extents) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = np.nanmax(tmin, axis=1)
        t_far = np.nanmin(tmax, axis=1)
        axis = np.nanargmax(tmin, axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-9)
        closer = hit & (t_near < best_t)
        # entering face: negative side if the ray travels in +axis direction
        sign_pos = d[np.arange(n), axis] < 0
        face = axis * 2 + np.where(sign_pos, 0, 1)
        face = np.where(axis == 2, np.where(sign_pos, 5, 4), face)
        best_t[closer] = t_near[closer]
        best_box[closer] = bi
        best_face[closer] = face[closer]
    return best_t, best_box, best_face


def _cast(origin, dirs, boxes):
    """Hit distance, box index (-1 ground/sky) and face for each ray."""
    t_box, box_idx, face = _ray_boxes(origin, dirs, boxes)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < -1e-9, (-MOUNT_HEIGHT - origin[2]) / dirs[:, 2], np.inf)
    ground_first = t_ground < t_box
    t = np.where(ground_first, t_ground, t_box)
    box_idx = np.where(ground_first, -1, box_idx)
    return t, box_idx, face


def render_rgb(boxes: list[Box3D], colors: np.ndarray, rig: SensorRig):
    w, h = rig.resolution
    fx, fy = rig.focal
    cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    cam_dirs = np.stack([(cols - w / 2) / fx, (rows - h / 2) / fy, np.ones_like(cols)], -1).reshape(-1, 3)
    dirs = cam_dirs @ rig.rotation()             # camera -> LiDAR frame (R is orthonormal)
    origin = np.asarray(rig.camera_pos)
    t, box_idx, face = _cast(origin, dirs, boxes)
    img = np.empty((h * w, 3))
    sky = ~np.isfinite(t)
    elev = np.clip(-cam_dirs[:, 1], 0, 1)[:, None]
    img[:] = SKY * (0.85 + 0.15 * elev)
    ground = np.isfinite(t) & (box_idx < 0)
    gp = origin + dirs[ground] * t[ground][:, None]
    checker = ((np.floor(gp[:, 0] / 2) + np.floor(gp[:, 1] / 2)) % 2)[:, None]
    img[ground] = GROUND * (0.9 + 0.15 * checker)
    obj = box_idx >= 0
    img[obj] = colors[box_idx[obj]] * FACE_SHADE[face[obj]][:, None]
    instances = np.where(obj, box_idx, -1).reshape(h, w)
    return img.reshape(h, w, 3).transpose(2, 0, 1).copy(), instances


def scan_lidar(boxes: list[Box3D], rig: SensorRig, rng: np.random.Generator,
               beams: int = 64, azimuth_step_deg: float = 0.5, dropout: float = 0.0,
               range_noise: float = RANGE_NOISE) -> np.ndarray:
    w, h = rig.resolution
    fx, fy = rig.focal
    half_v = math.atan((h / 2) / fy) + math.radians(2)
    half_h = math.atan((w / 2) / fx) + math.radians(4)
    elev = np.linspace(-half_v, half_v, beams)
    azim = np.arange(-half_h, half_h, math.radians(azimuth_step_deg))
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    dirs = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], -1).reshape(-1, 3)
    origin = np.zeros(3)
    t, _, _ = _cast(origin, dirs, boxes)
    keep = np.isfinite(t)
    if dropout > 0:
        keep &= rng.random(keep.shape) >= dropout
    t = t[keep] + rng.normal(0.0, range_noise, int(keep.sum()))
    return dirs[keep] * t[:, None]


def _object_label(mode: str, color: int, band: int) -> str:
    if mode == "color":
        key = color
    elif mode == "depth":
        key = band
    else:
        key = color ^ band
    return "vehicle" if key == 0 else "human"


def _place_objects(rng, rig: SensorRig, mode: str, n_objects: int, max_tries: int = 200):
    """Sample non-overlapping image-space rectangles and lift them to 3-D boxes.

    Returns the rendered solids, their colours, and the label boxes (the solids
    grown by LABEL_MARGIN so that range noise cannot push returns outside).
    """
    w, h = rig.resolution
    fx, fy = rig.focal
    rot_t = rig.rotation().T
    cam = np.asarray(rig.camera_pos)
    rects, boxes, labels, colors = [], [], [], []
    combos = [(c, b) for c in (0, 1) for b in (0, 1)]
    rng.shuffle(combos)
    tries = 0
    while len(boxes) < n_objects and tries < max_tries:
        tries += 1
        aw, ah = rng.uniform(0.2, 0.32, 2) * np.array([w, h])
        u0 = rng.uniform(aw / 2 + 2, w - aw / 2 - 2)
        v0 = rng.uniform(ah / 2 + 4, h * 0.78 - ah / 2)
        rect = (u0 - aw / 2 - 3, u0 + aw / 2 + 3, v0 - ah / 2 - 3, v0 + ah / 2 + 3)
        if any(not (rect[1] < r[0] or r[1] < rect[0] or rect[3] < r[2] or r[3] < rect[2]) for r in rects):
            continue
        color, band = combos[len(boxes) % 4]
        depth = rng.uniform(*DEPTH_BANDS[band])
        length_ratio = rng.uniform(0.6, 1.6)
        heading = rng.uniform(-0.6, 0.6)
        k = depth
        centre_cam = np.array([(u0 - w / 2) / fx, (v0 - h / 2) / fy, 1.0]) * k
        centre = rot_t @ centre_cam + cam
        extents = (length_ratio * aw / fx * k, aw / fx * k, ah / fy * k)
        cls = _object_label(mode, color, band)
        extra = {"color": int(color), "band": int(band)}
        box = Box3D(centre, extents, heading, cls, extra)
        if box.corners()[:, 2].min() < -MOUNT_HEIGHT + 0.3:
            continue
        if (box.corners() - cam)[:, 0].min() < 1.0:
            continue
        rects.append(rect)
        boxes.append(box)
        labels.append(Box3D(centre, tuple(e + 2 * LABEL_MARGIN for e in extents), heading, cls, extra))
        jitter = rng.uniform(-0.04, 0.04, 3)
        colors.append(np.clip(PALETTE[color] + jitter, 0, 1))
    return boxes, np.array(colors).reshape(-1, 3), labels


def _apply_conditions(rgb: np.ndarray, tag: str, rng) -> np.ndarray:
    out = rgb
    if tag.startswith("dark"):
        out = out * 0.4
    if tag.endswith("wet"):
        out = out + rng.normal(0.0, 0.04, out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_scene(rng: np.random.Generator, rig: SensorRig, mode: str = "color",
                   tag: str | None = None, radius: int = DEFAULT_DILATION) -> SyntheticScene:
    if mode not in SEPARABILITY:
        raise ValueError(f"unknown separability {mode!r}; expected one of {SEPARABILITY}")
    if tag is None:
        tags = list(TAG_WEIGHTS)
        p = np.array([TAG_WEIGHTS[t] for t in tags], float)
        tag = tags[rng.choice(len(tags), p=p / p.sum())]
    n_objects = int(rng.integers(2, 4))
    solids, colors, labels = _place_objects(rng, rig, mode, n_objects)
    rgb, instances = render_rgb(solids, colors, rig)
    rgb = _apply_conditions(rgb, tag, rng)
    cloud = scan_lidar(solids, rig, rng, dropout=0.2 if tag.endswith("wet") else 0.0)
    planes = densify(filter_and_populate(cloud, rig), radius)
    mask = boxes_to_mask(cloud, labels, rig)
    return SyntheticScene(rgb, cloud, labels, planes, mask, tag, instances)


def generate_synthetic(n: int, seed: int = 0, separability: str = "color",
                       rig: SensorRig | None = None, radius: int = DEFAULT_DILATION
                       ) -> list[SyntheticScene]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rig = rig or default_rig()
    rng = np.random.default_rng(seed)
    return [generate_scene(rng, rig, separability, radius=radius) for _ in range(n)]


def rgb_mean_accuracy(scenes: list[SyntheticScene]) -> float:
    """Object accuracy of the best classifier that sees only each object's mean colour.

    Mean colours are snapped to the nearest palette entry (after undoing the
    dark-condition dimming by normalising brightness), then each palette entry
    predicts its majority class.
    """
    votes: dict[int, dict[str, int]] = {}
    for sc in scenes:
        for i, box in enumerate(sc.boxes):
            pix = sc.instances == i
            if not pix.any():
                continue
            mean = sc.rgb[:, pix].mean(axis=1)
            mean = mean / max(np.linalg.norm(mean), 1e-9)
            pal = PALETTE / np.linalg.norm(PALETTE, axis=1, keepdims=True)
            key = int(np.argmax(pal @ mean))
            votes.setdefault(key, {}).setdefault(box.cls, 0)
            votes[key][box.cls] += 1
    total = sum(sum(v.values()) for v in votes.values())
    correct = sum(max(v.values()) for v in votes.values())
    return correct / total if total else 0.0
