"""LiDAR-to-camera-plane projection, plane rasterisation, densification and box masks.

Point clouds are plain ``(n, 3)`` float arrays. Grids are indexed ``[row, col]``
with row = v and col = u; a point projected to continuous (u, v) lands in pixel
``(floor(v), floor(u))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .tensor import load_tensor, save_tensor

DEPTH_EPSILON = 1e-6
DEFAULT_DILATION = 2

BACKGROUND, VEHICLE, HUMAN, VOID = 0, 1, 2, 255
MASK_CODES = (BACKGROUND, VEHICLE, HUMAN, VOID)
CLASS_NAMES = {BACKGROUND: "background", VEHICLE: "vehicle", HUMAN: "human"}
_LABEL_CODES = {"vehicle": VEHICLE, "car": VEHICLE, "human": HUMAN,
                "pedestrian": HUMAN, "cyclist": HUMAN}


def _mat3(a, b):
    # Fixed left-to-right summation so every implementation rounds the same way.
    return [[a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j] for j in range(3)]
            for i in range(3)]


@dataclass(frozen=True)
class SensorRig:
    euler: tuple[float, float, float]          # roll, pitch, yaw (rad)
    camera_pos: tuple[float, float, float]     # metres, LiDAR frame
    focal: tuple[float, float]                 # f_x, f_y (px)
    resolution: tuple[int, int]                # w, h (px)

    def __post_init__(self):
        object.__setattr__(self, "euler", tuple(float(a) for a in self.euler))
        object.__setattr__(self, "camera_pos", tuple(float(a) for a in self.camera_pos))
        object.__setattr__(self, "focal", tuple(float(a) for a in self.focal))
        object.__setattr__(self, "resolution", tuple(int(a) for a in self.resolution))
        if len(self.euler) != 3 or len(self.camera_pos) != 3:
            raise ValueError("euler and camera_pos need three components")
        if not all(math.isfinite(a) for a in self.euler + self.camera_pos):
            raise ValueError("rig angles and position must be finite")
        if min(self.focal) <= 0 or min(self.resolution) <= 0:
            raise ValueError(f"focal {self.focal} and resolution {self.resolution} must be positive")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def rotation(self) -> np.ndarray:
        """Product roll @ pitch @ yaw of the three elementary rotations."""
        rho, theta, phi = self.euler
        cr, sr = math.cos(rho), math.sin(rho)
        cp, sp = math.cos(theta), math.sin(theta)
        cy, sy = math.cos(phi), math.sin(phi)
        roll = [[1, 0, 0], [0, cr, sr], [0, -sr, cr]]
        pitch = [[cp, 0, -sp], [0, 1, 0], [sp, 0, cp]]
        yaw = [[cy, sy, 0], [-sy, cy, 0], [0, 0, 1]]
        return np.array(_mat3(_mat3(roll, pitch), yaw), dtype=float)

    def to_dict(self) -> dict:
        return {"euler": list(self.euler), "camera_pos": list(self.camera_pos),
                "focal": list(self.focal), "resolution": list(self.resolution)}

    @classmethod
    def from_dict(cls, d: dict) -> SensorRig:
        return cls(d["euler"], d["camera_pos"], d["focal"], d["resolution"])

    @classmethod
    def load(cls, path) -> SensorRig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass
class PlaneStack:
    """Camera-plane grids of transformed x, y, z values plus occupancy."""

    xy: np.ndarray
    yz: np.ndarray
    xz: np.ndarray
    occupancy: np.ndarray

    @classmethod
    def empty(cls, h: int, w: int) -> PlaneStack:
        return cls(np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w), bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.xy.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.xy, self.yz, self.xz])

    def copy(self) -> PlaneStack:
        return PlaneStack(self.xy.copy(), self.yz.copy(), self.xz.copy(), self.occupancy.copy())

    def equals(self, other: PlaneStack) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(
            (self.xy, self.yz, self.xz, self.occupancy),
            (other.xy, other.yz, other.xz, other.occupancy)))

    def to_array(self) -> np.ndarray:
        """(4, h, w): x, y, z grids then occupancy as 0/1."""
        return np.stack([self.xy, self.yz, self.xz, self.occupancy.astype(float)])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> PlaneStack:
        arr = np.asarray(arr, dtype=float)
        if arr.shape[0] == 3:
            occ = np.any(arr != 0, axis=0)
        else:
            occ = arr[3] != 0
        return cls(arr[0].copy(), arr[1].copy(), arr[2].copy(), occ)

    def save(self, path) -> None:
        save_tensor(path, self.to_array())

    @classmethod
    def load(cls, path) -> PlaneStack:
        return cls.from_array(load_tensor(path))


@dataclass
class Box3D:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]   # length (along heading), width, height
    heading: float
    cls: str = "vehicle"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.extents = tuple(float(c) for c in self.extents)
        self.heading = float(self.heading)
        if min(self.extents) <= 0:
            raise ValueError(f"box extents must be positive, got {self.extents}")
        if self.cls not in _LABEL_CODES:
            raise ValueError(f"unknown box class {self.cls!r}")

    @property
    def code(self) -> int:
        return _LABEL_CODES[self.cls]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Point-in-oriented-box test, boundaries inclusive."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3) - np.asarray(self.center)
        c, s = math.cos(self.heading), math.sin(self.heading)
        lx = c * pts[:, 0] + s * pts[:, 1]
        ly = -s * pts[:, 0] + c * pts[:, 1]
        l, w, h = self.extents
        return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(pts[:, 2]) <= h / 2)

    def corners(self) -> np.ndarray:
        l, w, h = self.extents
        c, s = math.cos(self.heading), math.sin(self.heading)
        local = np.array([[sx * l / 2, sy * w / 2, sz * h / 2]
                          for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        return local @ rot.T + np.asarray(self.center)

    def to_dict(self) -> dict:
        d = {"center": list(self.center), "extents": list(self.extents),
             "heading": self.heading, "class": self.cls}
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Box3D:
        extra = {k: v for k, v in d.items() if k not in ("center", "extents", "heading", "class")}
        return cls(d["center"], d["extents"], d["heading"], d["class"], extra)


# file formats -------------------------------------------------------------


def load_cloud(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 3))
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{path}: expected 'x y z' per line")
    return arr


def save_cloud(path, points: np.ndarray) -> None:
    with open(path, "w") as fh:
        for x, y, z in np.asarray(points, dtype=float).reshape(-1, 3):
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_boxes(path) -> list[Box3D]:
    return [Box3D.from_dict(d) for d in json.loads(Path(path).read_text())]


def save_boxes(path, boxes: list[Box3D]) -> None:
    Path(path).write_text(json.dumps([b.to_dict() for b in boxes], indent=1))


# pipeline -----------------------------------------------------------------


def transform_to_camera(points: np.ndarray, rig: SensorRig) -> np.ndarray:
    """R (p - c), with each row of R applied as r0*dx + r1*dy + r2*dz in that order.

    The explicit order (rather than a BLAS product) makes the result bitwise
    reproducible by any per-point implementation that follows it.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    d = pts - np.asarray(rig.camera_pos)
    R = rig.rotation()
    return np.stack([R[i, 0] * d[:, 0] + R[i, 1] * d[:, 1] + R[i, 2] * d[:, 2] for i in range(3)], axis=1)


@dataclass
class Projection:
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    behind: np.ndarray


def project_to_image(points_cam: np.ndarray, rig: SensorRig) -> Projection:
    """Pinhole projection with perspective division by the camera-frame z.

    Points with z <= DEPTH_EPSILON are flagged ``behind``; their u, v are NaN.
    """
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    behind = z <= DEPTH_EPSILON
    safe = np.where(behind, 1.0, z)
    fx, fy = rig.focal
    w, h = rig.resolution
    u = fx * (pts[:, 0] / safe) + w / 2
    v = fy * (pts[:, 1] / safe) + h / 2
    u[behind] = np.nan
    v[behind] = np.nan
    return Projection(u, v, z.copy(), behind)


def in_view(proj: Projection, rig: SensorRig) -> np.ndarray:
    w, h = rig.resolution
    with np.errstate(invalid="ignore"):
        return (~proj.behind) & (proj.u >= 0) & (proj.u < w) & (proj.v >= 0) & (proj.v < h)


def pixel_indices(proj: Projection, keep: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.floor(proj.v[keep]).astype(np.int64), np.floor(proj.u[keep]).astype(np.int64)


def populate(points_cam: np.ndarray, proj: Projection, rig: SensorRig) -> PlaneStack:
    """Write kept points into the grids; nearest depth wins, then lowest point index."""
    w, h = rig.resolution
    planes = PlaneStack.empty(h, w)
    keep = np.flatnonzero(in_view(proj, rig))
    if keep.size == 0:
        return planes
    rows = np.floor(proj.v[keep]).astype(np.int64)
    cols = np.floor(proj.u[keep]).astype(np.int64)
    order = np.lexsort((keep, proj.depth[keep]))
    lin = rows[order] * w + cols[order]
    _, first = np.unique(lin, return_index=True)
    winners = order[first]
    r, c, idx = rows[winners], cols[winners], keep[winners]
    planes.xy[r, c] = points_cam[idx, 0]
    planes.yz[r, c] = points_cam[idx, 1]
    planes.xz[r, c] = points_cam[idx, 2]
    planes.occupancy[r, c] = True
    return planes


def filter_and_populate(cloud: np.ndarray, rig: SensorRig) -> PlaneStack:
    cam = transform_to_camera(cloud, rig)
    return populate(cam, project_to_image(cam, rig), rig)


def densify(planes: PlaneStack, radius: int = DEFAULT_DILATION) -> PlaneStack:
    """Fill empty pixels from the nearest occupied pixel within Chebyshev ``radius``.

    Ties on distance go to the smaller depth (z value), then to the source
    pixel that comes first in row-major order. Occupied pixels are untouched.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    out = planes.copy()
    if radius == 0 or not planes.occupancy.any():
        return out
    h, w = planes.shape
    r = int(radius)
    pad = lambda a, fill: np.pad(a, r, constant_values=fill)
    occ = pad(planes.occupancy, False)
    grids = [pad(g, 0.0) for g in (planes.xy, planes.yz, planes.xz)]
    best_d = np.full((h, w), np.inf)
    best_z = np.full((h, w), np.inf)
    best = [np.zeros((h, w)) for _ in range(3)]
    found = np.zeros((h, w), bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            sl = (slice(r + dy, r + dy + h), slice(r + dx, r + dx + w))
            cand = occ[sl]
            d = max(abs(dy), abs(dx))
            z = grids[2][sl]
            better = cand & ((d < best_d) | ((d == best_d) & (z < best_z)))
            best_d[better] = d
            best_z[better] = z[better]
            for b, g in zip(best, grids):
                b[better] = g[sl][better]
            found |= better
    fill = found & ~planes.occupancy
    out.xy[fill], out.yz[fill], out.xz[fill] = best[0][fill], best[1][fill], best[2][fill]
    out.occupancy |= fill
    return out


def _footprint(box: Box3D, rig: SensorRig) -> np.ndarray:
    """Boolean grid of pixels whose centres fall inside the projected corner hull."""
    w, h = rig.resolution
    grid = np.zeros((h, w), bool)
    proj = project_to_image(transform_to_camera(box.corners(), rig), rig)
    front = ~proj.behind
    if front.sum() < 3:
        return grid
    pts2 = np.stack([proj.u[front], proj.v[front]], axis=1)
    try:
        hull = ConvexHull(pts2)
    except QhullError:
        return grid
    lo = np.clip(np.floor(pts2.min(axis=0)).astype(int), 0, [w, h])
    hi = np.clip(np.ceil(pts2.max(axis=0)).astype(int) + 1, 0, [w, h])
    if lo[0] >= hi[0] or lo[1] >= hi[1]:
        return grid
    cols, rows = np.meshgrid(np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]))
    centres = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)
    inside = np.all(centres @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-12, axis=1)
    grid[rows.ravel()[inside], cols.ravel()[inside]] = True
    return grid


def boxes_to_mask(cloud: np.ndarray, boxes: list[Box3D], rig: SensorRig) -> np.ndarray:
    """Class mask from LiDAR points inside labelled boxes.

    Pixels hit by an in-box point take that box's class (human beats vehicle
    on collision). Pixels inside a box's projected footprint that hold no
    LiDAR point at all become void; everything else is background.
    """
    w, h = rig.resolution
    mask = np.full((h, w), BACKGROUND, dtype=np.uint8)
    if not boxes:
        return mask
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    proj = project_to_image(transform_to_camera(cloud, rig), rig)
    keep = in_view(proj, rig)
    rows, cols = pixel_indices(proj, keep)
    has_point = np.zeros((h, w), bool)
    has_point[rows, cols] = True
    kept_pts = cloud[keep]
    footprint = np.zeros((h, w), bool)
    for code in (VEHICLE, HUMAN):
        for box in (b for b in boxes if b.code == code):
            inside = box.contains(kept_pts)
            mask[rows[inside], cols[inside]] = code
            footprint |= _footprint(box, rig)
    mask[footprint & ~has_point] = VOID
    return mask
