"""Slow reference implementations used as test oracles.

Each one is written per point or per pixel with plain Python loops and shares
no code with the package beyond the data containers.
"""

import math

import numpy as np


def rotation(roll, pitch, yaw):
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    r_roll = [[1, 0, 0], [0, cr, sr], [0, -sr, cr]]
    r_pitch = [[cp, 0, -sp], [0, 1, 0], [sp, 0, cp]]
    r_yaw = [[cy, sy, 0], [-sy, cy, 0], [0, 0, 1]]

    def mm(a, b):
        out = [[0.0] * 3 for _ in range(3)]
        for i in range(3):
            for j in range(3):
                acc = a[i][0] * b[0][j]
                acc += a[i][1] * b[1][j]
                acc += a[i][2] * b[2][j]
                out[i][j] = acc
        return out
    return mm(mm(r_roll, r_pitch), r_yaw)


def to_camera(point, rig):
    R = rotation(*rig.euler)
    d = [point[i] - rig.camera_pos[i] for i in range(3)]
    out = []
    for i in range(3):
        acc = R[i][0] * d[0]
        acc += R[i][1] * d[1]
        acc += R[i][2] * d[2]
        out.append(acc)
    return out


def populate(cloud, rig, eps=1e-6):
    """Per-point z-buffer: nearest depth wins, ties go to the earlier point."""
    w, h = rig.resolution
    fx, fy = rig.focal
    grids = np.zeros((3, h, w))
    occ = np.zeros((h, w), bool)
    best = {}
    for i, p in enumerate(cloud):
        x, y, z = to_camera(p, rig)
        if z <= eps:
            continue
        u = fx * (x / z) + w / 2
        v = fy * (y / z) + h / 2
        if not (0 <= u < w and 0 <= v < h):
            continue
        key = (math.floor(v), math.floor(u))
        if key not in best or z < best[key][0]:
            best[key] = (z, (x, y, z))
    for (r, c), (_, xyz) in best.items():
        grids[:, r, c] = xyz
        occ[r, c] = True
    return grids, occ


def densify(grids, occ, radius):
    h, w = occ.shape
    out, out_occ = grids.copy(), occ.copy()
    for r in range(h):
        for c in range(w):
            if occ[r, c]:
                continue
            choice = None
            for rr in range(max(0, r - radius), min(h, r + radius + 1)):
                for cc in range(max(0, c - radius), min(w, c + radius + 1)):
                    if not occ[rr, cc]:
                        continue
                    key = (max(abs(rr - r), abs(cc - c)), grids[2, rr, cc], rr, cc)
                    if choice is None or key < choice:
                        choice = key
            if choice is not None:
                out[:, r, c] = grids[:, choice[2], choice[3]]
                out_occ[r, c] = True
    return out, out_occ


def in_box(p, box):
    dx, dy, dz = (p[i] - box.center[i] for i in range(3))
    c, s = math.cos(box.heading), math.sin(box.heading)
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    l, wd, ht = box.extents
    return abs(lx) <= l / 2 and abs(ly) <= wd / 2 and abs(dz) <= ht / 2


def _hull(points):
    pts = sorted(set(points))
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def footprint(box, rig, eps=1e-6):
    w, h = rig.resolution
    fx, fy = rig.focal
    uv = []
    for corner in box.corners():
        x, y, z = to_camera(corner, rig)
        if z > eps:
            uv.append((fx * x / z + w / 2, fy * y / z + h / 2))
    grid = np.zeros((h, w), bool)
    hull = _hull(uv)
    if len(hull) < 3:
        return grid
    for r in range(h):
        for c in range(w):
            px, py = c + 0.5, r + 0.5
            ok = True
            for i in range(len(hull)):
                a, b = hull[i], hull[(i + 1) % len(hull)]
                if (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) < -1e-9:
                    ok = False
                    break
            grid[r, c] = ok
    return grid


def boxes_to_mask(cloud, boxes, rig, eps=1e-6):
    w, h = rig.resolution
    fx, fy = rig.focal
    codes = {"vehicle": 1, "car": 1, "human": 2, "pedestrian": 2, "cyclist": 2}
    mask = np.zeros((h, w), np.uint8)
    if not boxes:
        return mask
    hit = np.zeros((h, w), bool)
    for p in cloud:
        x, y, z = to_camera(p, rig)
        if z <= eps:
            continue
        u, v = fx * x / z + w / 2, fy * y / z + h / 2
        if not (0 <= u < w and 0 <= v < h):
            continue
        r, c = math.floor(v), math.floor(u)
        hit[r, c] = True
        for box in boxes:
            if in_box(p, box):
                mask[r, c] = max(mask[r, c], codes[box.cls])
    fp = np.zeros((h, w), bool)
    for box in boxes:
        fp |= footprint(box, rig)
    mask[fp & ~hit] = 255
    return mask


def readout_project(seq, weight, bias):
    """Loop version of the readout: concatenate each patch token with the class token, project, GELU."""
    n_plus_1, d = seq.shape
    out = np.zeros((n_plus_1 - 1, weight.shape[1]))
    for i in range(1, n_plus_1):
        cat = list(seq[i]) + list(seq[0])
        for j in range(weight.shape[1]):
            acc = bias[j]
            for k in range(2 * d):
                acc += cat[k] * weight[k, j]
            out[i - 1, j] = acc * 0.5 * (1.0 + math.erf(acc / math.sqrt(2.0)))
    return out


def confusion_counts(pred, gt):
    """Per-class TP, FP, FN and the void count by visiting every pixel."""
    tp, fp, fn = [0, 0, 0], [0, 0, 0], [0, 0, 0]
    void = 0
    for r in range(gt.shape[0]):
        for c in range(gt.shape[1]):
            g, p = int(gt[r, c]), int(pred[r, c])
            if g == 255:
                void += 1
                continue
            if g == p:
                tp[g] += 1
            else:
                fp[p] += 1
                fn[g] += 1
    return tp, fp, fn, void
