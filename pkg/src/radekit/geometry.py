"""Rotated 3D boxes, head-output decoding, rotated IoU and class-aware NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .network import HeadOutputs
from .tensor import SensorGeometry

DEFAULT_TAU_CLS = 0.3
DEFAULT_NMS_IOU = 0.3


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    t = math.remainder(theta, 2 * math.pi)
    return math.pi if t <= -math.pi else t


@dataclass(frozen=True)
class Box3D:
    """Oriented box in the sensor frame (x forward, y left, z up); center is the volume center."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self) -> None:
        vals = [float(getattr(self, k)) for k in ("x", "y", "z", "l", "w", "h", "yaw")]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters {vals}")
        if min(vals[3:6]) <= 0:
            raise ValueError(f"box dimensions must be positive, got {vals[3:6]}")
        for k, v in zip(("x", "y", "z", "l", "w", "h"), vals):
            object.__setattr__(self, k, v)
        object.__setattr__(self, "yaw", wrap_angle(vals[6]))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw])

    def corners_bev(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        return _corners(self.x, self.y, self.l, self.w, self.yaw)

    def moved(self, dx=0.0, dy=0.0, dz=0.0, dyaw=0.0) -> "Box3D":
        return Box3D(self.x + dx, self.y + dy, self.z + dz, self.l, self.w, self.h, self.yaw + dyaw)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_id: int
    score: float
    cell: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if int(self.class_id) != self.class_id or self.class_id < 1:
            raise ValueError("class_id must be an integer >= 1")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def sort_key(det: Detection) -> tuple:
    """Descending score; ties broken by ascending x then y (then the rest for totality)."""
    b = det.box
    return (-det.score, b.x, b.y, det.class_id, b.z, b.l, b.w, b.h, b.yaw)


# --- decoding ---------------------------------------------------------------


def bin_centers_xy(geometry: SensorGeometry, r, a) -> tuple[np.ndarray, np.ndarray]:
    """Cartesian (x, y) of range/azimuth bin centers."""
    rng = geometry.range_of(r)
    az = np.radians(geometry.azimuth_of(a))
    return rng * np.cos(az), rng * np.sin(az)


def decode(outputs: HeadOutputs, geometry: SensorGeometry, tau_cls: float = DEFAULT_TAU_CLS) -> list[Detection]:
    """Threshold the confidence map and turn every surviving bin into a box.

    Background (channel 0) and padded azimuth columns are ignored. Detections are
    returned in (class, range bin, azimuth bin) order.
    """
    if not 0.0 < tau_cls < 1.0:
        raise ValueError("tau_cls must lie in (0, 1)")
    conf, params = outputs.conf, outputs.params
    if conf.shape[1] != geometry.n_r or conf.shape[2] < geometry.n_a:
        raise ValueError(f"head outputs {conf.shape} do not cover geometry {geometry.shape}")
    na = geometry.n_a
    dets: list[Detection] = []
    for c in range(1, conf.shape[0]):
        rr, aa = np.nonzero(conf[c, :, :na] >= tau_cls)
        if rr.size == 0:
            continue
        p = params[:, rr, aa].astype(np.float64)
        xc, yc = bin_centers_xy(geometry, rr, aa)
        xs = xc + p[0]
        ys = yc + p[1]
        zs = geometry.z0 + p[2]
        dims = np.exp(p[3:6])
        yaws = np.arctan2(p[6], p[7])
        scores = conf[c, rr, aa].astype(np.float64)
        for i in range(rr.size):
            box = Box3D(xs[i], ys[i], zs[i], dims[0, i], dims[1, i], dims[2, i], yaws[i])
            dets.append(Detection(box, c, float(scores[i]), (int(rr[i]), int(aa[i]))))
    return dets


# --- IoU --------------------------------------------------------------------


def _corners(x, y, l, w, yaw) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2, w / 2
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return np.array([(x + c * u - s * v, y + s * u + c * v) for u, v in local])


def polygon_area(poly: Sequence[Sequence[float]]) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_convex(subject: Sequence[Sequence[float]], clip: Sequence[Sequence[float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: intersect ``subject`` with convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        src, out = out, []
        m = len(src)
        for j in range(m):
            px, py = src[j]
            qx, qy = src[(j + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                out.append((px, py))
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_intersection(a: Box3D, b: Box3D) -> float:
    # work relative to a's center for translation invariance
    reach = 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w))
    dx, dy = b.x - a.x, b.y - a.y
    if dx * dx + dy * dy >= reach * reach:
        return 0.0
    pa = _corners(0.0, 0.0, a.l, a.w, a.yaw)
    pb = _corners(dx, dy, b.l, b.w, b.yaw)
    return max(polygon_area(clip_convex(pa, pb)), 0.0)


def _check(box: Box3D) -> None:
    if box.l * box.w <= 0 or box.h <= 0:
        raise ValueError("degenerate box")


def iou_bev(a: Box3D, b: Box3D) -> float:
    _check(a)
    _check(b)
    if a == b:
        return 1.0
    inter = bev_intersection(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    _check(a)
    _check(b)
    if a == b:
        return 1.0
    lo = max(a.z - a.h / 2, b.z - b.h / 2)
    hi = min(a.z + a.h / 2, b.z + b.h / 2)
    if hi <= lo:
        return 0.0
    inter = bev_intersection(a, b) * (hi - lo)
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return min(max(inter / union, 0.0), 1.0)


IOU_FUNCS = {"BEV": iou_bev, "3D": iou_3d}


# --- NMS --------------------------------------------------------------------


def nms(detections: Iterable[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy, class-aware suppression by BEV IoU; output is in descending score order."""
    ordered = sorted(detections, key=sort_key)
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for det in ordered:
        peers = by_class.setdefault(det.class_id, [])
        if all(iou_bev(det.box, k.box) < iou_threshold for k in peers):
            peers.append(det)
            kept.append(det)
    return kept
