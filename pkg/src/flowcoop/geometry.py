"""Planar poses, oriented 3D boxes and rotated-box overlap.

All poses are 2D (x, y, yaw); roll and pitch are ignored throughout the
package. Boxes follow the (cx, cy, cz, w, l, h, yaw) convention where ``l``
runs along the heading and ``w`` across it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

CLIP_EPS = 1e-9


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    def compose(self, other: "Pose2") -> "Pose2":
        """Return ``self ∘ other``: apply ``other`` first, then ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array of points."""
        xy = np.asarray(xy, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(xy)
        out[..., 0] = c * xy[..., 0] - s * xy[..., 1] + self.x
        out[..., 1] = s * xy[..., 0] + c * xy[..., 1] + self.y
        return out


def relative_pose(pose_src: Pose2, pose_dst: Pose2) -> Pose2:
    """Pose of the ``src`` frame expressed in the ``dst`` frame."""
    return pose_dst.inverse().compose(pose_src)


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float = 0.0
    class_id: int = 0
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w} l={self.l} h={self.h}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def bev_area(self) -> float:
        return self.w * self.l

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    def corners_bev(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw, self.confidence],
            dtype=np.float64,
        )


def transform_box(box: Box3D, pose: Pose2) -> Box3D:
    """Express ``box`` in the parent frame of ``pose``."""
    cx, cy = pose.apply(np.array([box.cx, box.cy]))
    return replace(box, cx=float(cx), cy=float(cy), yaw=normalize_angle(box.yaw + pose.yaw))


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as (N, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    # keep the part of `subject` left of the directed edge a->b (CCW clip polygon)
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        cur_in, nxt_in = sc >= -CLIP_EPS, sn >= -CLIP_EPS
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = sc / (sc - sn)
            out.append(cur + t * (nxt - cur))
    return out


def convex_intersection(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of convex CCW polygon ``p`` by convex CCW ``q``."""
    poly = [np.asarray(v, dtype=np.float64) for v in p]
    m = len(q)
    for i in range(m):
        if not poly:
            break
        poly = _clip(poly, q[i], q[(i + 1) % m])
    return np.array(poly) if poly else np.zeros((0, 2))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # footprints inside disjoint circumscribed circles cannot overlap
    reach = 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w))
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > reach:
        return 0.0
    return polygon_area(convex_intersection(a.corners_bev(), b.corners_bev()))


def bev_iou(a: Box3D, b: Box3D) -> float:
    area_a, area_b = a.bev_area, b.bev_area
    if area_a <= 0 or area_b <= 0:
        raise ValueError("degenerate box")
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    if a.volume <= 0 or b.volume <= 0:
        raise ValueError("degenerate box")
    top = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    bot = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    z_overlap = max(0.0, top - bot)
    if z_overlap == 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * z_overlap
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))
