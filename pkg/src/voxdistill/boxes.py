"""Oriented 3D boxes and exact rotated BEV overlap.

BEV intersection uses Sutherland-Hodgman polygon clipping so evaluation is
deterministic and exact up to float arithmetic, with no sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def normalize_yaw(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = (float(a) + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if r == -math.pi else r


@dataclass(frozen=True)
class Box3D:
    """Axis extents in meters, yaw about +z in radians, integer class id."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float
    cls: int = 0

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0.0:
            raise ContractError(
                f"box extents must be positive: {self.length}x{self.width}x{self.height}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise footprint corners, [4, 2]."""
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def contains_points(self, xyz: np.ndarray) -> np.ndarray:
        """Yaw-aware membership test for [N, 3] points (boundary counts)."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        dx = xyz[:, 0] - self.cx
        dy = xyz[:, 1] - self.cy
        dz = xyz[:, 2] - self.cz
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return ((np.abs(lx) <= self.length / 2.0)
                & (np.abs(ly) <= self.width / 2.0)
                & (np.abs(dz) <= self.height / 2.0))


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as [K, 2] vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex CCW polygon `clip`."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = (b[0] - a[0], b[1] - a[1])
        current = output
        output = []
        prev = current[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for cur in current:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                output.append(_edge_intersection(prev, cur, a, b))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output).reshape(-1, 2)


def _edge_intersection(p1, p2, a, b):
    x1, y1 = p1
    x2, y2 = p2
    x3, y3 = a
    x4, y4 = b
    denom = (x1 - x2) * (y3 - y4) - (y1 - y2) * (x3 - x4)
    if denom == 0.0:
        return p2
    t = ((x1 - x3) * (y3 - y4) - (y1 - y3) * (x3 - x4)) / denom
    return (x1 + t * (x2 - x1), y1 + t * (y2 - y1))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated intersection-over-union of the two footprints."""
    ca, cb = a.bev_corners(), b.bev_corners()
    inter = polygon_area(clip_polygon(ca, cb))
    area_a = a.length * a.width
    area_b = b.length * b.width
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0
