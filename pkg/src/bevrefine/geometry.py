"""Oriented BEV box algebra: rotated IoU, coordinate frames, point cropping.

Boxes are rectangles in the bird's-eye-view plane. Point clouds are handled
as ``(N, 4)`` float arrays with columns ``(x, y, z, t)``; only the ``(x, y)``
columns participate in BEV transforms, ``z`` and ``t`` ride along untouched.

Everything here is pure and stateless.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

# Boxes with BEV area below this are rejected by the IoU routines.
DEGENERATE_AREA = 1e-12


def normalize_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval [-pi, pi)."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    return (theta + math.pi) % TWO_PI - math.pi


def angular_distance(a: float, b: float) -> float:
    """Absolute distance between two angles, in [0, pi]."""
    return abs(normalize_angle(a - b))


@dataclass(frozen=True)
class Pose:
    """SE(2) pose: position (x, y) and heading theta in [-pi, pi)."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        for name in ("x", "y", "theta"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"Pose.{name} must be finite, got {v!r}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))


@dataclass(frozen=True)
class BevBox:
    """Oriented BEV rectangle.

    ``(x, y)`` is the center, ``l`` the extent along the heading direction,
    ``w`` the lateral extent, ``theta`` the heading in [-pi, pi).
    """

    x: float
    y: float
    l: float
    w: float
    theta: float

    def __post_init__(self):
        for name in ("x", "y", "l", "w", "theta"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"BevBox.{name} must be finite, got {v!r}")
        if self.l <= 0.0 or self.w <= 0.0:
            raise ValueError(f"BevBox extents must be positive, got l={self.l}, w={self.w}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def pose(self) -> Pose:
        return Pose(self.x, self.y, self.theta)

    @property
    def area(self) -> float:
        return self.l * self.w

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.l, self.w, self.theta]

    @classmethod
    def from_list(cls, vals) -> "BevBox":
        x, y, l, w, theta = vals
        return cls(float(x), float(y), float(l), float(w), float(theta))


def as_points(points) -> np.ndarray:
    """Coerce input to an (N, 4) float64 point array with columns (x, y, z, t)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 4)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"expected (N, 4) point array, got shape {pts.shape}")
    return pts


def box_corners(box: BevBox) -> np.ndarray:
    """Counter-clockwise corners (4, 2), starting at (+l/2, +w/2) in the box frame."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return np.array([(box.x + c * u - s * v, box.y + s * u + c * v) for u, v in local])


def _polygon_area(poly) -> float:
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return 0.5 * area


def _clip_halfplane(poly, ax, ay, bx, by):
    """Keep the part of a convex polygon left of (or on) the directed edge a->b."""
    ex, ey = bx - ax, by - ay
    out = []
    n = len(poly)
    side = [ex * (py - ay) - ey * (px - ax) for px, py in poly]
    for i in range(n):
        j = (i + 1) % n
        si, sj = side[i], side[j]
        if si >= 0.0:
            out.append(poly[i])
        if (si > 0.0 and sj < 0.0) or (si < 0.0 and sj > 0.0):
            t = si / (si - sj)
            xi, yi = poly[i]
            xj, yj = poly[j]
            out.append((xi + t * (xj - xi), yi + t * (yj - yi)))
    return out


def convex_intersection_area(poly_a: np.ndarray, poly_b: np.ndarray) -> float:
    """Area of the intersection of two convex CCW polygons (Sutherland-Hodgman)."""
    poly = [tuple(p) for p in poly_a]
    clip = [tuple(p) for p in poly_b]
    n = len(clip)
    for i in range(n):
        if len(poly) < 3:
            return 0.0
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        poly = _clip_halfplane(poly, ax, ay, bx, by)
    if len(poly) < 3:
        return 0.0
    return abs(_polygon_area(poly))


def _check_not_degenerate(*boxes: BevBox) -> None:
    for b in boxes:
        if b.area < DEGENERATE_AREA:
            raise ValueError(f"degenerate box with area {b.area!r}")


def rotated_iou(a: BevBox, b: BevBox) -> float:
    """IoU of two oriented boxes via exact convex polygon clipping."""
    _check_not_degenerate(a, b)
    inter = convex_intersection_area(box_corners(a), box_corners(b))
    union = a.area + b.area - inter
    return min(max(inter / union, 0.0), 1.0)


def aligned_iou(a: BevBox, b: BevBox) -> float:
    """IoU of the axis-aligned rectangles [x +- l/2] x [y +- w/2]; headings ignored."""
    _check_not_degenerate(a, b)
    ix = min(a.x + 0.5 * a.l, b.x + 0.5 * b.l) - max(a.x - 0.5 * a.l, b.x - 0.5 * b.l)
    iy = min(a.y + 0.5 * a.w, b.y + 0.5 * b.w) - max(a.y - 0.5 * a.w, b.y - 0.5 * b.w)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return min(max(inter / (a.area + b.area - inter), 0.0), 1.0)


def crop_points(points, box: BevBox, enlarge: float = 0.0, pad: float = 0.0) -> np.ndarray:
    """Keep points whose BEV projection falls inside the box scaled by (1 + enlarge).

    ``pad`` additionally widens both half-extents by an absolute margin in
    meters. ``z`` is unrestricted; rows keep all four columns.
    """
    if enlarge < 0.0:
        raise ValueError(f"enlarge must be >= 0, got {enlarge}")
    pts = as_points(points)
    if pts.shape[0] == 0:
        return pts
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = pts[:, 0] - box.x
    dy = pts[:, 1] - box.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    hl = 0.5 * box.l * (1.0 + enlarge) + pad
    hw = 0.5 * box.w * (1.0 + enlarge) + pad
    keep = (np.abs(u) <= hl) & (np.abs(v) <= hw)
    return pts[keep]


def transform_points(points, ref: Pose) -> np.ndarray:
    """Express points in the frame whose origin/heading is ``ref`` (world -> frame)."""
    pts = as_points(points).copy()
    if pts.shape[0] == 0:
        return pts
    c, s = math.cos(ref.theta), math.sin(ref.theta)
    dx = pts[:, 0] - ref.x
    dy = pts[:, 1] - ref.y
    pts[:, 0] = c * dx + s * dy
    pts[:, 1] = -s * dx + c * dy
    return pts


def transform_box(box: BevBox, ref: Pose) -> BevBox:
    """Express a box in the frame defined by ``ref``."""
    c, s = math.cos(ref.theta), math.sin(ref.theta)
    dx = box.x - ref.x
    dy = box.y - ref.y
    return BevBox(c * dx + s * dy, -s * dx + c * dy, box.l, box.w, box.theta - ref.theta)


def pose_in_world(local: Pose, ref: Pose) -> Pose:
    """Map a pose expressed in ``ref``'s frame back out (inverse of transform_box on poses)."""
    c, s = math.cos(ref.theta), math.sin(ref.theta)
    return Pose(ref.x + c * local.x - s * local.y,
                ref.y + s * local.x + c * local.y,
                ref.theta + local.theta)


def middle_index(n: int) -> int:
    """Index of the trajectory's reference frame (floor of n / 2)."""
    return n // 2


def to_trajectory_frame(boxes, points_per_frame=None):
    """Re-express boxes (and optional per-frame points) so the middle box has pose (0, 0, 0).

    Returns ``(boxes, points, ref)`` where ``ref`` is the world pose of the
    middle box that was used as the new origin. ``points`` is ``None`` when no
    point lists were given.
    """
    boxes = list(boxes)
    if len(boxes) < 1:
        raise ValueError("need at least one box")
    ref = boxes[middle_index(len(boxes))].pose
    out_boxes = [transform_box(b, ref) for b in boxes]
    if points_per_frame is None:
        return out_boxes, None, ref
    out_points = [transform_points(p, ref) for p in points_per_frame]
    return out_boxes, out_points, ref


def to_object_frame(points, box: BevBox) -> np.ndarray:
    """Express points in the box's own frame (center at origin, heading along +x)."""
    return transform_points(points, box.pose)


def canonicalize_headings(boxes) -> list[BevBox]:
    """Resolve 180-degree heading ambiguity by majority vote against frame 1.

    Frames whose heading lies within pi/2 of the first frame's form one group,
    the rest the other; the minority group gets flipped by pi (ties flip the
    non-reference group). Only theta changes, and only by exactly 0 or pi.
    """
    boxes = list(boxes)
    if len(boxes) < 1:
        raise ValueError("need at least one box")
    ref = boxes[0].theta
    in_a = [angular_distance(b.theta, ref) < HALF_PI for b in boxes]
    n_a = sum(in_a)
    flip_a = n_a < len(boxes) - n_a
    out = []
    for b, a in zip(boxes, in_a):
        if a == flip_a:
            out.append(BevBox(b.x, b.y, b.l, b.w, b.theta + math.pi))
        else:
            out.append(b)
    return out
