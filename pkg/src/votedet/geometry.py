"""Oriented 3D box primitives: corners, IoU, containment, farthest point sampling.

Boxes are parameterized by center, full extents, and a yaw heading about +z.
Axis-aligned boxes carry heading = 0 exactly. All functions are pure and
operate on immutable inputs, so they are safe to call from multiple threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_TWO_PI = 2.0 * math.pi

# Corner sign pattern: z-low face counterclockwise viewed from +z, then the
# z-high face in the same planar order.
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [+1, -1, -1],
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, -1, +1],
        [+1, -1, +1],
        [+1, +1, +1],
        [-1, +1, +1],
    ],
    dtype=np.float64,
)

# BEV footprint corners, counterclockwise.
_RECT_SIGNS = np.array([[-1, -1], [+1, -1], [+1, +1], [-1, +1]], dtype=np.float64)

# Vertices closer than this to a clip edge count as inside (avoids NaN areas
# on near-parallel edges).
_CLIP_EPS = 1e-12


def normalize_heading(angle: float) -> float:
    """Wrap a yaw angle into (-pi, pi]."""
    a = math.fmod(float(angle) + math.pi, _TWO_PI)
    if a <= 0.0:
        a += _TWO_PI
    return a - math.pi


def rot_z(angle: float) -> np.ndarray:
    """3x3 rotation matrix about the +z (up) axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D bounding box: center (m), full extents (m), yaw heading (rad).

    ``label`` and ``score`` are only set when the box is attached to a
    prediction or an annotated ground truth.
    """

    center: np.ndarray
    size: np.ndarray
    heading: float = 0.0
    label: int | None = None
    score: float | None = None

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3).copy()
        size = np.asarray(self.size, dtype=np.float64).reshape(3).copy()
        if not np.isfinite(center).all() or not np.isfinite(size).all():
            raise ValueError("box center/size must be finite")
        if not (size > 0).all():
            raise ValueError(f"box size components must be strictly positive, got {size}")
        if not math.isfinite(self.heading):
            raise ValueError("box heading must be finite")
        center.setflags(write=False)
        size.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def with_heading(self, heading: float) -> "Box3D":
        return Box3D(self.center, self.size, heading, self.label, self.score)


@dataclass(frozen=True)
class PointSet:
    """A bag of 3D points, shape (m, 3)."""

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3).copy()
        if not np.isfinite(pos).all():
            raise ValueError("point coordinates must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]


def box_corners(box: Box3D) -> np.ndarray:
    """Return the 8 box vertices, shape (8, 3).

    Order: z-low face counterclockwise viewed from +z, then z-high face in
    the same planar order. For heading 0 the corners are center +/- size/2.
    """
    local = _CORNER_SIGNS * (box.size / 2.0)
    return local @ rot_z(box.heading).T + box.center


def _bev_rect(box: Box3D) -> np.ndarray:
    """BEV footprint as a counterclockwise (4, 2) polygon."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    local = _RECT_SIGNS * (box.size[:2] / 2.0)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + box.center[:2]


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` against convex CCW ``clip``."""
    output = [subject[i] for i in range(subject.shape[0])]
    for i in range(clip.shape[0]):
        a = clip[i]
        b = clip[(i + 1) % clip.shape[0]]
        edge = b - a
        if not output:
            break
        vertices, output = output, []
        prev = vertices[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= -_CLIP_EPS
        for cur in vertices:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= -_CLIP_EPS
            if cur_in != prev_in:
                # Signed distances have opposite signs, so the denominator
                # is bounded away from zero.
                d_prev = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
                d_cur = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0])
                t = d_prev / (d_prev - d_cur)
                output.append(prev + t * (cur - prev))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon, (n, 2)."""
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def iou_aa(a: Box3D, b: Box3D) -> float:
    """Exact IoU of two axis-aligned boxes. Rejects nonzero headings."""
    if a.heading != 0.0 or b.heading != 0.0:
        raise ValueError("iou_aa requires heading == 0 for both boxes; use iou_oriented")
    lo = np.maximum(a.center - a.size / 2.0, b.center - b.size / 2.0)
    hi = np.minimum(a.center + a.size / 2.0, b.center + b.size / 2.0)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.volume + b.volume - inter
    return inter / union


def iou_oriented(a: Box3D, b: Box3D) -> float:
    """IoU of two yaw-oriented boxes.

    BEV intersection area comes from convex polygon clipping of the two
    rotated footprints; the volume is that area times the z-interval overlap.
    Agrees with :func:`iou_aa` when both headings are zero.
    """
    inter_poly = _clip_polygon(_bev_rect(a), _bev_rect(b))
    area = _polygon_area(inter_poly)
    if area <= 0.0:
        return 0.0
    z_lo = max(a.center[2] - a.size[2] / 2.0, b.center[2] - b.size[2] / 2.0)
    z_hi = min(a.center[2] + a.size[2] / 2.0, b.center[2] + b.size[2] / 2.0)
    z_overlap = max(0.0, z_hi - z_lo)
    inter = area * z_overlap
    union = a.volume + b.volume - inter
    return inter / union


def smooth_l1(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Elementwise smooth-L1: 0.5 x^2 / beta below beta, |x| - beta/2 above."""
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def corner_distance(a: Box3D, b: Box3D, reduction: str = "smooth_l1") -> float:
    """Mean distance between corresponding corners, minimized over flipping
    b's heading by pi (resolves the yaw ambiguity of symmetric boxes).

    ``reduction`` selects the per-corner distance: "smooth_l1" averages
    smooth-L1 (threshold 1.0) over all 8 corners x 3 coordinates;
    "euclidean" averages per-corner Euclidean norms over the 8 corners.
    """
    ca = box_corners(a)
    cb = box_corners(b)
    cb_flip = box_corners(b.with_heading(b.heading + math.pi))
    if reduction == "smooth_l1":
        d = float(np.mean(smooth_l1(ca - cb)))
        d_flip = float(np.mean(smooth_l1(ca - cb_flip)))
    elif reduction == "euclidean":
        d = float(np.mean(np.linalg.norm(ca - cb, axis=1)))
        d_flip = float(np.mean(np.linalg.norm(ca - cb_flip, axis=1)))
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return min(d, d_flip)


def point_in_box(p: np.ndarray, box: Box3D) -> bool:
    """True iff p lies inside the box; the boundary counts as inside."""
    d = rot_z(-box.heading) @ (np.asarray(p, dtype=np.float64) - box.center)
    return bool(np.all(np.abs(d) <= box.size / 2.0))


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Vectorized containment test, (m, 3) -> (m,) bool. Boundary inclusive."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = (pts - box.center) @ rot_z(-box.heading).T
    return np.all(np.abs(d) <= box.size / 2.0, axis=1)


def fps(points: PointSet | np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling: n indices, deterministic given start.

    The first index is ``start``; each subsequent index maximizes the minimum
    distance to the selected set (ties broken by lowest index).
    """
    pos = points.positions if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    m = pos.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"need 1 <= n <= {m}, got n={n}")
    if not 0 <= start < m:
        raise ValueError(f"start index {start} out of range for {m} points")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    # Squared min-distance to the selected set; -1 marks already-selected.
    d2 = np.sum((pos - pos[start]) ** 2, axis=1)
    d2[start] = -1.0
    for i in range(1, n):
        idx = int(np.argmax(d2))
        selected[i] = idx
        d2 = np.minimum(d2, np.sum((pos - pos[idx]) ** 2, axis=1))
        d2[idx] = -1.0
    return selected
