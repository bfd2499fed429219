"""
Yaw-rotated 3D box algebra.

Vertex ordering: vertex i takes the sign pattern of its index bits, bit 0 on x (w),
bit 1 on y (l), bit 2 on z (h); a cleared bit is the negative half-extent. Vertex 0 is
(-,-,-) and vertex 7 is (+,+,+). The per-vertex MLPs are indexed by this order.
"""
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from models import CoordinateFrame, PointSet, RotatedBox3

CONTAINS_SLACK = 1e-9
CLIP_SLACK = 1e-12
YAW_ALIGN_TOL = 1e-9

VERTEX_SIGNS = np.array(
    [[1.0 if (i >> axis) & 1 else -1.0 for axis in range(3)] for i in range(8)]
)

# Vertex subsets for the vertex-count ablation. None means the box center.
VERTEX_SUBSETS = {
    1: None,
    2: (0, 7),
    4: (0, 3, 5, 6),
    8: tuple(range(8)),
}


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def vertices(box: RotatedBox3) -> np.ndarray:
    """8 x 3 world-frame corners in canonical order."""
    local = VERTEX_SIGNS * (0.5 * box.size_array)
    return local @ rotation_z(box.yaw).T + box.center_array


def anchor_points(box: RotatedBox3, vertex_count: int = 8) -> np.ndarray:
    """The V x 3 anchors used by the bias: the center for V=1, else a vertex subset."""
    subset = VERTEX_SUBSETS[vertex_count]
    if subset is None:
        return box.center_array[None, :]
    return vertices(box)[list(subset)]


def _coords(points) -> np.ndarray:
    if isinstance(points, PointSet):
        return points.coords
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def canonical_offsets(points, box: RotatedBox3, vertex_count: int = 8,
                      frame: CoordinateFrame = CoordinateFrame.CANONICAL) -> np.ndarray:
    """
    N x V x 3 offsets p - v_i. In the canonical frame each offset is rotated by R^T of
    the box yaw (z untouched); in the world frame it is left as the raw difference.
    """
    coords = _coords(points)
    anchors = anchor_points(box, vertex_count)
    delta = coords[:, None, :] - anchors[None, :, :]
    if frame == CoordinateFrame.WORLD:
        return delta
    # row-vector form of R^T delta
    return delta @ rotation_z(box.yaw)


def batch_offsets(points, boxes: Sequence[RotatedBox3], vertex_count: int = 8,
                  frame: CoordinateFrame = CoordinateFrame.CANONICAL) -> np.ndarray:
    """K x N x V x 3 offsets for a batch of boxes."""
    coords = _coords(points)
    if not boxes:
        return np.zeros((0, coords.shape[0], len(VERTEX_SUBSETS[vertex_count] or (0,)), 3))
    return np.stack([canonical_offsets(coords, b, vertex_count, frame) for b in boxes])


def to_local(points, box: RotatedBox3) -> np.ndarray:
    """N x 3 coordinates of points in the box frame, origin at the center."""
    return (_coords(points) - box.center_array) @ rotation_z(box.yaw)


def contains_points(box: RotatedBox3, points) -> np.ndarray:
    """Boundary-inclusive containment mask for N points."""
    local = to_local(points, box)
    half = 0.5 * box.size_array + CONTAINS_SLACK
    return np.all(np.abs(local) <= half, axis=1)


def contains(box: RotatedBox3, point) -> bool:
    return bool(contains_points(box, np.asarray(point, dtype=np.float64).reshape(1, 3))[0])


# ============== FOOTPRINT POLYGONS ==============

def footprint(box: RotatedBox3) -> List[Tuple[float, float]]:
    """Counter-clockwise xy corners of the box footprint."""
    hw, hl = 0.5 * box.size[0], 0.5 * box.size[1]
    local = np.array([[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    world = local @ rot.T + box.center_array[:2]
    return [(float(x), float(y)) for x, y in world]


def clip_polygon(subject: List[Tuple[float, float]],
                 clipper: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Sutherland-Hodgman clipping of `subject` against the convex CCW polygon `clipper`."""
    if not subject or not clipper:
        return []

    def inside(p, a, b):
        cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        return cross >= -CLIP_SLACK

    def intersection(s, e, a, b):
        dc = (a[0] - b[0], a[1] - b[1])
        dp = (s[0] - e[0], s[1] - e[1])
        n1 = a[0] * b[1] - a[1] * b[0]
        n2 = s[0] * e[1] - s[1] * e[0]
        denom = dc[0] * dp[1] - dc[1] * dp[0]
        if denom == 0.0:
            return e
        n3 = 1.0 / denom
        return ((n1 * dp[0] - n2 * dc[0]) * n3, (n1 * dp[1] - n2 * dc[1]) * n3)

    output = list(subject)
    a = clipper[-1]
    for b in clipper:
        if not output:
            return []
        candidates, output = output, []
        s = candidates[-1]
        for e in candidates:
            if inside(e, a, b):
                if not inside(s, a, b):
                    output.append(intersection(s, e, a, b))
                output.append(e)
            elif inside(s, a, b):
                output.append(intersection(s, e, a, b))
            s = e
        a = b
    return output


def polygon_area(polygon: List[Tuple[float, float]]) -> float:
    if len(polygon) < 3:
        return 0.0
    total = 0.0
    for (x0, y0), (x1, y1) in zip(polygon, polygon[1:] + polygon[:1]):
        total += x0 * y1 - x1 * y0
    return abs(total) / 2.0


# ============== OVERLAP ==============

def _ordered(a: RotatedBox3, b: RotatedBox3) -> Tuple[RotatedBox3, RotatedBox3]:
    # fixed argument order so iou(a, b) and iou(b, a) run the identical computation
    return (a, b) if tuple(a.as_array()) <= tuple(b.as_array()) else (b, a)


def _z_overlap(a: RotatedBox3, b: RotatedBox3) -> float:
    lo = max(a.center[2] - 0.5 * a.size[2], b.center[2] - 0.5 * b.size[2])
    hi = min(a.center[2] + 0.5 * a.size[2], b.center[2] + 0.5 * b.size[2])
    return max(0.0, hi - lo)


def intersection_volume(a: RotatedBox3, b: RotatedBox3) -> float:
    a, b = _ordered(a, b)
    dz = _z_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    if a.yaw == b.yaw == 0.0:
        dx = min(a.center[0] + 0.5 * a.size[0], b.center[0] + 0.5 * b.size[0]) \
            - max(a.center[0] - 0.5 * a.size[0], b.center[0] - 0.5 * b.size[0])
        dy = min(a.center[1] + 0.5 * a.size[1], b.center[1] + 0.5 * b.size[1]) \
            - max(a.center[1] - 0.5 * a.size[1], b.center[1] - 0.5 * b.size[1])
        return max(0.0, dx) * max(0.0, dy) * dz
    area = polygon_area(clip_polygon(footprint(a), footprint(b)))
    return area * dz


def iou_rotated(a: RotatedBox3, b: RotatedBox3) -> float:
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def enclosing_yaw(a: RotatedBox3, b: RotatedBox3) -> float:
    """
    Yaw of the frame the enclosing box is aligned with: the shared box frame when the
    two yaws agree modulo pi/2, else the world axes.
    """
    gap = (a.yaw - b.yaw) % (0.5 * math.pi)
    if min(gap, 0.5 * math.pi - gap) <= YAW_ALIGN_TOL:
        return a.yaw
    return 0.0


def enclosing_bounds(a: RotatedBox3, b: RotatedBox3) -> Tuple[float, np.ndarray, np.ndarray]:
    """(yaw, lo, hi) of the enclosing box; lo/hi are in the frame rotated by yaw."""
    yaw = enclosing_yaw(a, b)
    corners = np.concatenate([vertices(a), vertices(b)]) @ rotation_z(yaw)
    return yaw, corners.min(axis=0), corners.max(axis=0)


def enclosing_volume(a: RotatedBox3, b: RotatedBox3) -> float:
    _, lo, hi = enclosing_bounds(a, b)
    return float(np.prod(hi - lo))


def giou_rotated(a: RotatedBox3, b: RotatedBox3) -> float:
    a, b = _ordered(a, b)
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    enclosing = max(enclosing_volume(a, b), union)
    iou = inter / union if union > 0.0 else 0.0
    return float(iou - (enclosing - union) / enclosing)


def pairwise_iou(boxes_a: Sequence[RotatedBox3], boxes_b: Sequence[RotatedBox3]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou_rotated(a, b)
    return out


def pairwise_giou(boxes_a: Sequence[RotatedBox3], boxes_b: Sequence[RotatedBox3]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = giou_rotated(a, b)
    return out


# ============== MONTE-CARLO ORACLES ==============

def monte_carlo_overlap(a: RotatedBox3, b: RotatedBox3, samples: int,
                        rng: Optional[np.random.Generator] = None,
                        chunk: int = 250_000) -> Tuple[float, float]:
    """
    (IoU, GIoU) estimated by uniform sampling of the enclosing box used by giou_rotated
    and classifying samples with inverse-rotated containment.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    yaw, lo, hi = enclosing_bounds(a, b)
    to_world = rotation_z(yaw).T
    enclosing = float(np.prod(hi - lo))
    both = either = 0
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        pts = rng.uniform(lo, hi, size=(n, 3)) @ to_world
        in_a = contains_points(a, pts)
        in_b = contains_points(b, pts)
        both += int(np.count_nonzero(in_a & in_b))
        either += int(np.count_nonzero(in_a | in_b))
        remaining -= n
    inter = enclosing * both / samples
    union = enclosing * either / samples
    iou = inter / union if union > 0 else 0.0
    return iou, iou - (enclosing - union) / enclosing


def random_box(rng: np.random.Generator, spread: float = 1.0, yaw_free: bool = True) -> RotatedBox3:
    center = rng.uniform(-spread, spread, size=3)
    size = rng.uniform(0.3, 2.0, size=3)
    yaw = rng.uniform(-math.pi, math.pi) if yaw_free else 0.0
    return RotatedBox3(tuple(center), tuple(size), yaw)


def rotate_scene(points, boxes: Sequence[RotatedBox3], phi: float,
                 shift: Optional[np.ndarray] = None):
    """Rotate points and boxes jointly about z by phi, then translate by shift."""
    rot = rotation_z(phi)
    shift = np.zeros(3) if shift is None else np.asarray(shift, dtype=np.float64)
    coords = _coords(points) @ rot.T + shift
    moved = [
        RotatedBox3(tuple(rot @ b.center_array + shift), b.size, b.yaw + phi)
        for b in boxes
    ]
    return coords, moved
