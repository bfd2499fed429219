import math

import numpy as np
import pytest

from errors import GeometryError
from geometry import (
    VERTEX_SUBSETS,
    anchor_points,
    batch_offsets,
    canonical_offsets,
    clip_polygon,
    contains,
    contains_points,
    footprint,
    giou_rotated,
    intersection_volume,
    iou_rotated,
    monte_carlo_overlap,
    pairwise_iou,
    polygon_area,
    random_box,
    rotate_scene,
    vertices,
)
from models import CoordinateFrame, RotatedBox3, normalize_yaw


# ============== BOX CONSTRUCTION ==============

class TestRotatedBox3:

    @pytest.mark.parametrize("size", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, math.inf)])
    def test_rejects_bad_size(self, size):
        with pytest.raises(GeometryError):
            RotatedBox3((0.0, 0.0, 0.0), size, 0.0)

    def test_rejects_nan_center(self):
        with pytest.raises(GeometryError):
            RotatedBox3((math.nan, 0.0, 0.0), (1.0, 1.0, 1.0))

    def test_yaw_is_wrapped(self):
        box = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 3 * math.pi / 2)
        assert box.yaw == pytest.approx(-math.pi / 2)

    def test_normalize_yaw_range(self):
        assert normalize_yaw(-math.pi) == pytest.approx(math.pi)
        assert normalize_yaw(2 * math.pi) == pytest.approx(0.0, abs=1e-15)


# ============== VERTICES AND OFFSETS ==============

class TestVertices:

    def test_vertex_order(self):
        box = RotatedBox3((1.0, 2.0, 3.0), (2.0, 4.0, 6.0), 0.0)
        v = vertices(box)
        np.testing.assert_allclose(v[0], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(v[7], [2.0, 4.0, 6.0])
        np.testing.assert_allclose(v[1], [2.0, 0.0, 0.0])
        np.testing.assert_allclose(v.mean(axis=0), box.center)

    def test_anchor_subsets(self):
        box = RotatedBox3((1.0, 2.0, 3.0), (2.0, 4.0, 6.0), 0.4)
        np.testing.assert_allclose(anchor_points(box, 1), [box.center])
        for count in (2, 4, 8):
            assert anchor_points(box, count).shape == (count, 3)
        np.testing.assert_allclose(anchor_points(box, 2), vertices(box)[list(VERTEX_SUBSETS[2])])

    def test_canonical_rotation(self):
        box = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), math.pi / 2)
        off = canonical_offsets(np.array([[1.0, 0.0, 0.0]]), box, vertex_count=1)
        np.testing.assert_allclose(off[0, 0], [0.0, -1.0, 0.0], atol=1e-15)

    def test_world_frame_is_raw_difference(self):
        box = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), math.pi / 2)
        off = canonical_offsets(np.array([[1.0, 0.0, 0.0]]), box, vertex_count=1,
                                frame=CoordinateFrame.WORLD)
        np.testing.assert_allclose(off[0, 0], [1.0, 0.0, 0.0])

    def test_batch_shape(self, rng):
        boxes = [random_box(rng) for _ in range(3)]
        pts = rng.normal(size=(10, 3))
        assert batch_offsets(pts, boxes).shape == (3, 10, 8, 3)
        assert batch_offsets(pts, boxes, vertex_count=4).shape == (3, 10, 4, 3)

    def test_offsets_invariant_under_scene_rotation(self, rng):
        box = random_box(rng)
        pts = rng.normal(size=(20, 3))
        base = batch_offsets(pts, [box])
        coords, moved = rotate_scene(pts, [box], 1.1, np.array([0.5, -2.0, 0.3]))
        np.testing.assert_allclose(batch_offsets(coords, moved), base, atol=1e-12)


class TestContains:

    def test_boundary_inclusive(self, unit_cube):
        assert contains(unit_cube, (0.5, 0.5, 0.5))
        assert contains(unit_cube, (0.0, 0.0, 0.0))
        assert not contains(unit_cube, (0.51, 0.0, 0.0))

    def test_rotated_box(self):
        box = RotatedBox3((0.0, 0.0, 0.0), (2.0, 0.2, 1.0), math.pi / 2)
        # long axis now runs along y
        assert contains(box, (0.0, 0.9, 0.0))
        assert not contains(box, (0.9, 0.0, 0.0))

    def test_vectorized_matches_scalar(self, rng):
        box = random_box(rng)
        pts = rng.uniform(-2, 2, size=(50, 3))
        mask = contains_points(box, pts)
        assert [contains(box, p) for p in pts] == list(mask)


# ============== POLYGONS ==============

def test_clip_identical_squares():
    square = footprint(RotatedBox3((0.0, 0.0, 0.0), (2.0, 2.0, 1.0)))
    assert polygon_area(clip_polygon(square, square)) == pytest.approx(4.0)


def test_clip_disjoint_is_empty():
    a = footprint(RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)))
    b = footprint(RotatedBox3((5.0, 0.0, 0.0), (1.0, 1.0, 1.0)))
    assert polygon_area(clip_polygon(a, b)) == 0.0


def test_degenerate_polygon_area():
    assert polygon_area([(0.0, 0.0), (1.0, 1.0)]) == 0.0


# ============== IOU / GIOU ==============

class TestOverlap:

    def test_identical_boxes(self, rng):
        box = random_box(rng)
        assert iou_rotated(box, box) == pytest.approx(1.0, abs=1e-9)
        assert giou_rotated(box, box) == pytest.approx(1.0, abs=1e-9)

    def test_half_height(self, unit_cube):
        half = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 0.5), 0.0)
        assert iou_rotated(unit_cube, half) == pytest.approx(0.5)

    def test_disjoint_giou(self, unit_cube):
        far = RotatedBox3((3.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        assert iou_rotated(unit_cube, far) == 0.0
        assert giou_rotated(unit_cube, far) == pytest.approx(-0.5)

    def test_touching_faces(self, unit_cube):
        touching = RotatedBox3((1.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
        assert iou_rotated(unit_cube, touching) == 0.0
        assert giou_rotated(unit_cube, touching) == pytest.approx(0.0, abs=1e-12)

    def test_45_degree_cube(self, unit_cube):
        turned = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), math.pi / 4)
        # footprint intersection is a regular octagon of area 2(sqrt2 - 1)
        inter = 2.0 * (math.sqrt(2.0) - 1.0)
        assert intersection_volume(unit_cube, turned) == pytest.approx(inter, abs=1e-12)
        assert iou_rotated(unit_cube, turned) == pytest.approx(inter / (2.0 - inter), abs=1e-12)

    def test_symmetry_exact(self, rng):
        for _ in range(50):
            a, b = random_box(rng, 0.5), random_box(rng, 0.5)
            assert iou_rotated(a, b) == iou_rotated(b, a)
            assert giou_rotated(a, b) == giou_rotated(b, a)

    def test_bounds(self, rng):
        for _ in range(50):
            a, b = random_box(rng, 0.8), random_box(rng, 0.8)
            iou, giou = iou_rotated(a, b), giou_rotated(a, b)
            assert 0.0 <= iou <= 1.0
            assert -1.0 <= giou <= iou + 1e-12

    def test_rigid_invariance(self, rng):
        a, b = random_box(rng, 0.5), random_box(rng, 0.5)
        _, (ra, rb) = rotate_scene(np.zeros((0, 3)), [a, b], 0.9, np.array([1.0, 2.0, -1.0]))
        assert iou_rotated(ra, rb) == pytest.approx(iou_rotated(a, b), abs=1e-9)

    def test_pairwise_shape(self, rng):
        boxes = [random_box(rng) for _ in range(3)]
        out = pairwise_iou(boxes, boxes[:2])
        assert out.shape == (3, 2)
        np.testing.assert_allclose(np.diag(out[:2]), 1.0, atol=1e-9)


@pytest.mark.slow
def test_monte_carlo_agreement(rng):
    for _ in range(10):
        a, b = random_box(rng, 0.5), random_box(rng, 0.5)
        mc_iou, mc_giou = monte_carlo_overlap(a, b, 1_000_000, rng)
        assert abs(iou_rotated(a, b) - mc_iou) < 0.01
        assert abs(giou_rotated(a, b) - mc_giou) < 0.01


class TestRotatedEnclosure:

    @pytest.mark.parametrize("yaw", [0.0, 0.3, math.pi / 4, math.pi / 2, -2.0])
    def test_identical_rotated_boxes(self, yaw):
        box = RotatedBox3((0.4, -1.0, 0.5), (2.0, 1.0, 1.0), yaw)
        assert giou_rotated(box, box) == pytest.approx(1.0, abs=1e-9)

    def test_quarter_turn_with_swapped_sizes(self):
        a = RotatedBox3((0.0, 0.0, 0.0), (2.0, 1.0, 1.0), 0.3)
        b = RotatedBox3((0.0, 0.0, 0.0), (1.0, 2.0, 1.0), 0.3 + math.pi / 2)
        assert iou_rotated(a, b) == pytest.approx(1.0, abs=1e-9)
        assert giou_rotated(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_aligned_pair_keeps_giou_under_rotation(self, unit_cube):
        shifted = RotatedBox3((0.5, 0.5, 0.0), (1.0, 1.0, 1.0), 0.0)
        expected = 0.25 / 1.75 - (2.25 - 1.75) / 2.25
        assert giou_rotated(unit_cube, shifted) == pytest.approx(expected, abs=1e-12)
        for phi in (0.3, 0.9, -2.0):
            _, (ra, rb) = rotate_scene(np.zeros((0, 3)), [unit_cube, shifted], phi)
            assert giou_rotated(ra, rb) == pytest.approx(expected, abs=1e-9)

    def test_unaligned_pair_uses_world_axes(self, unit_cube):
        turned = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), math.pi / 4)
        inter = 2.0 * (math.sqrt(2.0) - 1.0)
        union = 2.0 - inter
        enclosing = 2.0  # sqrt2 x sqrt2 x 1 world-axis box around the turned cube
        assert giou_rotated(unit_cube, turned) == pytest.approx(
            inter / union - (enclosing - union) / enclosing, abs=1e-12)


@pytest.mark.slow
def test_monte_carlo_agreement_rotated_aligned(rng):
    a = RotatedBox3((0.0, 0.0, 0.0), (2.0, 1.0, 1.0), 0.7)
    b = RotatedBox3((0.6, 0.2, 0.3), (1.5, 1.2, 0.8), 0.7)
    mc_iou, mc_giou = monte_carlo_overlap(a, b, 1_000_000, rng)
    assert abs(iou_rotated(a, b) - mc_iou) < 0.01
    assert abs(giou_rotated(a, b) - mc_giou) < 0.01
