"""Projection, segmentation-target and pixel-feature tests."""

from __future__ import annotations

import math

import numpy as np
import pytest

from scs_lab.geometry import Box7, Frame
from scs_lab.rangeimage import (
    ProjectionConfig,
    build_seg_target,
    local_range_variance,
    pixel_features,
    project,
)


def make_frame(points, boxes=(), labeled=frozenset({1, 2})):
    return Frame(
        frame_id=0,
        points=np.asarray(points, dtype=np.float64),
        boxes=tuple(boxes),
        labeled_classes=labeled,
    )


class TestProject:
    def test_single_point_straight_ahead_hits_center(self):
        # symmetric spans, odd dims: azimuth 0 / inclination 0 must land in
        # the middle bin. Hand evaluation: col = floor((0+pi)/(2pi)*5) = 2,
        # row = floor((0.2-0)/0.4*5) = 2.
        cfg = ProjectionConfig(height=5, width=5, inclination_span=(-0.2, 0.2))
        ri = project([[10.0, 0.0, 0.0, 0.5]], cfg)
        assert ri.valid[2, 2]
        assert ri.rng[2, 2] == pytest.approx(10.0)
        assert np.count_nonzero(ri.valid) == 1

    def test_point_outside_inclination_span_dropped(self):
        cfg = ProjectionConfig(height=4, width=8, inclination_span=(-0.3, 0.1))
        ri = project([[5.0, 0.0, 4.0, 0.0]], cfg)  # inclination ~0.675
        assert not ri.valid.any()

    def test_collision_keeps_nearer_point(self):
        cfg = ProjectionConfig(height=4, width=8, inclination_span=(-0.2, 0.2))
        ri = project([[9.0, 0.0, 0.0, 0.1], [5.0, 0.0, 0.0, 0.9]], cfg)
        r, c = np.argwhere(ri.valid)[0]
        assert ri.rng[r, c] == pytest.approx(5.0)
        assert ri.point_index[r, c] == 1
        assert ri.intensity[r, c] == pytest.approx(0.9)

    def test_deterministic(self, rng):
        pts = np.column_stack(
            [rng.uniform(3, 15, 500), rng.uniform(-5, 5, 500), rng.uniform(-2, 0, 500), rng.uniform(0, 1, 500)]
        )
        cfg = ProjectionConfig()
        a, b = project(pts, cfg), project(pts, cfg)
        np.testing.assert_array_equal(a.rng, b.rng)
        np.testing.assert_array_equal(a.point_index, b.point_index)

    def test_invalid_pixels_have_no_backref(self, rng):
        pts = np.column_stack(
            [rng.uniform(3, 15, 50), rng.uniform(-5, 5, 50), rng.uniform(-2, 0, 50), np.zeros(50)]
        )
        ri = project(pts, ProjectionConfig())
        assert np.all(ri.point_index[~ri.valid] == -1)
        assert np.all(ri.rng[ri.valid] > 0)


def scene_with_boxes():
    # one point in a "pedestrian" box, one in a "vehicle" box, one free
    ped = Box7(8.0, 0.0, -0.5, 0.8, 0.8, 1.0, 0.0, class_id=2)
    veh = Box7(0.0, 8.0, -1.5, 4.0, 2.0, 1.0, 0.0, class_id=1)
    pts = [
        [8.0, 0.0, -0.5, 0.1],  # inside ped
        [0.0, 8.0, -1.5, 0.2],  # inside veh
        [12.0, -4.0, -1.8, 0.3],  # ground
    ]
    return pts, ped, veh


class TestBuildSegTarget:
    def test_labeled_pedestrian_pixel(self):
        pts, ped, veh = scene_with_boxes()
        frame = make_frame(pts, [ped, veh])
        ri = project(frame.points, ProjectionConfig())
        target = build_seg_target(ri, frame)
        r, c = np.argwhere(ri.point_index == 0)[0]
        assert target.classes[r, c] == 2
        assert not target.missing[r, c]

    def test_unlabeled_vehicle_point_is_missing_background(self):
        # vehicle objects exist but the vehicle class carries no labels:
        # the pixel could be background or vehicle, so it is missing
        pts, ped, _veh = scene_with_boxes()
        frame = make_frame(pts, [ped], labeled=frozenset({2}))
        ri = project(frame.points, ProjectionConfig())
        target = build_seg_target(ri, frame)
        r, c = np.argwhere(ri.point_index == 1)[0]
        assert target.classes[r, c] == 0
        assert target.missing[r, c]

    def test_fully_labeled_missing_is_outside_all_boxes(self):
        pts, ped, veh = scene_with_boxes()
        frame = make_frame(pts, [ped, veh])
        ri = project(frame.points, ProjectionConfig())
        target = build_seg_target(ri, frame)
        assert not target.missing[ri.point_index == 0].any()
        assert not target.missing[ri.point_index == 1].any()
        assert target.missing[ri.point_index == 2].all()

    def test_untrusted_initialized_to_missing(self):
        pts, ped, veh = scene_with_boxes()
        frame = make_frame(pts, [ped, veh])
        ri = project(frame.points, ProjectionConfig())
        target = build_seg_target(ri, frame)
        np.testing.assert_array_equal(target.untrusted, target.missing)

    def test_partition_property(self, rng):
        for _ in range(5):
            n = 300
            pts = np.column_stack(
                [rng.uniform(4, 14, n), rng.uniform(-6, 6, n), rng.uniform(-2.1, -0.2, n), np.zeros(n)]
            )
            boxes = [
                Box7(9, 0, -1.2, 3.5, 1.8, 1.6, float(rng.uniform(-3, 3)), class_id=1),
                Box7(7, 3, -0.8, 0.8, 0.7, 1.2, 0.0, class_id=2),
            ]
            frame = make_frame(pts, boxes)
            ri = project(frame.points, ProjectionConfig())
            target = build_seg_target(ri, frame)
            fg = target.classes >= 1
            assert not np.any(fg & target.missing)
            np.testing.assert_array_equal(fg | target.missing, target.valid)

    def test_never_assigns_unlabeled_class(self, rng):
        pts, ped, veh = scene_with_boxes()
        frame = make_frame(pts, [veh], labeled=frozenset({1}))
        ri = project(frame.points, ProjectionConfig())
        target = build_seg_target(ri, frame)
        assert set(np.unique(target.classes)) <= {0, 1}

    def test_multibox_pixel_takes_nearest_center(self):
        a = Box7(8.0, 0.0, -0.5, 2.0, 2.0, 2.0, 0.0, class_id=1)
        b = Box7(8.6, 0.0, -0.5, 2.0, 2.0, 2.0, 0.0, class_id=2)
        frame = make_frame([[8.5, 0.0, -0.5, 0.0]], [a, b])
        ri = project(frame.points, ProjectionConfig())
        target = build_seg_target(ri, frame)
        assert target.classes[ri.valid][0] == 2  # b's center is nearer


class TestPixelFeatures:
    def test_constant_range_image_has_zero_variance(self):
        pts = [[10.0, 0.0, 0.0, 0.0], [10.0, 0.5, 0.0, 0.0], [10.0, -0.5, 0.0, 0.0]]
        # equalize ranges exactly
        pts = [[math.sqrt(100 - p[1] ** 2), p[1], 0.0, 0.0] for p in pts]
        ri = project(np.asarray(pts), ProjectionConfig(height=3, width=16, inclination_span=(-0.1, 0.1)))
        var = local_range_variance(ri)
        assert np.allclose(var[ri.valid], 0.0, atol=1e-12)

    def test_invalid_pixel_gets_zero_features_except_bias(self):
        ri = project(np.zeros((0, 4)), ProjectionConfig(height=2, width=2))
        feats = pixel_features(ri)
        np.testing.assert_array_equal(feats[..., :4], 0.0)
        np.testing.assert_array_equal(feats[..., 4], 1.0)

    def test_variance_matches_two_pass_oracle(self, rng):
        n = 400
        pts = np.column_stack(
            [rng.uniform(4, 14, n), rng.uniform(-8, 8, n), rng.uniform(-2.0, -0.1, n), np.zeros(n)]
        )
        ri = project(pts, ProjectionConfig(height=8, width=32))
        var = local_range_variance(ri)
        h, w = ri.rng.shape
        for r in range(h):
            for c in range(w):
                vals = []
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and ri.valid[rr, cc]:
                            vals.append(ri.rng[rr, cc])
                if len(vals) >= 2:
                    mean = sum(vals) / len(vals)
                    expected = sum((x - mean) ** 2 for x in vals) / len(vals)
                else:
                    expected = 0.0
                assert var[r, c] == pytest.approx(expected, abs=1e-9)

    def test_feature_arity_and_finiteness(self, rng):
        n = 200
        pts = np.column_stack(
            [rng.uniform(4, 14, n), rng.uniform(-8, 8, n), rng.uniform(-2, 0, n), rng.uniform(0, 1, n)]
        )
        feats = pixel_features(project(pts, ProjectionConfig()))
        assert feats.shape[-1] == 5
        assert np.isfinite(feats).all()
