"""Dataset splitting and pseudo-label merging tests."""

from __future__ import annotations

import numpy as np
import pytest

from scs_lab.geometry import Box7, DetBox, Frame
from scs_lab.labels import (
    GROUND_TRUTH,
    PSEUDO,
    ensemble_boxes,
    ensemble_pixel,
    mask_to_single_class,
    merge_box_pseudo,
    merge_pixel_pseudo,
    split_dataset,
)
from scs_lab.rangeimage import SegTarget


def full_frame(n_vehicles=2, n_peds=1):
    boxes = [
        Box7(5.0 + 6 * i, 0.0, -1.4, 4.0, 2.0, 1.1, 0.0, class_id=1) for i in range(n_vehicles)
    ] + [Box7(0.0, 6.0 + 3 * i, -0.4, 0.7, 0.7, 0.9, 0.0, class_id=2) for i in range(n_peds)]
    return Frame(
        frame_id=0,
        points=np.zeros((1, 4)),
        boxes=tuple(boxes),
        labeled_classes=frozenset({1, 2}),
    )


def toy_target(classes, missing, labeled=frozenset({2}), num_classes=2):
    classes = np.asarray(classes, dtype=np.int64)
    missing = np.asarray(missing, dtype=bool)
    return SegTarget(
        classes=classes,
        missing=missing,
        untrusted=missing.copy(),
        valid=np.ones_like(missing, dtype=bool),
        labeled_classes=labeled,
        num_classes=num_classes,
    )


class TestMaskToSingleClass:
    def test_keeps_requested_class(self):
        out = mask_to_single_class(full_frame(), 1)
        assert len(out.boxes) == 2
        assert out.labeled_classes == frozenset({1})
        assert all(b.class_id == 1 for b in out.boxes)

    def test_labeled_and_absent_is_not_unlabeled(self):
        out = mask_to_single_class(full_frame(n_peds=0), 2)
        assert out.boxes == ()
        assert out.labeled_classes == frozenset({2})

    def test_idempotent(self):
        once = mask_to_single_class(full_frame(), 1)
        twice = mask_to_single_class(once, 1)
        assert once == twice

    def test_points_untouched(self):
        frame = full_frame()
        np.testing.assert_array_equal(mask_to_single_class(frame, 1).points, frame.points)


class TestSplitDataset:
    def test_90_10_sizes(self):
        frames = [full_frame() for _ in range(100)]
        vehicle, ped = split_dataset(frames, 0.9, seed=7)
        assert (len(vehicle), len(ped)) == (90, 10)
        assert all(f.labeled_classes == frozenset({1}) for f in vehicle)
        assert all(f.labeled_classes == frozenset({2}) for f in ped)

    def test_same_seed_same_split(self):
        frames = [
            Frame(i, np.zeros((1, 4)), (), frozenset({1, 2})) for i in range(40)
        ]
        a = split_dataset(frames, 0.5, seed=3)
        b = split_dataset(frames, 0.5, seed=3)
        assert [f.frame_id for f in a[0]] == [f.frame_id for f in b[0]]
        assert [f.frame_id for f in a[1]] == [f.frame_id for f in b[1]]

    def test_union_is_original_id_set(self):
        frames = [
            Frame(i, np.zeros((1, 4)), (), frozenset({1, 2})) for i in range(23)
        ]
        vehicle, ped = split_dataset(frames, 0.4, seed=1)
        ids = {f.frame_id for f in vehicle} | {f.frame_id for f in ped}
        assert ids == set(range(23))
        assert len(vehicle) + len(ped) == 23

    def test_empty_subset_rejected(self):
        frames = [full_frame() for _ in range(3)]
        with pytest.raises(ValueError):
            split_dataset(frames, 0.05, seed=0)


class TestMergePixelPseudo:
    def test_confident_pseudo_assignment(self):
        target = toy_target([[0]], [[True]])
        probs = np.array([[[0.05, 0.95, 0.0]]])  # restricted max on vehicle
        out = merge_pixel_pseudo(target, probs, frozenset({2}), tau_pixel=0.9)
        assert out.classes[0, 0] == 1
        assert not out.untrusted[0, 0]
        assert out.missing[0, 0]  # bookkeeping preserved

    def test_low_confidence_stays_untrusted_background(self):
        target = toy_target([[0]], [[True]])
        probs = np.array([[[0.6, 0.3, 0.1]]])
        out = merge_pixel_pseudo(target, probs, frozenset({2}), tau_pixel=0.9)
        assert out.classes[0, 0] == 0
        assert out.untrusted[0, 0]

    def test_ground_truth_pixels_unchanged(self, rng):
        for _ in range(20):
            classes = np.array([[2, 0], [0, 2]])
            missing = classes == 0
            target = toy_target(classes, missing)
            probs = rng.dirichlet(np.ones(3), size=(2, 2))
            out = merge_pixel_pseudo(target, probs, frozenset({2}), tau_pixel=0.7)
            np.testing.assert_array_equal(out.classes[~missing], classes[~missing])
            np.testing.assert_array_equal(out.missing, target.missing)

    def test_pseudo_classes_restricted_to_unlabeled(self, rng):
        for _ in range(20):
            target = toy_target([[0, 0, 0]], [[True, True, True]], labeled=frozenset({1}))
            probs = rng.dirichlet(np.ones(3), size=(1, 3))
            out = merge_pixel_pseudo(target, probs, frozenset({1}), tau_pixel=0.5)
            assert set(np.unique(out.classes)) <= {0, 2}

    def test_tie_breaks_toward_background(self):
        target = toy_target([[0]], [[True]])
        probs = np.array([[[0.5, 0.0, 0.5]]])
        out = merge_pixel_pseudo(target, probs, frozenset({1}), tau_pixel=0.4)
        assert out.classes[0, 0] == 0

    def test_tau_monotonicity(self, rng):
        target = toy_target([[0] * 8], [[True] * 8])
        probs = rng.dirichlet(np.ones(3), size=(1, 8))
        counts = []
        for tau in (0.3, 0.5, 0.7, 0.9, 0.99):
            out = merge_pixel_pseudo(target, probs, frozenset({2}), tau_pixel=tau)
            counts.append(int(out.untrusted.sum()))
        assert counts == sorted(counts)

    def test_unnormalized_probs_rejected(self):
        target = toy_target([[0]], [[True]])
        with pytest.raises(ValueError):
            merge_pixel_pseudo(target, np.array([[[0.5, 0.2, 0.2]]]), frozenset({2}), 0.9)


class TestMergeBoxPseudo:
    def frame(self):
        return mask_to_single_class(full_frame(), 1)  # vehicle labeled, ped not

    def det(self, class_id, score):
        return DetBox(Box7(1.0, 1.0, -0.5, 0.7, 0.7, 0.9, 0.0, class_id=class_id), score)

    def test_confident_unlabeled_det_included(self):
        out = merge_box_pseudo(self.frame(), [self.det(2, 0.8)], tau_bbox=0.7)
        assert len(out.boxes[2]) == 1
        assert out.boxes[2][0].provenance == PSEUDO

    def test_labeled_class_det_discarded_gt_kept(self):
        frame = self.frame()
        out = merge_box_pseudo(frame, [self.det(1, 0.99)], tau_bbox=0.7)
        assert [pb.box for pb in out.boxes[1]] == list(frame.boxes)
        assert all(pb.provenance == GROUND_TRUTH for pb in out.boxes[1])

    def test_low_score_dropped(self):
        out = merge_box_pseudo(self.frame(), [self.det(2, 0.5)], tau_bbox=0.7)
        assert out.boxes[2] == ()

    def test_tau_monotonicity(self, rng):
        dets = [self.det(2, float(s)) for s in rng.uniform(0, 1, 20)]
        sizes = [len(merge_box_pseudo(self.frame(), dets, tau).boxes[2]) for tau in (0.2, 0.5, 0.8)]
        assert sizes == sorted(sizes, reverse=True)


class TestEnsemble:
    def test_pixel_mean(self):
        out = ensemble_pixel(np.array([[0.6, 0.4]]), np.array([[0.8, 0.2]]))
        np.testing.assert_allclose(out, [[0.7, 0.3]])

    def test_identical_inputs_fixed_point(self, rng):
        p = rng.dirichlet(np.ones(3), size=(4,))
        np.testing.assert_allclose(ensemble_pixel(p, p), p)

    def test_output_normalized(self, rng):
        a = rng.dirichlet(np.ones(3), size=(5, 7))
        b = rng.dirichlet(np.ones(3), size=(5, 7))
        out = ensemble_pixel(a, b)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_boxes_disjoint_union(self):
        a = DetBox(Box7(0, 0, 0, 1, 1, 1, 0.0, 1), 0.9)
        b = DetBox(Box7(10, 0, 0, 1, 1, 1, 0.0, 1), 0.8)
        assert ensemble_boxes([a], [b], 0.5) == [a, b]

    def test_duplicate_keeps_higher_score(self):
        box = Box7(0, 0, 0, 1, 1, 1, 0.0, 1)
        out = ensemble_boxes([DetBox(box, 0.6)], [DetBox(box, 0.9)], 0.5)
        assert out == [DetBox(box, 0.9)]

    def test_result_pairwise_below_threshold(self, rng):
        from conftest import random_detbox

        t = [random_detbox(rng) for _ in range(8)]
        s = [random_detbox(rng) for _ in range(8)]
        from scs_lab.geometry import bev_iou

        out = ensemble_boxes(t, s, 0.3)
        for i, x in enumerate(out):
            for y in out[i + 1 :]:
                assert bev_iou(x.box, y.box) < 0.3
