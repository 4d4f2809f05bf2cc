import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeseg.metrics import (
    FLOODNET_CLASSES,
    ClassSet,
    ConfusionMatrix,
    MetricsReport,
    accumulate_confusion,
    argmax_mask,
    iou_per_class,
    mean_iou,
    pixel_accuracy,
)

from oracles import iou_by_sets, mean_defined

K3 = ClassSet.generic(3)


def confusion(pred, gt, classes=K3):
    return accumulate_confusion(ConfusionMatrix.zeros(classes.K), np.asarray(pred), np.asarray(gt), classes)


class TestClassSet:
    def test_default_is_floodnet(self):
        cs = ClassSet()
        assert cs.K == 9 and cs.names[0] == "building-flooded" and cs.names[-1] == "grass"

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            ClassSet(("a", "b", "a"))

    def test_ignore_collision(self):
        with pytest.raises(ValueError, match="collides"):
            ClassSet(("a", "b", "c"), ignore_label=2)


class TestArgmax:
    def test_one_hot(self):
        logits = np.zeros((1, 4, 2, 2))
        logits[0, 2] = 5
        assert np.all(argmax_mask(logits) == 2)

    def test_ties_go_to_zero(self):
        assert not argmax_mask(np.ones((1, 5, 3, 3))).any()

    def test_shift_invariance(self, rng):
        logits = rng.standard_normal((2, 4, 5, 5))
        shift = rng.standard_normal((2, 1, 5, 5)) * 10
        np.testing.assert_array_equal(argmax_mask(logits), argmax_mask(logits + shift))


class TestConfusion:
    def test_perfect_is_diagonal(self, rng):
        gt = rng.integers(0, 3, size=(2, 6, 6))
        cm = confusion(gt, gt)
        assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
        assert cm.total == gt.size

    def test_ignore_everywhere(self, rng):
        gt = np.full((4, 4), 255)
        cm = confusion(rng.integers(0, 3, size=(4, 4)), gt)
        assert cm.total == 0

    def test_shifted_square(self):
        gt = np.zeros((4, 4), int)
        gt[1:3, 1:3] = 1
        pred = np.zeros((4, 4), int)
        pred[1:3, 2:4] = 1
        cm = confusion(pred, gt)
        assert (cm.tp[1], cm.fp[1], cm.fn[1]) == (2, 2, 2)
        assert iou_per_class(cm)[1] == pytest.approx(1 / 3)

    def test_does_not_mutate(self):
        cm = ConfusionMatrix.zeros(3)
        accumulate_confusion(cm, np.zeros((2, 2), int), np.zeros((2, 2), int), K3)
        assert cm.total == 0

    def test_out_of_range_reports_pixel(self):
        gt = np.zeros((3, 3), int)
        gt[1, 2] = 7
        with pytest.raises(ValueError, match=r"\(1, 2\)"):
            confusion(np.zeros((3, 3), int), gt)

    def test_bad_prediction(self):
        with pytest.raises(ValueError, match="predicted"):
            confusion(np.full((2, 2), 3), np.zeros((2, 2), int))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            confusion(np.zeros((2, 2), int), np.zeros((2, 3), int))

    def test_merge(self, rng):
        a, b = rng.integers(0, 3, size=(2, 2, 5, 5))
        assert np.array_equal((confusion(a, b) + confusion(b, a)).counts, confusion(a, b).counts + confusion(a, b).counts.T)


class TestIoU:
    def test_absent_class_is_undefined(self):
        cm = confusion(np.zeros((2, 2), int), np.zeros((2, 2), int))
        ious = iou_per_class(cm)
        assert ious[0] == 1.0 and np.isnan(ious[1]) and np.isnan(ious[2])
        assert mean_iou(cm) == 1.0
        assert mean_iou(cm, include_undefined_as_zero=True) == pytest.approx(1 / 3)

    def test_table_iv_mean(self):
        ious = [43.5, 59.3, 21.2, 61.2, 73.3, 64.9, 15.1, 32.7, 82.8]
        assert mean_iou(np.array(ious) / 100) * 100 == pytest.approx(50.44, abs=0.01)

    def test_permutation_invariant(self, rng):
        pred, gt = rng.integers(0, 3, size=(2, 6, 6))
        perm = np.array([2, 0, 1])
        assert mean_iou(confusion(perm[pred], perm[gt])) == pytest.approx(mean_iou(confusion(pred, gt)))

    def test_nothing_defined(self):
        with pytest.raises(ValueError):
            mean_iou(np.array([np.nan, np.nan]))


class TestPixelAccuracy:
    def test_perfect(self, rng):
        gt = rng.integers(0, 3, size=(5, 5))
        assert pixel_accuracy(confusion(gt, gt))[0] == 1.0

    def test_three_of_four(self):
        cs = ClassSet.generic(2)
        glob, per_class = pixel_accuracy(confusion([[0, 1], [1, 1]], [[0, 1], [0, 1]], cs))
        assert glob == 0.75
        np.testing.assert_allclose(per_class, [0.5, 1.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            pixel_accuracy(ConfusionMatrix.zeros(3))

    def test_joint_permutation(self, rng):
        counts = rng.integers(0, 20, size=(4, 4))
        perm = rng.permutation(4)
        a = pixel_accuracy(ConfusionMatrix(counts))[0]
        b = pixel_accuracy(ConfusionMatrix(counts[perm][:, perm]))[0]
        assert a == b


class TestReport:
    def test_json(self):
        gt = np.array([[0, 1], [2, 2]])
        pred = np.array([[0, 1], [2, 0]])
        rep = MetricsReport.from_confusion(confusion(pred, gt), K3)
        doc = json.loads(rep.to_json())
        assert doc["pixel_accuracy"] == 0.75
        assert [c["name"] for c in doc["per_class"]] == list(K3.names)
        assert "mIoU" in rep.table()

    def test_undefined_serializes_as_null(self):
        rep = MetricsReport.from_confusion(confusion(np.zeros((2, 2), int), np.zeros((2, 2), int)), K3)
        doc = rep.to_dict()
        assert doc["per_class"][1]["iou"] is None and doc["per_class"][1]["defined"] is False


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_matrix_iou_equals_set_counting(seed):
    rng = np.random.default_rng(seed)
    classes = ClassSet.generic(5)
    gt = rng.integers(0, 5, size=(16, 16))
    gt[rng.random((16, 16)) < 0.1] = 255
    pred = rng.integers(0, 5, size=(16, 16))
    cm = confusion(pred, gt, classes)
    ref = iou_by_sets(pred, gt, 5)
    got = iou_per_class(cm)
    for r, g in zip(ref, got):
        assert (r is None and np.isnan(g)) or r == g
    assert mean_iou(cm) == mean_defined(ref)


def test_floodnet_names_order():
    assert FLOODNET_CLASSES[4] == "water" and FLOODNET_CLASSES[7] == "pool"
