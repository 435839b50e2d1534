import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tafe.errors import DataError
from tafe.metrics import ConfusionMatrix, confusion

PRED = np.array([[0, 1], [1, 1]])
GT = np.array([[0, 0], [1, 1]])


def test_two_by_two_fixture():
    cm = confusion(PRED, GT, 2)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]

    per_class_iou, miou = cm.miou()
    assert per_class_iou == [pytest.approx(1 / 2, abs=1e-12), pytest.approx(2 / 3, abs=1e-12)]
    assert abs(miou - 7 / 12) < 1e-12

    per_class_dice, mdice = cm.mdice()
    assert per_class_dice == [pytest.approx(2 / 3, abs=1e-12), pytest.approx(4 / 5, abs=1e-12)]
    assert abs(mdice - 11 / 15) < 1e-12


def test_matching_pixels_land_on_the_diagonal():
    mask = np.full((2, 5), 2)
    cm = confusion(mask, mask, 4)
    assert cm.counts[2, 2] == 10
    assert cm.counts.sum() == 10


def test_perfect_prediction_scores_one(rng):
    gt = rng.integers(0, 4, size=(16, 16))
    cm = confusion(gt, gt, 4)
    assert cm.miou()[1] == 1.0
    assert cm.mdice()[1] == 1.0


def test_disjoint_prediction_scores_zero_for_that_class():
    gt = np.array([[1, 1], [0, 0]])
    pred = np.zeros_like(gt)
    per_class, _ = confusion(pred, gt, 3).miou()
    assert per_class[1] == 0.0


def test_absent_classes_are_excluded_from_the_mean():
    gt = np.array([[0, 0], [1, 1]])
    cm = confusion(gt, gt, 4)
    per_class, miou = cm.miou()
    assert per_class[2:] == [None, None]
    assert cm.absent_classes() == [2, 3]
    assert miou == 1.0


def test_constant_background_prediction(rng):
    gt = np.zeros((8, 8), dtype=np.int64)
    gt[1:4, 1:4] = 1
    gt[5, :] = 2
    per_class, _ = confusion(np.zeros_like(gt), gt, 3).miou()
    assert per_class[1] == 0.0 and per_class[2] == 0.0
    assert 0.0 < per_class[0] < 1.0


def test_accumulation_order_does_not_matter(rng):
    a = rng.integers(0, 4, size=(2, 6, 6)), rng.integers(0, 4, size=(2, 6, 6))
    b = rng.integers(0, 4, size=(3, 5)), rng.integers(0, 4, size=(3, 5))
    ab = ConfusionMatrix(4).accumulate(*a).accumulate(*b)
    ba = ConfusionMatrix(4).accumulate(*b).accumulate(*a)
    np.testing.assert_array_equal(ab.counts, ba.counts)
    np.testing.assert_array_equal(ab.counts, confusion(*a, 4).merge(confusion(*b, 4)).counts)
    assert ab.total == 72 + 15


def test_reduce_sums_per_image_matrices(rng):
    images = [(rng.integers(0, 3, size=(4, 4)), rng.integers(0, 3, size=(4, 4))) for _ in range(5)]
    total = ConfusionMatrix.reduce([confusion(p, g, 3) for p, g in images], 3)
    stacked = confusion(np.stack([p for p, _ in images]), np.stack([g for _, g in images]), 3)
    np.testing.assert_array_equal(total.counts, stacked.counts)
    assert total.total == 5 * 16


def test_accumulate_leaves_the_original_untouched():
    cm = ConfusionMatrix(2)
    cm.accumulate(PRED, GT)
    assert cm.total == 0


def test_dice_iou_identity_on_random_matrices():
    rng = np.random.default_rng(11)
    for _ in range(100):
        cm = ConfusionMatrix(5, rng.integers(0, 50, size=(5, 5)))
        ious, _ = cm.miou()
        dices, _ = cm.mdice()
        for iou, dice in zip(ious, dices):
            if iou is None:
                assert dice is None
            else:
                assert abs(dice - 2 * iou / (1 + iou)) < 1e-12


def test_pixel_duplication_keeps_scores(rng):
    pred = rng.integers(0, 3, size=(6, 7))
    gt = rng.integers(0, 3, size=(6, 7))

    def upscale(x):
        return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)

    small = confusion(pred, gt, 3)
    large = confusion(upscale(pred), upscale(gt), 3)
    assert large.total == 4 * small.total
    assert large.miou() == small.miou()
    assert large.mdice() == small.mdice()


def test_breaking_a_correct_pixel_never_raises_iou(rng):
    gt = rng.integers(0, 3, size=(8, 8))
    pred = gt.copy()
    pred[rng.random(gt.shape) < 0.3] = 0
    before, _ = confusion(pred, gt, 3).miou()

    i, j = np.argwhere(pred == gt)[0]
    wrong = (gt[i, j] + 1) % 3
    pred[i, j] = wrong
    after, _ = confusion(pred, gt, 3).miou()
    for k in (gt[i, j], wrong):
        assert after[k] <= before[k]


def test_all_absent_is_undefined():
    cm = ConfusionMatrix(3)
    with pytest.raises(DataError):
        cm.miou()
    with pytest.raises(DataError):
        cm.mdice()


def test_bad_inputs_are_data_errors():
    with pytest.raises(DataError):
        confusion(np.array([[0, 3]]), np.array([[0, 1]]), 3)
    with pytest.raises(DataError):
        confusion(np.array([[0, -1]]), np.array([[0, 1]]), 3)
    with pytest.raises(DataError):
        confusion(np.array([[0, 1]]), np.array([[0], [1]]), 3)
    with pytest.raises(DataError):
        confusion(np.array([[0.5, 1.0]]), np.array([[0, 1]]), 3)
    with pytest.raises(DataError):
        ConfusionMatrix(2, np.array([[1, -1], [0, 0]]))


@settings(max_examples=50, deadline=None)
@given(counts=arrays(np.int64, (4, 4), elements=st.integers(min_value=0, max_value=1000)))
def test_scores_lie_in_unit_interval(counts):
    cm = ConfusionMatrix(4, counts)
    if not cm.total:
        return
    ious, miou = cm.miou()
    dices, mdice = cm.mdice()
    assert 0.0 <= miou <= mdice <= 1.0
    assert all(iou <= dice for iou, dice in zip(ious, dices) if iou is not None)
