import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbd_fusion.metrics import GREEN, NEUTRAL, RED, ConfusionMatrix, MetricError, error_map


def brute_force(pred, gt, k):
    """Per-pixel loop count of TP, FP and FN; IoU over classes seen in gt or pred."""
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    correct = total = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g == 255:
            continue
        total += 1
        if p == g:
            tp[g] += 1
            correct += 1
        else:
            fp[p] += 1
            fn[g] += 1
    ious = [tp[c] / (tp[c] + fp[c] + fn[c]) if tp[c] + fp[c] + fn[c] else None for c in range(k)]
    seen = [v for v in ious if v is not None]
    return ious, sum(seen) / len(seen), correct / total


def test_hand_counted_case():
    cm = ConfusionMatrix(2).update(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    iou = cm.iou()
    assert iou[0] == 1 / 2 and iou[1] == 2 / 3
    assert cm.miou() == pytest.approx(7 / 12, abs=1e-15)


def test_perfect_and_fully_wrong():
    gt = np.array([[0, 1], [1, 0]])
    assert ConfusionMatrix(2).update(gt, gt).miou() == 1.0
    assert np.all(ConfusionMatrix(2).update(1 - gt, gt).iou() == 0.0)


def test_absent_classes_are_excluded():
    cm = ConfusionMatrix(4).update(np.array([0, 0, 1]), np.array([0, 0, 1]))
    assert np.isnan(cm.iou()[2]) and np.isnan(cm.iou()[3])
    assert cm.miou() == 1.0
    assert cm.summary()["iou"][3] is None


def test_random_cases_agree_with_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(100):
        k = int(rng.integers(1, 6))
        shape = tuple(rng.integers(1, 7, size=2))
        gt = rng.integers(0, k, size=shape)
        gt[rng.random(shape) < 0.2] = 255
        if np.all(gt == 255):
            gt.flat[0] = 0
        pred = rng.integers(0, k, size=shape)
        cm = ConfusionMatrix(k).update(pred, gt)
        ious, miou, acc = brute_force(pred, gt, k)
        assert [None if np.isnan(v) else v for v in cm.iou()] == ious
        assert cm.miou() == pytest.approx(miou, rel=1e-15)
        assert cm.pixel_accuracy() == acc
        assert cm.total == int(np.sum(gt != 255))


@given(st.integers(0, 2 ** 31 - 1))
def test_miou_bounds(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, size=(4, 4))
    pred = rng.integers(0, 3, size=(4, 4))
    assert 0.0 <= ConfusionMatrix(3).update(pred, gt).miou() <= 1.0


def test_single_class_present_matches_pixel_accuracy():
    gt = np.zeros((3, 3), dtype=int)
    pred = gt.copy()
    cm = ConfusionMatrix(3).update(pred, gt)
    assert cm.miou() == cm.pixel_accuracy() == 1.0


def test_metric_errors():
    with pytest.raises(MetricError):
        ConfusionMatrix(2).update(np.zeros(3), np.zeros(4))
    with pytest.raises(MetricError):
        ConfusionMatrix(2).update(np.array([2]), np.array([0]))
    with pytest.raises(MetricError):
        ConfusionMatrix(2).miou()


def test_error_map_neutral_and_green():
    gt = np.array([[0, 1], [2, 255]])
    assert np.all(error_map(gt, gt, gt) == 0)
    wrong = np.where(gt == 255, 0, (gt + 1) % 3)
    m = error_map(wrong, gt, gt)
    labelled = gt != 255
    assert np.all(m[labelled] == GREEN)
    assert np.all(m[~labelled] == NEUTRAL)
    assert m.dtype == np.uint8 and m.shape == (2, 2, 3)


def test_error_map_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        gt = rng.integers(0, 3, size=(5, 6))
        gt[rng.random(gt.shape) < 0.2] = 255
        a, b = rng.integers(0, 3, size=gt.shape), rng.integers(0, 3, size=gt.shape)
        m = error_map(a, b, gt)
        red = green = 0
        for i in range(5):
            for j in range(6):
                if gt[i, j] == 255:
                    continue
                if b[i, j] != gt[i, j]:
                    red += 1
                elif a[i, j] != gt[i, j]:
                    green += 1
        assert np.sum(np.all(m == RED, axis=-1)) == red
        assert np.sum(np.all(m == GREEN, axis=-1)) == green
    with pytest.raises(MetricError):
        error_map(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))
