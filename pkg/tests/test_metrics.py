import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mptp.metrics import (ConfusionCounts, accuracy, all_metrics, confusion, dice_score,
                          macro_average, miou, per_image_metrics)


def oracle(pred, target):
    """Pixel-by-pixel reference with explicit loops."""
    tp = fp = fn = tn = 0
    for p, t in zip(pred.ravel().tolist(), target.ravel().tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    empty = tp + fp + fn == 0

    def r(a, b):
        return a / b if b else (1.0 if empty else 0.0)

    fg = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    bg = tn / (tn + fp + fn) if tn + fp + fn else 1.0
    return {"dice": r(2 * tp, 2 * tp + fp + fn), "miou": (fg + bg) / 2,
            "acc": (tp + tn) / (tp + fp + fn + tn), "precision": r(tp, tp + fp), "recall": r(tp, tp + fn)}


def test_worked_example():
    # TP=4 FP=2 FN=2 TN=8
    pred = np.array([1] * 4 + [1] * 2 + [0] * 2 + [0] * 8)
    target = np.array([1] * 4 + [0] * 2 + [1] * 2 + [0] * 8)
    c = confusion(pred, target)
    assert c == ConfusionCounts(4, 2, 2, 8)
    m = all_metrics(pred, target)
    assert m["acc"] == pytest.approx(0.75)
    assert m["miou"] == pytest.approx(0.583333, abs=1e-5)
    assert m["dice"] == pytest.approx(2 / 3)


def test_edge_cases():
    z = np.zeros((8, 8), np.uint8)
    o = np.ones((8, 8), np.uint8)
    assert all_metrics(z, z) == {"dice": 1.0, "miou": 1.0, "acc": 1.0, "precision": 1.0, "recall": 1.0}
    assert all_metrics(o, o)["miou"] == 1.0
    a = np.zeros((8, 8), np.uint8)
    a[:4] = 1
    m = all_metrics(a, 1 - a)
    assert m["dice"] == 0.0 and m["acc"] == 0.0 and m["precision"] == 0.0 and m["recall"] == 0.0
    assert all_metrics(z, a)["precision"] == 0.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.uint8, (8, 8), elements=st.integers(0, 1)), arrays(np.uint8, (8, 8), elements=st.integers(0, 1)))
def test_matches_oracle(p, t):
    got, want = all_metrics(p, t), oracle(p, t)
    for k in want:
        assert abs(got[k] - want[k]) < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (6, 6), elements=st.integers(0, 1)), arrays(np.uint8, (6, 6), elements=st.integers(0, 1)))
def test_dice_symmetric_and_bounded(p, t):
    d = dice_score(p, t)
    assert d == dice_score(t, p)
    assert 0.0 <= d <= 1.0
    c = confusion(p, t)
    assert 0.0 <= miou(c) <= 1.0 and 0.0 <= accuracy(c) <= 1.0


def test_rejects_non_binary_and_mismatch():
    with pytest.raises(ValueError):
        confusion(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError):
        confusion(np.zeros(3), np.zeros(4))


def test_macro_average():
    rows = per_image_metrics(np.stack([np.ones((2, 2)), np.zeros((2, 2))]).astype(np.uint8),
                             np.stack([np.ones((2, 2)), np.ones((2, 2))]).astype(np.uint8))
    assert macro_average(rows)["dice"] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        macro_average([])
