"""Confusion-count metrics for binary masks.

Zero-denominator convention: a ratio whose denominator is 0 is 1 when
prediction and target are both empty (nothing to find, nothing found) and 0
otherwise. For mIoU this reduces to "an absent class scores 1".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("dice", "miou", "acc", "precision", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask.detach().cpu() if hasattr(mask, "detach") else mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} mask is not binary (values outside {{0, 1}})")
    return arr.astype(bool)


def confusion(pred, target) -> ConfusionCounts:
    p = _as_binary(pred, "pred")
    t = _as_binary(target, "target")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def _both_empty(c: ConfusionCounts) -> bool:
    return c.tp + c.fp + c.fn == 0


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty mask is undefined")
    return (c.tp + c.tn) / c.total


def miou(c: ConfusionCounts) -> float:
    fg = _ratio(c.tp, c.tp + c.fp + c.fn, True)
    bg = _ratio(c.tn, c.tn + c.fn + c.fp, True)
    return 0.5 * (fg + bg)


def dice_from_counts(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, _both_empty(c))


def dice_score(pred, target) -> float:
    """2|X∩Y| / (|X| + |Y|); symmetric in its arguments."""
    return dice_from_counts(confusion(pred, target))


def precision_recall(c: ConfusionCounts) -> tuple[float, float]:
    empty = _both_empty(c)
    return _ratio(c.tp, c.tp + c.fp, empty), _ratio(c.tp, c.tp + c.fn, empty)


def all_metrics(pred, target) -> dict[str, float]:
    c = confusion(pred, target)
    precision, recall = precision_recall(c)
    return {
        "dice": dice_from_counts(c),
        "miou": miou(c),
        "acc": accuracy(c),
        "precision": precision,
        "recall": recall,
    }


def per_image_metrics(preds, targets) -> list[dict[str, float]]:
    """One metrics dict per leading-axis item."""
    preds = np.asarray(preds.detach().cpu() if hasattr(preds, "detach") else preds)
    targets = np.asarray(targets.detach().cpu() if hasattr(targets, "detach") else targets)
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    return [all_metrics(p, t) for p, t in zip(preds, targets)]


def macro_average(rows: list[dict[str, float]]) -> dict[str, float]:
    if not rows:
        raise ValueError("no rows to average")
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
