"""Pixel-weighted BCE, the weighted Dice loss and their 0.5/0.5 combination."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LossConfig:
    w1: float = 0.5
    w2: float = 0.5
    smooth: float = 1e-12
    prob_clamp_eps: float = 1e-7
    canonical_dice: bool = False

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.smooth <= 0:
            raise ValueError("smooth must be positive")
        if not 0 < self.prob_clamp_eps < 0.5:
            raise ValueError("prob_clamp_eps must be in (0, 0.5)")


def _check(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    if pred.ndim < 2:
        raise ValueError("expected a batch dimension")


def bce_map(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Per-pixel binary cross entropy with probabilities clamped to ``[eps, 1-eps]``."""
    _check(pred, target)
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def _per_sample_sum(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).sum(dim=1)


def wbce(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """BCE averaged separately over foreground and background pixels.

    Computed per sample and then averaged over the batch. When a sample has
    no positive (or no negative) pixels, that term contributes 0.
    """
    cfg = cfg or LossConfig()
    loss = bce_map(pred, target, cfg.prob_clamp_eps)
    pos = target
    neg = 1.0 - target
    pos_sum = _per_sample_sum(pos)
    neg_sum = _per_sample_sum(neg)
    pos_term = _per_sample_sum(pos * loss) / pos_sum.clamp_min(1.0)
    neg_term = _per_sample_sum(neg * loss) / neg_sum.clamp_min(1.0)
    pos_term = torch.where(pos_sum > 0, pos_term, torch.zeros_like(pos_term))
    neg_term = torch.where(neg_sum > 0, neg_term, torch.zeros_like(neg_term))
    return (cfg.w1 * pos_term + cfg.w2 * neg_term).mean()


def wdice(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """``1 - mean_b (w1*w2*sum(p*y) + s) / (w1*sum(p^2) + w2*sum(y^2) + s)``.

    With w1 = w2 = 0.5 a perfect binary prediction scores a ratio of 0.25, so
    the loss bottoms out at 0.75. ``cfg.canonical_dice`` switches to the usual
    ``(2*sum(p*y) + s) / (sum(p^2) + sum(y^2) + s)``.
    """
    cfg = cfg or LossConfig()
    _check(pred, target)
    inter = _per_sample_sum(pred * target)
    p2 = _per_sample_sum(pred * pred)
    y2 = _per_sample_sum(target * target)
    if cfg.canonical_dice:
        ratio = (2.0 * inter + cfg.smooth) / (p2 + y2 + cfg.smooth)
    else:
        ratio = (cfg.w1 * cfg.w2 * inter + cfg.smooth) / (cfg.w1 * p2 + cfg.w2 * y2 + cfg.smooth)
    return 1.0 - ratio.mean()


def total_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return 0.5 * wbce(pred, target, cfg) + 0.5 * wdice(pred, target, cfg)

