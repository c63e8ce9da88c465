"""Pooled-descriptor gating decoder that turns MSFF outputs into a mask."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ShapeError
from .ppe import ConvBN2d


def pooled_descriptor(x: torch.Tensor) -> torch.Tensor:
    """GAP(x) + GMP(x) as a ``(B, C, 1, 1)`` tensor."""
    return F.adaptive_avg_pool2d(x, 1) + F.adaptive_max_pool2d(x, 1)


class UpAttention(nn.Module):
    """Refine ``fine`` with a gate built from itself and the upsampled ``coarse`` map.

    Steps: upsample coarse to fine's size; broadcast GAP+GMP of fine; concat
    ``[fine, up, descriptor]``; pointwise linear + ReLU gives a ``fine``-shaped
    gate; multiply into fine; concat with ``up`` and reduce with two ConvBNs.
    Set ``gated=False`` to drop the gate (ablation): only the last step runs.
    """

    def __init__(self, fine_ch: int, coarse_ch: int, out_ch: int, gated: bool = True):
        super().__init__()
        self.fine_ch = fine_ch
        self.coarse_ch = coarse_ch
        self.gated = gated
        self.gate = nn.Conv2d(2 * fine_ch + coarse_ch, fine_ch, kernel_size=1) if gated else None
        self.fuse = nn.Sequential(ConvBN2d(fine_ch + coarse_ch, out_ch), ConvBN2d(out_ch, out_ch))

    def _check(self, fine, coarse):
        if fine.shape[1] != self.fine_ch or coarse.shape[1] != self.coarse_ch:
            raise ShapeError(
                f"channels {fine.shape[1]}/{coarse.shape[1]} != {self.fine_ch}/{self.coarse_ch}")
        if (coarse.shape[2] * 2, coarse.shape[3] * 2) != tuple(fine.shape[2:]):
            raise ShapeError(
                f"coarse {tuple(coarse.shape[2:])} is not half of fine {tuple(fine.shape[2:])}")

    def refine(self, fine: torch.Tensor, up: torch.Tensor) -> torch.Tensor:
        desc = pooled_descriptor(fine).expand_as(fine)
        gate = F.relu(self.gate(torch.cat([fine, up, desc], dim=1)))
        return gate * fine

    def forward(self, fine: torch.Tensor, coarse: torch.Tensor) -> torch.Tensor:
        self._check(fine, coarse)
        up = F.interpolate(coarse, size=fine.shape[-2:], mode="bilinear", align_corners=False)
        refined = self.refine(fine, up) if self.gated else fine
        return self.fuse(torch.cat([refined, up], dim=1))


class UpAttentionCascade(nn.Module):
    """``[t1, t2, t3]`` -> mask probabilities ``(B, 1, H, W)``."""

    def __init__(self, base_channels: int, gated: bool = True):
        super().__init__()
        c = base_channels
        self.inner = UpAttention(6 * c, 12 * c, 6 * c, gated=gated)
        self.outer = UpAttention(3 * c, 6 * c, 3 * c, gated=gated)
        self.head = nn.Conv2d(3 * c, 1, kernel_size=1)

    def logits(self, feats: list[torch.Tensor]) -> torch.Tensor:
        t1, t2, t3 = feats
        return self.head(self.outer(t1, self.inner(t2, t3)))

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        return torch.sigmoid(self.logits(feats))
