"""Multiscale feature fusion via patch merging/expanding and cross-scale concatenation."""

from __future__ import annotations

import torch
import torch.nn as nn

from .exceptions import ShapeError

# (row, col) offsets of the four stride-2 slices, in concatenation order
MERGE_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


def slice_concat(x: torch.Tensor) -> torch.Tensor:
    """``(B, H, W, C)`` channels-last -> ``(B, H/2, W/2, 4C)`` by 2x2 slicing."""
    h, w = x.shape[1], x.shape[2]
    if h % 2 or w % 2:
        raise ShapeError(f"patch merging needs even H and W, got {(h, w)}")
    return torch.cat([x[:, dr::2, dc::2, :] for dr, dc in MERGE_OFFSETS], dim=-1)


def rearrange_expand(x: torch.Tensor) -> torch.Tensor:
    """``(B, H, W, 4c)`` -> ``(B, 2H, 2W, c)``; channel index ``(p1*2 + p2)*c + k``
    lands at spatial offset ``(p1, p2)`` within each output 2x2 block."""
    b, h, w, ch = x.shape
    if ch % 4:
        raise ShapeError(f"cannot split {ch} channels into a 2x2 block")
    c = ch // 4
    x = x.reshape(b, h, w, 2, 2, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, 2 * h, 2 * w, c)


class PatchMerging(nn.Module):
    """``(B, C, H, W)`` -> ``(B, 2C, H/2, W/2)``"""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.norm = nn.LayerNorm(4 * channels)
        self.reduction = nn.Linear(4 * channels, 2 * channels, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}")
        x = slice_concat(x.permute(0, 2, 3, 1))
        x = self.reduction(self.norm(x))
        return x.permute(0, 3, 1, 2).contiguous()


class PatchExpanding(nn.Module):
    """``(B, C, H, W)`` -> ``(B, C/2, 2H, 2W)``.

    Linear C -> 2C and layer norm first, then the 2C channels are spread over
    a 2x2 spatial block. Expanding before the rearrange keeps the net C -> C/2
    contract the fused group shapes depend on.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"patch expanding needs an even channel count, got {channels}")
        self.channels = channels
        self.expand = nn.Linear(channels, 2 * channels, bias=False)
        self.norm = nn.LayerNorm(2 * channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}")
        x = self.norm(self.expand(x.permute(0, 2, 3, 1)))
        return rearrange_expand(x).permute(0, 3, 1, 2).contiguous()


class MSFF(nn.Module):
    """Single-scale pyramid ``[y1, y2, y3]`` -> multiscale ``[t1, t2, t3]`` (3C, 6C, 12C).

    Six independent blocks: ``merge[0]`` C->2C and ``merge[1]`` 2C->4C build
    group 1, ``expand[0]`` 2C->C and ``merge[2]`` 2C->4C build group 2,
    ``expand[1]`` 4C->2C and ``expand[2]`` 2C->C build group 3.
    """

    def __init__(self, base_channels: int):
        super().__init__()
        c = base_channels
        self.base_channels = c
        self.merge = nn.ModuleList([PatchMerging(c), PatchMerging(2 * c), PatchMerging(2 * c)])
        self.expand = nn.ModuleList([PatchExpanding(2 * c), PatchExpanding(4 * c), PatchExpanding(2 * c)])

    def build_groups(self, pyr: list[torch.Tensor]) -> list[list[torch.Tensor]]:
        y1, y2, y3 = pyr
        c = self.base_channels
        b, _, h, w = y1.shape
        expected = [(b, c, h, w), (b, 2 * c, h // 2, w // 2), (b, 4 * c, h // 4, w // 4)]
        for i, (y, shape) in enumerate(zip(pyr, expected)):
            if tuple(y.shape) != shape:
                raise ShapeError(f"pyramid level {i + 1} is {tuple(y.shape)}, expected {shape}")
        m1 = self.merge[0](y1)
        group1 = [y1, m1, self.merge[1](m1)]
        group2 = [self.expand[0](y2), y2, self.merge[2](y2)]
        e3 = self.expand[1](y3)
        group3 = [self.expand[2](e3), e3, y3]
        return [group1, group2, group3]

    @staticmethod
    def fuse_groups(groups: list[list[torch.Tensor]]) -> list[torch.Tensor]:
        if len(groups) != 3 or any(len(g) != 3 for g in groups):
            raise ShapeError("fuse_groups needs three groups of three maps")
        out = []
        for scale in range(3):
            maps = [g[scale] for g in groups]
            if len({tuple(m.shape) for m in maps}) != 1:
                raise ShapeError(f"scale {scale} maps differ: {[tuple(m.shape) for m in maps]}")
            out.append(torch.cat(maps, dim=1))
        return out

    def forward(self, pyr: list[torch.Tensor]) -> list[torch.Tensor]:
        return self.fuse_groups(self.build_groups(pyr))


class ChannelMatch(nn.Module):
    """Stand-in for MSFF when it is ablated: 1x1 convs C->3C, 2C->6C, 4C->12C."""

    def __init__(self, base_channels: int):
        super().__init__()
        c = base_channels
        self.proj = nn.ModuleList([nn.Conv2d(m * c, 3 * m * c, 1) for m in (1, 2, 4)])

    def forward(self, pyr: list[torch.Tensor]) -> list[torch.Tensor]:
        return [p(y) for p, y in zip(self.proj, pyr)]
