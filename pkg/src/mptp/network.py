"""The stage-2 segmentation network: text encoder -> PPE -> MSFF -> UpAttention cascade."""

from __future__ import annotations

import torch
import torch.nn as nn

from .msff import MSFF, ChannelMatch
from .ppe import PpeConfig, PriorPromptEncoder
from .text_encoder import TextEncoder
from .upattention import UpAttentionCascade

# parameter-name prefixes inherited from a stage-1 checkpoint
INHERITED_PREFIXES = ("ppe.", "text_encoder.")


class SegmentationNet(nn.Module):
    def __init__(self, ppe_config: PpeConfig | None = None, embedder: str = "toy", embedder_dir=None,
                 toy_seed: int = 0, use_msff: bool = True, use_upattention: bool = True):
        super().__init__()
        cfg = ppe_config or PpeConfig()
        c = cfg.base_channels
        self.text_encoder = TextEncoder(cfg.embed_dims[0], cfg.text_len, embedder, embedder_dir, toy_seed)
        self.ppe = PriorPromptEncoder(cfg)
        self.msff = MSFF(c) if use_msff else ChannelMatch(c)
        self.upattention = UpAttentionCascade(c, gated=use_upattention)

    def logits(self, images: torch.Tensor, captions) -> torch.Tensor:
        if isinstance(captions, str):
            captions = [captions] * images.shape[0]
        x_text1 = self.text_encoder(captions)[0].to(images.dtype)
        pyr = self.ppe(images, x_text1)
        return self.upattention.logits(self.msff(pyr))

    def forward(self, images: torch.Tensor, captions) -> torch.Tensor:
        return torch.sigmoid(self.logits(images, captions))

    def encoder_modules(self) -> list[nn.Module]:
        return [self.text_encoder, self.ppe]
