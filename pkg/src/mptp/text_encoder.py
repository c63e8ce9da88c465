"""Caption embedding front end and the four-level 1-D convolution text pyramid."""

from __future__ import annotations

import hashlib
import logging
import re
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

EMBED_DIM = 768
MAX_CAPTION_CHARS = 64

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def validate_caption(caption: str) -> str:
    if not isinstance(caption, str):
        raise TypeError(f"caption must be str, got {type(caption).__name__}")
    text = caption.strip()
    if not text:
        raise ValueError("caption is empty after whitespace trimming")
    if len(text) > MAX_CAPTION_CHARS:
        logger.warning("caption exceeds %d characters: %r", MAX_CAPTION_CHARS, text)
    return text


def _bucket(token: str, n_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    # bucket 0 is reserved for padding
    return 1 + int.from_bytes(digest, "little") % (n_buckets - 1)


class ToyEmbedder(nn.Module):
    """Deterministic hash-bucket word embedder with no external assets.

    Words (and punctuation) are lower-cased, hashed into ``n_buckets - 1``
    buckets and looked up in a fixed random table. Row 0 is the all-zero pad
    vector. The table is a buffer, so no optimizer can ever touch it.
    """

    def __init__(self, text_len: int = 32, n_buckets: int = 512, seed: int = 0):
        super().__init__()
        if text_len < 1:
            raise ValueError("text_len must be positive")
        self.text_len = text_len
        self.n_buckets = n_buckets
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(n_buckets, EMBED_DIM, generator=gen)
        table[0] = 0.0
        self.register_buffer("table", table)

    def token_ids(self, caption: str) -> list[int]:
        tokens = _TOKEN_RE.findall(validate_caption(caption).lower())
        if len(tokens) > self.text_len:
            logger.info("caption truncated from %d to %d tokens", len(tokens), self.text_len)
            tokens = tokens[: self.text_len]
        ids = [_bucket(t, self.n_buckets) for t in tokens]
        return ids + [0] * (self.text_len - len(ids))

    def forward(self, captions: Sequence[str]) -> torch.Tensor:
        ids = torch.tensor([self.token_ids(c) for c in captions], dtype=torch.long,
                           device=self.table.device)
        return self.table[ids]


class PretrainedEmbedder(nn.Module):
    """Frozen BERT-style encoder loaded from a local directory.

    The language model is held outside the module tree, so it never appears
    in ``parameters()`` or ``state_dict()``; checkpoints stay small and no
    training loop can update it.
    """

    def __init__(self, asset_dir: str | Path, text_len: int = 32):
        super().__init__()
        asset_dir = Path(asset_dir) if asset_dir else None
        if asset_dir is None or not asset_dir.is_dir():
            raise ConfigurationError(f"embedder asset directory not found: {asset_dir}")
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ConfigurationError("the pretrained embedder needs `transformers`") from exc
        try:
            tokenizer = AutoTokenizer.from_pretrained(str(asset_dir))
            lm = AutoModel.from_pretrained(str(asset_dir))
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot load embedder assets from {asset_dir}: {exc}") from exc
        if lm.config.hidden_size != EMBED_DIM:
            raise ConfigurationError(
                f"embedder hidden size {lm.config.hidden_size} != {EMBED_DIM}")
        lm.eval()
        lm.requires_grad_(False)
        self.text_len = text_len
        self.__dict__["tokenizer"] = tokenizer
        self.__dict__["lm"] = lm

    def train(self, mode: bool = True):
        super().train(mode)
        self.lm.eval()
        return self

    @torch.no_grad()
    def forward(self, captions: Sequence[str]) -> torch.Tensor:
        texts = [validate_caption(c) for c in captions]
        for text, ids in zip(texts, self.tokenizer(texts)["input_ids"]):
            if len(ids) > self.text_len:
                logger.info("caption %r truncated to %d tokens", text, self.text_len)
        enc = self.tokenizer(texts, padding="max_length", truncation=True,
                             max_length=self.text_len, return_tensors="pt")
        return self.lm(**enc).last_hidden_state.float()


class TextPyramid(nn.Module):
    """Pointwise Conv1d stack 768 -> D4 -> D3 -> D2 -> D1.

    Input and every output level are laid out ``(B, L, channels)``. Level 4 is
    computed first; the result is returned as ``[x_text1, x_text2, x_text3, x_text4]``.
    """

    def __init__(self, base_dim: int = 64, in_dim: int = EMBED_DIM):
        super().__init__()
        widths = [base_dim * m for m in (1, 2, 4, 8)]
        self.widths = tuple(widths)
        self.in_dim = in_dim
        self.conv4 = nn.Conv1d(in_dim, widths[3], kernel_size=1)
        self.conv3 = nn.Conv1d(widths[3], widths[2], kernel_size=1)
        self.conv2 = nn.Conv1d(widths[2], widths[1], kernel_size=1)
        self.conv1 = nn.Conv1d(widths[1], widths[0], kernel_size=1)

    def forward(self, x_text: torch.Tensor) -> list[torch.Tensor]:
        if x_text.ndim != 3 or x_text.shape[-1] != self.in_dim:
            raise ValueError(f"expected (B, L, {self.in_dim}) text embeddings, got {tuple(x_text.shape)}")
        h4 = self.conv4(x_text.transpose(1, 2))
        h3 = self.conv3(h4)
        h2 = self.conv2(h3)
        h1 = self.conv1(h2)
        return [h.transpose(1, 2) for h in (h1, h2, h3, h4)]


class TextEncoder(nn.Module):
    """Caption strings -> text pyramid."""

    def __init__(self, base_dim: int = 64, text_len: int = 32, embedder: str = "toy",
                 embedder_dir: str | Path | None = None, toy_seed: int = 0):
        super().__init__()
        self.text_len = text_len
        if embedder == "toy":
            self.embedder = ToyEmbedder(text_len=text_len, seed=toy_seed)
        elif embedder == "pretrained":
            self.embedder = PretrainedEmbedder(embedder_dir, text_len=text_len)
        else:
            raise ConfigurationError(f"unknown embedder {embedder!r}; use 'toy' or 'pretrained'")
        self.pyramid = TextPyramid(base_dim)

    def embed(self, captions: Sequence[str]) -> torch.Tensor:
        if isinstance(captions, str):
            captions = [captions]
        with torch.no_grad():
            return self.embedder(list(captions))

    def forward(self, captions: Sequence[str]) -> list[torch.Tensor]:
        x = self.embed(captions).to(self.pyramid.conv4.weight.dtype)
        return self.pyramid(x)


def embed_caption(caption: str, text_len: int = 32, embedder: nn.Module | None = None) -> torch.Tensor:
    """Embed a single caption to a ``(1, text_len, 768)`` tensor."""
    if embedder is None:
        embedder = ToyEmbedder(text_len=text_len)
    if embedder.text_len != text_len:
        raise ConfigurationError(f"embedder text_len {embedder.text_len} != {text_len}")
    with torch.no_grad():
        return embedder([caption])
