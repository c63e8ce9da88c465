"""Input checks shared by the estimators, in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .text_encoder import validate_caption


def _to_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def check_images(X, image_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Return a float32 ``(n, 3, H, W)`` tensor in [0, 1].

    Accepts channels-first or channels-last arrays; ``uint8`` input is scaled by 1/255.
    """
    arr = _to_numpy(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-D image batch, got shape {arr.shape}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.shape[1] != 3:
        raise ValueError(f"expected 3 colour channels, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty image batch")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError("images contain NaN or inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("float images must lie in [0, 1]")
    if image_size is not None and tuple(arr.shape[2:]) != tuple(image_size):
        raise ValueError(f"image size {tuple(arr.shape[2:])} != configured {tuple(image_size)}")
    return torch.from_numpy(np.ascontiguousarray(arr))


def check_masks(y, n_samples: int | None = None, image_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Return a float32 ``(n, 1, H, W)`` tensor of {0, 1}; 0/255 masks are binarized at 127."""
    arr = _to_numpy(y)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"expected masks shaped (n, H, W) or (n, 1, H, W), got {arr.shape}")
    if arr.dtype == np.uint8 and arr.max(initial=0) > 1:
        arr = arr > 127
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"masks must be binary, found values {vals[:8]}")
    if n_samples is not None and arr.shape[0] != n_samples:
        raise ValueError(f"{arr.shape[0]} masks for {n_samples} images")
    if image_size is not None and tuple(arr.shape[2:]) != tuple(image_size):
        raise ValueError(f"mask size {tuple(arr.shape[2:])} != image size {tuple(image_size)}")
    return torch.from_numpy(arr.astype(np.float32))


def check_captions(captions, n_samples: int) -> list[str]:
    if captions is None:
        raise ValueError("captions are required: the model is text-conditioned")
    if isinstance(captions, str):
        captions = [captions] * n_samples
    captions = list(captions)
    if len(captions) != n_samples:
        raise ValueError(f"{len(captions)} captions for {n_samples} images")
    return [validate_caption(c) for c in captions]


def as_pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    v = tuple(int(x) for x in v)
    if len(v) != 2:
        raise ValueError(f"expected an int or (H, W), got {v}")
    return v


def as_triple(v: Sequence, name: str) -> tuple:
    v = tuple(v)
    if len(v) != 3:
        raise ValueError(f"{name} needs three entries, got {v}")
    return v
