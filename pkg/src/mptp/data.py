"""Manifest ingestion, image/mask loading, deterministic batching and synthetic sets."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .text_encoder import validate_caption

MANIFEST_COLUMNS = ("image_path", "caption", "mask_path")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    line: int
    image_path: Path
    caption: str
    mask_path: Path | None = None


@dataclass
class SampleManifest:
    path: Path
    rows: list[ManifestRow]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def has_masks(self) -> bool:
        return all(r.mask_path is not None for r in self.rows)


@dataclass
class Sample:
    image: torch.Tensor  # (1, 3, H, W) in [0, 1]
    caption: str
    mask: torch.Tensor | None = None  # (1, 1, H, W) in {0, 1}
    name: str = ""


@dataclass
class Batch:
    images: torch.Tensor
    captions: list[str]
    masks: torch.Tensor | None
    indices: list[int]


def load_manifest(path, require_masks: bool = False) -> SampleManifest:
    """Read and validate a ``image_path,caption,mask_path`` CSV manifest.

    Relative paths resolve against the manifest's directory. All problems are
    collected and reported together.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"manifest {path} is empty")
        missing = [c for c in MANIFEST_COLUMNS[:2] if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"manifest {path} lacks column(s) {missing}; header is {reader.fieldnames}")
        raw = list(reader)
    if not raw:
        raise ManifestError(f"manifest {path} has a header but no rows")

    rows, problems = [], []
    for i, rec in enumerate(raw, start=2):
        image = (rec.get("image_path") or "").strip()
        caption = rec.get("caption") or ""
        mask = (rec.get("mask_path") or "").strip()
        errs = []
        image_path = base / image if image else None
        if image_path is None or not image_path.is_file():
            errs.append(f"image {image!r} not found")
        if not caption.strip():
            errs.append("empty caption")
        mask_path = base / mask if mask else None
        if mask_path is None and require_masks:
            errs.append("missing mask_path")
        elif mask_path is not None and not mask_path.is_file():
            errs.append(f"mask {mask!r} not found")
        if errs:
            problems.append(f"line {i}: " + "; ".join(errs))
        else:
            rows.append(ManifestRow(i, image_path, caption.strip(), mask_path))
    if problems:
        raise ManifestError(f"invalid rows in {path}:\n  " + "\n  ".join(problems))
    return SampleManifest(path, rows)


def load_sample(row: ManifestRow, size: tuple[int, int] = (224, 224)) -> Sample:
    """Bilinear-resize the image to ``size`` (H, W); nearest-resize and binarize the mask at >127."""
    h, w = size
    try:
        with Image.open(row.image_path) as im:
            if im.width == 0 or im.height == 0:
                raise ManifestError(f"zero-size image {row.image_path}")
            im = im.convert("RGB").resize((w, h), Image.BILINEAR)
            img = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise ManifestError(f"cannot read image {row.image_path}: {exc}") from exc
    image = torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0).contiguous()
    mask = None
    if row.mask_path is not None:
        try:
            with Image.open(row.mask_path) as m:
                m = m.convert("L").resize((w, h), Image.NEAREST)
                mask = torch.from_numpy(binarize(np.asarray(m))).float()[None, None]
        except OSError as exc:
            raise ManifestError(f"cannot read mask {row.mask_path}: {exc}") from exc
    return Sample(image, validate_caption(row.caption), mask, row.image_path.name)


def binarize(mask: np.ndarray) -> np.ndarray:
    """8-bit or already-binary mask -> {0, 1}. Idempotent."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask.astype(np.uint8)
    if mask.max(initial=0) <= 1:
        return (mask > 0).astype(np.uint8)
    return (mask > 127).astype(np.uint8)


def load_samples(manifest: SampleManifest, size: tuple[int, int], num_workers: int = 0) -> list[Sample]:
    if num_workers > 0:
        with ThreadPoolExecutor(num_workers) as pool:
            return list(pool.map(lambda r: load_sample(r, size), manifest.rows))
    return [load_sample(r, size) for r in manifest.rows]


def batch_indices(n: int, batch_size: int, seed: int, epoch: int, train: bool = True) -> list[list[int]]:
    """Training: shuffled by ``(seed, epoch)``, partial tail dropped. Eval: in order, tail kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if train:
        if batch_size < 2:
            raise ValueError("training batches need batch_size >= 2 for batch norm")
        order = np.random.default_rng([seed, epoch]).permutation(n)
        n_full = n // batch_size
        return [order[i * batch_size:(i + 1) * batch_size].tolist() for i in range(n_full)]
    return [list(range(i, min(i + batch_size, n))) for i in range(0, n, batch_size)]


def collate(samples: Sequence[Sample], indices: list[int]) -> Batch:
    chosen = [samples[i] for i in indices]
    masks = None
    if all(s.mask is not None for s in chosen):
        masks = torch.cat([s.mask for s in chosen])
    return Batch(torch.cat([s.image for s in chosen]), [s.caption for s in chosen], masks, indices)


def batch_iter(samples: Sequence[Sample], batch_size: int, seed: int = 0, epoch: int = 0,
               train: bool = True) -> Iterator[Batch]:
    for idx in batch_indices(len(samples), batch_size, seed, epoch, train):
        yield collate(samples, idx)


_POSITIONS = {
    "upper left": (0.25, 0.25),
    "upper right": (0.25, 0.75),
    "lower left": (0.75, 0.25),
    "lower right": (0.75, 0.75),
    "center": (0.5, 0.5),
}


def make_synthetic_shapes(n: int = 8, size: int = 64, seed: int = 0) -> list[Sample]:
    """Bright squares and disks on a noisy dark background, with position captions.

    Sample ``i`` draws a ``("square", "disk")[i % 2]`` at the ``i % 5``-th of
    five named positions, jittered slightly.
    """
    rng = np.random.default_rng(seed)
    names = list(_POSITIONS)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = []
    for i in range(n):
        shape = ("square", "disk")[i % 2]
        where = names[i % len(names)]
        cy, cx = _POSITIONS[where]
        cy = cy * size + rng.uniform(-0.04, 0.04) * size
        cx = cx * size + rng.uniform(-0.04, 0.04) * size
        r = rng.uniform(0.12, 0.18) * size
        if shape == "square":
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        bg = rng.uniform(0.05, 0.25, size=3)
        fg = rng.uniform(0.7, 0.95, size=3)
        img = np.where(mask[..., None], fg, bg) + rng.normal(0, 0.03, size=(size, size, 3))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        out.append(Sample(
            image=torch.from_numpy(img).permute(2, 0, 1)[None].contiguous(),
            caption=f"{shape} in {where}",
            mask=torch.from_numpy(mask.astype(np.float32))[None, None],
            name=f"synthetic_{i:03d}",
        ))
    return out


def write_dataset(samples: Sequence[Sample], directory) -> Path:
    """Write samples as PNGs plus a ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for i, s in enumerate(samples):
            stem = s.name or f"sample_{i:03d}"
            img = (s.image[0].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
            Image.fromarray(img).save(directory / "images" / f"{stem}.png")
            mask_rel = ""
            if s.mask is not None:
                save_mask(s.mask[0, 0], directory / "masks" / f"{stem}.png")
                mask_rel = f"masks/{stem}.png"
            writer.writerow([f"images/{stem}.png", s.caption, mask_rel])
    return manifest


def save_mask(mask, path) -> None:
    """Binary mask (H, W) -> 8-bit PNG with values 0/255."""
    arr = np.asarray(mask.detach().cpu() if hasattr(mask, "detach") else mask)
    Image.fromarray((arr > 0.5).astype(np.uint8) * 255).save(path)
