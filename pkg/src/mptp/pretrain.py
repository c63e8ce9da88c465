"""Siamese stop-gradient pretraining of the prompt encoder on image-caption pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, NonFiniteLossError
from .ppe import PpeConfig, PriorPromptEncoder
from .text_encoder import TextEncoder

AUGMENTATIONS = ("brightness-jitter", "contrast-jitter", "gaussian-noise", "gaussian-blur", "grayscale-mix")
# geometric ops would break captions that name positions ("lesion in upper left")
FORBIDDEN_AUGMENTATIONS = ("flip", "crop")


@dataclass(frozen=True)
class AugOp:
    name: str
    p: float
    magnitude: float


def _default_ops():
    return (
        AugOp("brightness-jitter", 0.8, 0.4),
        AugOp("contrast-jitter", 0.8, 0.4),
        AugOp("gaussian-noise", 0.5, 0.05),
        AugOp("gaussian-blur", 0.5, 1.5),
        AugOp("grayscale-mix", 0.2, 1.0),
    )


@dataclass
class AugmentationPolicy:
    """Photometric-only augmentation; any flip or crop op is rejected."""

    ops: tuple = field(default_factory=_default_ops)
    rng_seed: int = 0

    def __post_init__(self):
        ops = []
        for op in self.ops:
            if isinstance(op, dict):
                op = AugOp(**op)
            elif isinstance(op, (list, tuple)):
                op = AugOp(*op)
            name = op.name.lower()
            if any(bad in name for bad in FORBIDDEN_AUGMENTATIONS):
                raise ConfigurationError(
                    f"augmentation {op.name!r} is not allowed: flips and crops destroy "
                    "positional information carried by the captions")
            if name not in AUGMENTATIONS:
                raise ConfigurationError(f"unknown augmentation {op.name!r}; choose from {AUGMENTATIONS}")
            if not 0.0 <= op.p <= 1.0 or op.magnitude < 0:
                raise ConfigurationError(f"bad probability/magnitude in {op}")
            ops.append(AugOp(name, float(op.p), float(op.magnitude)))
        self.ops = tuple(ops)

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "AugmentationPolicy":
        return cls(tuple(AugOp(n, 0.0, 0.0) for n in AUGMENTATIONS), rng_seed)

    def to_dict(self) -> dict:
        return {"rng_seed": self.rng_seed,
                "ops": [{"name": o.name, "p": o.p, "magnitude": o.magnitude} for o in self.ops]}


def _gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, min(int(math.ceil(2 * sigma)), (min(img.shape[-2:]) - 1) // 2))
    xs = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    k = k / k.sum()
    c = img.shape[0]
    x = F.pad(img[None], (radius, radius, radius, radius), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x[0]


def augment(x: torch.Tensor, policy: AugmentationPolicy, gen: torch.Generator) -> torch.Tensor:
    """One random photometric view of a ``(B, 3, H, W)`` batch in [0, 1].

    Every op draws its random numbers whether or not it fires, so the stream
    position depends only on the policy, not on earlier coin flips.
    """
    b = x.shape[0]
    out = x
    for op in policy.ops:
        fire = torch.rand(b, generator=gen) < op.p
        u = torch.rand(b, generator=gen)
        m = op.magnitude
        if op.name == "brightness-jitter":
            aug = out + ((2 * u - 1) * m).view(b, 1, 1, 1)
        elif op.name == "contrast-jitter":
            mean = out.mean(dim=(1, 2, 3), keepdim=True)
            aug = mean + (out - mean) * (1 + (2 * u - 1) * m).view(b, 1, 1, 1)
        elif op.name == "gaussian-noise":
            aug = out + torch.randn(out.shape, generator=gen) * m
        elif op.name == "gaussian-blur":
            sigmas = 0.1 + u * max(m - 0.1, 0.0)
            aug = torch.stack([_gaussian_blur(img, float(s)) if f and m > 0 else img
                               for img, s, f in zip(out, sigmas, fire)])
        else:  # grayscale-mix
            gray = (0.299 * out[:, 0] + 0.587 * out[:, 1] + 0.114 * out[:, 2]).unsqueeze(1)
            alpha = (u * m).clamp(0, 1).view(b, 1, 1, 1)
            aug = (1 - alpha) * out + alpha * gray
        out = torch.where(fire.view(b, 1, 1, 1), aug.clamp(0.0, 1.0), out)
    return out


def augment_pair(x: torch.Tensor, policy: AugmentationPolicy, index: int = 0):
    """Two independent views; deterministic in ``(policy.rng_seed, index)``."""
    seed = int(np.random.SeedSequence([policy.rng_seed, index]).generate_state(1)[0])
    gen = torch.Generator().manual_seed(seed)
    return augment(x, policy, gen), augment(x, policy, gen)


class ProjectionHead(nn.Module):
    """GAP each pyramid level, concatenate (C + 2C + 4C), 2-layer MLP to ``out_dim``."""

    def __init__(self, in_dim: int, out_dim: int = 256, hidden_dim: int | None = None):
        super().__init__()
        hidden_dim = hidden_dim or out_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim), nn.BatchNorm1d(hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, out_dim),
        )

    @staticmethod
    def pool(pyr: list[torch.Tensor]) -> torch.Tensor:
        return torch.cat([y.mean(dim=(2, 3)) for y in pyr], dim=1)

    def forward(self, pyr: list[torch.Tensor]) -> torch.Tensor:
        return self.net(self.pool(pyr))


class Predictor(nn.Module):
    def __init__(self, dim: int = 256):
        super().__init__()
        bottleneck = max(1, dim // 4)
        self.net = nn.Sequential(
            nn.Linear(dim, bottleneck), nn.BatchNorm1d(bottleneck), nn.ReLU(),
            nn.Linear(bottleneck, dim),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


def neg_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """-mean cos(p, z) with ``z`` treated as a constant."""
    return -F.cosine_similarity(p, z.detach(), dim=1, eps=1e-8).mean()


class SiameseNet(nn.Module):
    def __init__(self, ppe_config: PpeConfig | None = None, proj_dim: int = 256,
                 embedder: str = "toy", embedder_dir=None, toy_seed: int = 0):
        super().__init__()
        cfg = ppe_config or PpeConfig()
        self.text_encoder = TextEncoder(cfg.embed_dims[0], cfg.text_len, embedder, embedder_dir, toy_seed)
        self.ppe = PriorPromptEncoder(cfg)
        self.projector = ProjectionHead(7 * cfg.base_channels, proj_dim)
        self.predictor = Predictor(proj_dim)

    def pyramid(self, x: torch.Tensor, captions) -> list[torch.Tensor]:
        x_text1 = self.text_encoder(captions)[0].to(x.dtype)
        return self.ppe(x, x_text1)

    def encode(self, x: torch.Tensor, captions) -> torch.Tensor:
        return self.projector(self.pyramid(x, captions))

    def forward(self, x1: torch.Tensor, x2: torch.Tensor, captions) -> dict[str, torch.Tensor]:
        # both views share the same caption
        y1 = self.encode(x1, captions)
        y2 = self.encode(x2, captions)
        p1 = self.predictor(y1)
        p2 = self.predictor(y2)
        loss = neg_cosine(p1, y2) + neg_cosine(p2, y1)
        return {"loss": loss, "y1": y1, "y2": y2, "p1": p1, "p2": p2}


def representation_std(y: torch.Tensor) -> float:
    """Mean over dimensions of the batch std of L2-normalised vectors (0 = collapse)."""
    return float(F.normalize(y.detach(), dim=1).std(dim=0).mean())


def parameter_norms(model: nn.Module) -> dict[str, float]:
    return {n: float(p.detach().norm()) for n, p in model.named_parameters()}


@dataclass
class StepResult:
    loss: float
    rep_std: float


def stage1_step(model: SiameseNet, images: torch.Tensor, captions, optimizer: torch.optim.Optimizer,
                policy: AugmentationPolicy, index: int) -> StepResult:
    model.train()
    v1, v2 = augment_pair(images, policy, index)
    out = model(v1, v2, captions)
    loss = out["loss"]
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite stage-1 loss at step {index}: {loss.item()}",
                                 parameter_norms(model))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepResult(float(loss.detach()), representation_std(out["y1"]))
