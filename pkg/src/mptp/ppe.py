"""Prior prompt encoder: CNN image pyramid fused with text in a 3-level U-shaped ViT."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class PpeConfig:
    base_channels: int = 64
    image_size: tuple[int, int] = (224, 224)
    patch_sizes: tuple[int, int, int] = (16, 8, 4)
    embed_dims: tuple[int, int, int] = (64, 128, 256)
    num_heads: tuple[int, int, int] = (2, 4, 8)
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    text_len: int = 32
    use_downvit: bool = True
    use_upvit: bool = True
    normalize_input: bool = False  # per-channel ImageNet mean/std before the image branch

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.patch_sizes = tuple(int(v) for v in self.patch_sizes)
        self.embed_dims = tuple(int(v) for v in self.embed_dims)
        self.num_heads = tuple(int(v) for v in self.num_heads)
        self.validate()

    @property
    def token_grid(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // self.patch_sizes[0], w // self.patch_sizes[0]

    @property
    def n_tokens(self) -> int:
        gh, gw = self.token_grid
        return gh * gw

    def validate(self):
        h, w = self.image_size
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be positive")
        if h % 16 or w % 16 or h <= 0 or w <= 0:
            raise ConfigurationError(f"image_size {self.image_size} must be positive multiples of 16")
        if len(self.patch_sizes) != 3 or len(self.embed_dims) != 3 or len(self.num_heads) != 3:
            raise ConfigurationError("patch_sizes, embed_dims and num_heads need exactly 3 entries")
        grids = set()
        for level, p in enumerate(self.patch_sizes):
            scale = 2 ** level
            if p < 1 or (h // scale) % p or (w // scale) % p:
                raise ConfigurationError(
                    f"patch size {p} does not tile level-{level + 1} map {(h // scale, w // scale)}")
            grids.add(((h // scale) // p, (w // scale) // p))
        if len(grids) != 1:
            raise ConfigurationError(
                f"patch sizes {self.patch_sizes} give unequal token grids {sorted(grids)}")
        for d, nh in zip(self.embed_dims, self.num_heads):
            if nh < 1 or d % nh:
                raise ConfigurationError(f"embed dim {d} not divisible by {nh} heads")
        if self.text_len < 1:
            raise ConfigurationError("text_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class ConvBN2d(nn.Sequential):
    """ReLU(BN(Conv2d))"""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
        )


class ConvBN1d(nn.Module):
    """ReLU(BN(Conv1d)) over token sequences laid out ``(B, N, D)``."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv = nn.Conv1d(in_dim, out_dim, kernel_size=1)
        self.bn = nn.BatchNorm1d(out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x.transpose(1, 2)))).transpose(1, 2)


class DownBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(ConvBN2d(in_ch, out_ch), nn.MaxPool2d(2))


class ImageBranch(nn.Module):
    def __init__(self, base_channels: int):
        super().__init__()
        c = base_channels
        self.conv = ConvBN2d(3, c)
        self.down1 = DownBlock(c, 2 * c)
        self.down2 = DownBlock(2 * c, 4 * c)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"spatial size {tuple(x.shape[2:])} not divisible by 4")
        x1 = self.conv(x)
        x2 = self.down1(x1)
        x3 = self.down2(x2)
        return [x1, x2, x3]


class PatchEmbedding(nn.Module):
    def __init__(self, in_ch: int, dim: int, patch_size: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x).flatten(2).transpose(1, 2)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj = nn.Linear(dim, dim)
        self.proj_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (self.attn_drop(attn) @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj_drop(self.proj(out))
        if return_attention:
            return out, attn
        return out


class TransformerBlock(nn.Module):
    """Pre-norm MSA residual followed by pre-norm MLP residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout),
            nn.Linear(hidden, dim), nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DownViT1(nn.Module):
    """Patch-embed X1, add the sequence-aligned text level 1, run one block.

    The text goes through a ConvBN over channels and then a learned linear map
    along the sequence axis (text_len -> n_tokens) so it can be added to the
    patch tokens.
    """

    def __init__(self, in_ch: int, dim: int, patch_size: int, text_len: int, n_tokens: int,
                 num_heads: int, mlp_ratio: float, dropout: float, use_transformer: bool = True):
        super().__init__()
        self.text_len = text_len
        self.use_transformer = use_transformer
        self.patch_embed = PatchEmbedding(in_ch, dim, patch_size)
        self.text_conv = ConvBN1d(dim, dim)
        self.text_align = nn.Linear(text_len, n_tokens)
        self.block = TransformerBlock(dim, num_heads, mlp_ratio, dropout)

    def forward(self, x1: torch.Tensor, x_text1: torch.Tensor) -> torch.Tensor:
        if x_text1.shape[1] != self.text_len:
            raise ConfigurationError(
                f"text length {x_text1.shape[1]} does not match configured text_len {self.text_len}")
        xp = self.patch_embed(x1)
        t = self.text_conv(x_text1)
        t = self.text_align(t.transpose(1, 2)).transpose(1, 2)
        if t.shape != xp.shape:
            raise ConfigurationError(f"aligned text {tuple(t.shape)} != patches {tuple(xp.shape)}")
        y = xp + t
        return self.block(y) if self.use_transformer else y


class DownViTNext(nn.Module):
    def __init__(self, in_ch: int, dim: int, prev_dim: int, patch_size: int, num_heads: int,
                 mlp_ratio: float, dropout: float, use_transformer: bool = True):
        super().__init__()
        self.use_transformer = use_transformer
        self.patch_embed = PatchEmbedding(in_ch, dim, patch_size)
        self.block = TransformerBlock(dim, num_heads, mlp_ratio, dropout)
        self.conv = ConvBN1d(dim, dim)
        self.project = ConvBN1d(dim + prev_dim, dim)

    def forward(self, x: torch.Tensor, y_prev: torch.Tensor) -> torch.Tensor:
        xp = self.patch_embed(x)
        if xp.shape[1] != y_prev.shape[1]:
            raise ShapeError(f"{xp.shape[1]} patches vs {y_prev.shape[1]} tokens from previous level")
        if not self.use_transformer:
            return xp
        y = self.conv(self.block(xp))
        return self.project(torch.cat([y, y_prev], dim=-1))


class UpViT(nn.Module):
    """Transformer on the skip tokens plus a ConvBN-projected lower level.

    With ``below_dim=None`` this is the bottom UpViT: transformer only.
    """

    def __init__(self, dim: int, below_dim: int | None, num_heads: int, mlp_ratio: float,
                 dropout: float):
        super().__init__()
        self.block = TransformerBlock(dim, num_heads, mlp_ratio, dropout)
        self.conv = ConvBN1d(below_dim, dim) if below_dim is not None else None

    def forward(self, y: torch.Tensor, y_below: torch.Tensor | None = None) -> torch.Tensor:
        y = self.block(y)
        if self.conv is None:
            return y
        if y_below is None or y_below.shape[1] != y.shape[1]:
            raise ShapeError("UpViT needs a lower-level sequence with the same token count")
        return y + self.conv(y_below)


class SingleScaleFusion(nn.Module):
    """tokens -> map -> bilinear upsample -> ConvBN -> + X_i"""

    def __init__(self, dim: int, out_ch: int, grid: tuple[int, int]):
        super().__init__()
        self.grid = grid
        self.conv = ConvBN2d(dim, out_ch)

    def forward(self, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        b, n, d = y.shape
        gh, gw = self.grid
        if n != gh * gw:
            raise ShapeError(f"{n} tokens cannot be reshaped to grid {self.grid}")
        m = y.transpose(1, 2).reshape(b, d, gh, gw)
        m = F.interpolate(m, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(m) + x


class PriorPromptEncoder(nn.Module):
    """Image + text level 1 -> single-scale multimodal pyramid ``[y1, y2, y3]``."""

    def __init__(self, config: PpeConfig | None = None):
        super().__init__()
        cfg = config or PpeConfig()
        self.config = cfg
        c = cfg.base_channels
        d1, d2, d3 = cfg.embed_dims
        h1, h2, h3 = cfg.num_heads
        p1, p2, p3 = cfg.patch_sizes
        kw = dict(mlp_ratio=cfg.mlp_ratio, dropout=cfg.dropout)
        self.image_branch = ImageBranch(c)
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        self.down1 = DownViT1(c, d1, p1, cfg.text_len, cfg.n_tokens, h1,
                              use_transformer=cfg.use_downvit, **kw)
        self.down2 = DownViTNext(2 * c, d2, d1, p2, h2, use_transformer=cfg.use_downvit, **kw)
        self.down3 = DownViTNext(4 * c, d3, d2, p3, h3, use_transformer=cfg.use_downvit, **kw)
        self.up3 = UpViT(d3, None, h3, **kw)
        self.up2 = UpViT(d2, d3, h2, **kw)
        self.up1 = UpViT(d1, d2, h1, **kw)
        grid = cfg.token_grid
        self.fuse1 = SingleScaleFusion(d1, c, grid)
        self.fuse2 = SingleScaleFusion(d2, 2 * c, grid)
        self.fuse3 = SingleScaleFusion(d3, 4 * c, grid)

    def tokens(self, xs: list[torch.Tensor], x_text1: torch.Tensor) -> list[torch.Tensor]:
        y1 = self.down1(xs[0], x_text1)
        y2 = self.down2(xs[1], y1)
        y3 = self.down3(xs[2], y2)
        if self.config.use_upvit:
            y3 = self.up3(y3)
            y2 = self.up2(y2, y3)
            y1 = self.up1(y1, y2)
        return [y1, y2, y3]

    def forward(self, x_img: torch.Tensor, x_text1: torch.Tensor) -> list[torch.Tensor]:
        if tuple(x_img.shape[-2:]) != self.config.image_size:
            raise ShapeError(f"image size {tuple(x_img.shape[-2:])} != configured {self.config.image_size}")
        if self.config.normalize_input:
            x_img = (x_img - self.pixel_mean.to(x_img.dtype)) / self.pixel_std.to(x_img.dtype)
        xs = self.image_branch(x_img)
        ys = self.tokens(xs, x_text1)
        return [self.fuse1(ys[0], xs[0]), self.fuse2(ys[1], xs[1]), self.fuse3(ys[2], xs[2])]


def ppe_forward(ppe: PriorPromptEncoder, text_encoder: nn.Module, x_img: torch.Tensor,
                captions) -> list[torch.Tensor]:
    """Run the text encoder and the PPE on one batch of images and captions."""
    if isinstance(captions, str):
        captions = [captions] * x_img.shape[0]
    if len(captions) != x_img.shape[0]:
        raise ShapeError(f"{len(captions)} captions for {x_img.shape[0]} images")
    x_text1 = text_encoder(captions)[0].to(x_img.dtype)
    return ppe(x_img, x_text1)
