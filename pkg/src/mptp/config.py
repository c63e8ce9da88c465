"""Run configuration: one YAML file with ``model``, ``loss``, ``pretrain``, ``train`` and ``eval`` sections.

Unknown keys are rejected so typos fail loudly. Relative paths are resolved
against the directory holding the config file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .estimators import SiamesePretrainer, TextPromptSegmenter
from .exceptions import ConfigurationError
from .losses import LossConfig
from .ppe import PpeConfig
from .validation import as_pair


@dataclass
class ModelSection:
    base_channels: int = 64
    image_size: tuple = (224, 224)
    patch_sizes: tuple = (16, 8, 4)
    embed_dims: tuple = (64, 128, 256)
    num_heads: tuple = (2, 4, 8)
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    text_len: int = 32
    embedder: str = "toy"
    embedder_dir: str | None = None
    proj_dim: int = 256
    use_downvit: bool = True
    use_upvit: bool = True
    use_msff: bool = True
    use_upattention: bool = True
    normalize_input: bool = False

    def __post_init__(self):
        for name in ("image_size", "patch_sizes", "embed_dims", "num_heads"):
            value = getattr(self, name)
            setattr(self, name, as_pair(value) if name == "image_size" else tuple(int(v) for v in value))

    def ppe_config(self) -> PpeConfig:
        return PpeConfig(self.base_channels, as_pair(self.image_size), tuple(self.patch_sizes),
                         tuple(self.embed_dims), tuple(self.num_heads), self.mlp_ratio, self.dropout,
                         self.text_len, self.use_downvit, self.use_upvit, self.normalize_input)


@dataclass
class LossSection:
    w1: float = 0.5
    w2: float = 0.5
    smooth: float = 1e-12
    prob_clamp_eps: float = 1e-7
    canonical_dice: bool = False


@dataclass
class PretrainSection:
    manifest: str | None = None
    lr: float = 0.05
    scale_lr: bool = True
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    batch_size: int = 32
    max_steps: int = 1000
    epochs: int | None = None  # overrides max_steps when set
    checkpoint_every: int = 0  # 0: only the final bundle
    augmentation: dict | None = None


@dataclass
class TrainSection:
    manifest: str | None = None
    optimizer: str = "sgd"
    lr: float = 0.01
    scale_lr: bool = False
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "constant"
    batch_size: int = 8
    max_steps: int = 300
    epochs: int | None = None
    checkpoint_every: int = 0
    freeze_ppe: bool = False
    init_from: str | None = None
    from_scratch: bool = False


@dataclass
class EvalSection:
    manifest: str | None = None
    checkpoint: str | None = None
    threshold: float = 0.5


_SECTIONS = {"model": ModelSection, "loss": LossSection, "pretrain": PretrainSection,
             "train": TrainSection, "eval": EvalSection}
_PATH_KEYS = {"model": ("embedder_dir",), "pretrain": ("manifest",),
              "train": ("manifest", "init_from"), "eval": ("manifest", "checkpoint")}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    num_workers: int = 0
    plot: bool = False
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data: dict | None, base_dir=None) -> "RunConfig":
        data = dict(data or {})
        _reject_unknown(data, {f.name for f in fields(cls)}, "top level")
        base = Path(base_dir) if base_dir is not None else None
        kwargs = {}
        for name, value in data.items():
            if name not in _SECTIONS:
                kwargs[name] = value
                continue
            section = dict(value or {})
            kind = _SECTIONS[name]
            _reject_unknown(section, {f.name for f in fields(kind)}, f"section '{name}'")
            for key in _PATH_KEYS.get(name, ()):
                if section.get(key) is not None and base is not None:
                    section[key] = str((base / section[key]).resolve())
            kwargs[name] = kind(**section)
        if base is not None and "output_dir" in kwargs:
            kwargs["output_dir"] = str((base / kwargs["output_dir"]).resolve())
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigurationError(f"{path} must hold a mapping at the top level")
        return cls.from_dict(data, path.parent)

    def validate(self):
        self.model.ppe_config()
        LossConfig(**asdict(self.loss))
        for name in ("pretrain", "train"):
            sec = getattr(self, name)
            if sec.batch_size < 2:
                raise ConfigurationError(f"{name}.batch_size must be at least 2 (batch norm)")
            if sec.epochs is not None and sec.epochs < 1:
                raise ConfigurationError(f"{name}.epochs must be positive")
            if sec.checkpoint_every < 0:
                raise ConfigurationError(f"{name}.checkpoint_every must be non-negative")
        if self.train.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"train.optimizer must be 'sgd' or 'adam', got {self.train.optimizer!r}")
        if self.model.embedder not in ("toy", "pretrained"):
            raise ConfigurationError(f"model.embedder must be 'toy' or 'pretrained', got {self.model.embedder!r}")

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (tuple, list)):
                return [clean(x) for x in v]
            return v
        return clean(asdict(self))

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(train={"freeze_ppe": True}, seed=3)``"""
        updates = {}
        for name, value in sections.items():
            if name in _SECTIONS and isinstance(value, dict):
                updates[name] = replace(getattr(self, name), **value)
            else:
                updates[name] = value
        cfg = replace(self, **updates)
        cfg.validate()
        return cfg


def _reject_unknown(data: dict, allowed: set, where: str):
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) {unknown} in {where}; allowed: {sorted(allowed)}")


def resolve_steps(section, n_samples: int) -> int:
    if section.epochs is None:
        return section.max_steps
    return section.epochs * (n_samples // section.batch_size)


def _model_kwargs(m: ModelSection) -> dict:
    return dict(base_channels=m.base_channels, image_size=as_pair(m.image_size),
                patch_sizes=tuple(m.patch_sizes), embed_dims=tuple(m.embed_dims),
                num_heads=tuple(m.num_heads), mlp_ratio=m.mlp_ratio, dropout=m.dropout,
                text_len=m.text_len, embedder=m.embedder, embedder_dir=m.embedder_dir,
                normalize_input=m.normalize_input)


def build_pretrainer(cfg: RunConfig, n_samples: int) -> SiamesePretrainer:
    p = cfg.pretrain
    return SiamesePretrainer(
        **_model_kwargs(cfg.model), proj_dim=cfg.model.proj_dim, augmentation=p.augmentation,
        lr=p.lr, scale_lr=p.scale_lr, momentum=p.momentum, weight_decay=p.weight_decay,
        schedule=p.schedule, batch_size=p.batch_size, max_steps=resolve_steps(p, n_samples),
        random_state=cfg.seed)


def build_segmenter(cfg: RunConfig, n_samples: int) -> TextPromptSegmenter:
    t, m = cfg.train, cfg.model
    return TextPromptSegmenter(
        **_model_kwargs(m), use_downvit=m.use_downvit, use_upvit=m.use_upvit, use_msff=m.use_msff,
        use_upattention=m.use_upattention, **asdict(cfg.loss), optimizer=t.optimizer, lr=t.lr,
        scale_lr=t.scale_lr, momentum=t.momentum, weight_decay=t.weight_decay, schedule=t.schedule,
        batch_size=t.batch_size, max_steps=resolve_steps(t, n_samples), freeze_ppe=t.freeze_ppe,
        init_from=None if t.from_scratch else t.init_from, threshold=cfg.eval.threshold,
        random_state=cfg.seed)
