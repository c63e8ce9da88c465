"""scikit-learn style wrappers around the two training stages.

``SiamesePretrainer`` (fit/transform) runs stage-1 contrastive pretraining.
``TextPromptSegmenter`` (fit/predict/score) trains the full segmentation
network, optionally inheriting the prompt encoder from a stage-1 checkpoint.
Both train for a fixed number of optimizer steps; the batch order, the
augmentation stream and the learning rate are pure functions of the step
index, so a run resumed from a checkpoint continues exactly where it stopped.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt
from .data import batch_indices
from .exceptions import CheckpointError, ConfigurationError, NonFiniteLossError
from .losses import LossConfig, total_loss
from .metrics import macro_average, per_image_metrics
from .network import INHERITED_PREFIXES, SegmentationNet
from .ppe import PpeConfig
from .pretrain import AugmentationPolicy, SiameseNet, parameter_norms, stage1_step
from .validation import as_pair, as_triple, check_captions, check_images, check_masks

logger = logging.getLogger(__name__)


class _StagedTrainer(BaseEstimator):
    """Shared optimizer, schedule and checkpoint plumbing."""

    _stage = 0

    def _ppe_config(self) -> PpeConfig:
        return PpeConfig(
            base_channels=self.base_channels,
            image_size=as_pair(self.image_size),
            patch_sizes=as_triple(self.patch_sizes, "patch_sizes"),
            embed_dims=as_triple(self.embed_dims, "embed_dims"),
            num_heads=as_triple(self.num_heads, "num_heads"),
            mlp_ratio=self.mlp_ratio,
            dropout=self.dropout,
            text_len=self.text_len,
            use_downvit=getattr(self, "use_downvit", True),
            use_upvit=getattr(self, "use_upvit", True),
            normalize_input=self.normalize_input,
        )

    def _base_lr(self) -> float:
        return self.lr * self.batch_size / 256 if self.scale_lr else self.lr

    def _lr_at(self, step: int) -> float:
        base = self._base_lr()
        if self.schedule == "cosine":
            return base * 0.5 * (1.0 + math.cos(math.pi * step / max(self.max_steps, 1)))
        if self.schedule == "constant":
            return base
        raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    def _make_optimizer(self, params) -> torch.optim.Optimizer:
        name = getattr(self, "optimizer", "sgd")
        if name == "sgd":
            return torch.optim.SGD(params, lr=self._base_lr(), momentum=self.momentum,
                                   weight_decay=self.weight_decay)
        if name == "adam":
            return torch.optim.Adam(params, lr=self._base_lr(), weight_decay=self.weight_decay)
        raise ConfigurationError(f"unknown optimizer {name!r}; use 'sgd' or 'adam'")

    def _check_training_set(self, n: int):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch norm)")
        if n < self.batch_size:
            raise ValueError(f"{n} samples cannot fill one batch of {self.batch_size}")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")

    def _batch_at(self, step: int, n: int) -> list[int]:
        per_epoch = n // self.batch_size
        epoch, pos = divmod(step, per_epoch)
        return batch_indices(n, self.batch_size, self.random_state, epoch, train=True)[pos]

    def to_bundle(self) -> ckpt.CheckpointBundle:
        check_is_fitted(self, "model_")
        meta = {
            "step": self.n_steps_,
            "estimator": type(self).__name__,
            "params": _jsonable(self.get_params()),
            "history": self.history_,
        }
        return ckpt.CheckpointBundle(
            stage=self._stage,
            params=ckpt.model_state(self.model_),
            optimizer=ckpt.optimizer_state(self.optimizer_, self.model_),
            rng=ckpt.rng_state(),
            metadata=meta,
        )

    def save_checkpoint(self, path) -> Path:
        return ckpt.save_bundle(self.to_bundle(), path)

    def _resume(self, source) -> ckpt.CheckpointBundle:
        bundle = source if isinstance(source, ckpt.CheckpointBundle) else ckpt.load_bundle(source)
        if bundle.stage != self._stage:
            raise CheckpointError(f"cannot resume a stage-{self._stage} run from a stage-{bundle.stage} bundle")
        ckpt.load_into(self.model_, bundle)
        ckpt.restore_optimizer(self.optimizer_, self.model_, bundle.optimizer)
        ckpt.restore_rng(bundle.rng)
        self.history_ = [dict(h) for h in bundle.metadata.get("history", [])]
        return bundle

    @classmethod
    def from_checkpoint(cls, path, **overrides):
        """Rebuild a fitted estimator from a bundle written by ``save_checkpoint``."""
        bundle = path if isinstance(path, ckpt.CheckpointBundle) else ckpt.load_bundle(path)
        if bundle.stage != cls._stage:
            raise CheckpointError(f"{cls.__name__} needs a stage-{cls._stage} bundle, got stage {bundle.stage}")
        params = dict(bundle.metadata.get("params", {}))
        params.pop("init_from", None)
        params.update(overrides)
        est = cls(**params)
        est._build()
        ckpt.load_into(est.model_, bundle)
        est.n_steps_ = bundle.step
        est.history_ = bundle.metadata.get("history", [])
        est.model_.eval()
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, Path):
            v = str(v)
        elif isinstance(v, AugmentationPolicy):
            v = v.to_dict()
        elif isinstance(v, ckpt.CheckpointBundle):
            v = None
        out[k] = v
    return out


class SiamesePretrainer(TransformerMixin, _StagedTrainer):
    """Stage-1 Siamese pretraining of the prompt encoder.

    ``fit(X, captions=...)`` trains on image/caption pairs; ``transform``
    returns the projected representation (n, proj_dim) of each pair.
    """

    _stage = 1

    def __init__(self, base_channels=64, image_size=224, patch_sizes=(16, 8, 4),
                 embed_dims=(64, 128, 256), num_heads=(2, 4, 8), mlp_ratio=4.0, dropout=0.1,
                 text_len=32, embedder="toy", embedder_dir=None, proj_dim=256, augmentation=None,
                 lr=0.05, scale_lr=True, momentum=0.9, weight_decay=1e-4, schedule="cosine",
                 batch_size=32, max_steps=1000, normalize_input=False, random_state=0):
        self.base_channels = base_channels
        self.image_size = image_size
        self.patch_sizes = patch_sizes
        self.embed_dims = embed_dims
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.dropout = dropout
        self.text_len = text_len
        self.embedder = embedder
        self.embedder_dir = embedder_dir
        self.proj_dim = proj_dim
        self.augmentation = augmentation
        self.lr = lr
        self.scale_lr = scale_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.normalize_input = normalize_input
        self.random_state = random_state

    def _policy(self) -> AugmentationPolicy:
        aug = self.augmentation
        if aug is None:
            return AugmentationPolicy(rng_seed=self.random_state)
        if isinstance(aug, AugmentationPolicy):
            return aug
        return AugmentationPolicy(**aug)

    def _build(self):
        torch.manual_seed(self.random_state)
        self.model_ = SiameseNet(self._ppe_config(), self.proj_dim, self.embedder, self.embedder_dir)
        self.optimizer_ = self._make_optimizer([p for p in self.model_.parameters() if p.requires_grad])
        self.history_ = []
        self.n_steps_ = 0

    def fit(self, X, y=None, captions=None, resume_from=None,
            callback: Callable[["SiamesePretrainer", int], None] | None = None):
        policy = self._policy()
        images = check_images(X, as_pair(self.image_size))
        captions = check_captions(captions, len(images))
        self._check_training_set(len(images))
        self._build()
        start = self._resume(resume_from).step if resume_from is not None else 0
        for step in range(start, self.max_steps):
            idx = self._batch_at(step, len(images))
            lr = self._lr_at(step)
            for group in self.optimizer_.param_groups:
                group["lr"] = lr
            res = stage1_step(self.model_, images[idx], [captions[i] for i in idx],
                              self.optimizer_, policy, step)
            self.n_steps_ = step + 1
            self.history_.append({"step": step + 1, "loss": res.loss, "rep_std": res.rep_std, "lr": lr})
            logger.debug("stage1 step %d loss %.6f std %.4g", step + 1, res.loss, res.rep_std)
            if callback is not None:
                callback(self, step + 1)
        self.model_.eval()
        return self

    @torch.no_grad()
    def transform(self, X, captions=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, as_pair(self.image_size))
        captions = check_captions(captions, len(images))
        self.model_.eval()
        return self.model_.encode(images, captions).numpy()

    @property
    def loss_curve_(self) -> list[float]:
        return [h["loss"] for h in self.history_]


class TextPromptSegmenter(_StagedTrainer):
    """Stage-2 text-prompted binary segmentation.

    ``init_from`` names a stage-1 bundle whose ``ppe.*`` and ``text_encoder.*``
    tensors initialise the encoder; ``None`` trains from scratch. After
    ``fit`` the restored/initialised split is in ``init_report_``.
    """

    _stage = 2

    def __init__(self, base_channels=64, image_size=224, patch_sizes=(16, 8, 4),
                 embed_dims=(64, 128, 256), num_heads=(2, 4, 8), mlp_ratio=4.0, dropout=0.1,
                 text_len=32, embedder="toy", embedder_dir=None, use_downvit=True, use_upvit=True,
                 use_msff=True, use_upattention=True, w1=0.5, w2=0.5, smooth=1e-12,
                 prob_clamp_eps=1e-7, canonical_dice=False, optimizer="sgd", lr=0.01, scale_lr=False,
                 momentum=0.9, weight_decay=1e-4, schedule="constant", batch_size=8, max_steps=300,
                 freeze_ppe=False, init_from=None, threshold=0.5, normalize_input=False, random_state=0):
        self.base_channels = base_channels
        self.image_size = image_size
        self.patch_sizes = patch_sizes
        self.embed_dims = embed_dims
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.dropout = dropout
        self.text_len = text_len
        self.embedder = embedder
        self.embedder_dir = embedder_dir
        self.use_downvit = use_downvit
        self.use_upvit = use_upvit
        self.use_msff = use_msff
        self.use_upattention = use_upattention
        self.w1 = w1
        self.w2 = w2
        self.smooth = smooth
        self.prob_clamp_eps = prob_clamp_eps
        self.canonical_dice = canonical_dice
        self.optimizer = optimizer
        self.lr = lr
        self.scale_lr = scale_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.freeze_ppe = freeze_ppe
        self.init_from = init_from
        self.threshold = threshold
        self.normalize_input = normalize_input
        self.random_state = random_state

    def _loss_config(self) -> LossConfig:
        return LossConfig(self.w1, self.w2, self.smooth, self.prob_clamp_eps, self.canonical_dice)

    def _build(self):
        torch.manual_seed(self.random_state)
        self.model_ = SegmentationNet(self._ppe_config(), self.embedder, self.embedder_dir,
                                      use_msff=self.use_msff, use_upattention=self.use_upattention)
        self.init_report_ = None
        if self.init_from is not None:
            bundle = self.init_from if isinstance(self.init_from, ckpt.CheckpointBundle) \
                else ckpt.load_bundle(self.init_from)
            if bundle.stage != 1:
                raise CheckpointError(f"init_from must be a stage-1 bundle, got stage {bundle.stage}")
            self.init_report_ = ckpt.load_into(self.model_, bundle, INHERITED_PREFIXES)
            logger.info("inherited encoder: %s", self.init_report_.summary())
        if self.freeze_ppe:
            for m in self.model_.encoder_modules():
                m.requires_grad_(False)
        self.optimizer_ = self._make_optimizer([p for p in self.model_.parameters() if p.requires_grad])
        self.history_ = []
        self.n_steps_ = 0

    def _train_mode(self):
        self.model_.train()
        if self.freeze_ppe:
            # frozen encoder: no parameter updates and no running-stat drift
            for m in self.model_.encoder_modules():
                m.eval()

    def fit(self, X, y, captions=None, resume_from=None,
            callback: Callable[["TextPromptSegmenter", int], None] | None = None):
        size = as_pair(self.image_size)
        images = check_images(X, size)
        masks = check_masks(y, len(images), size)
        captions = check_captions(captions, len(images))
        self._check_training_set(len(images))
        cfg = self._loss_config()
        self._build()
        start = self._resume(resume_from).step if resume_from is not None else 0
        for step in range(start, self.max_steps):
            idx = self._batch_at(step, len(images))
            lr = self._lr_at(step)
            for group in self.optimizer_.param_groups:
                group["lr"] = lr
            loss = self.train_step(images[idx], masks[idx], [captions[i] for i in idx], cfg)
            self.n_steps_ = step + 1
            self.history_.append({"step": step + 1, "loss": loss, "lr": lr})
            logger.debug("stage2 step %d loss %.6f", step + 1, loss)
            if callback is not None:
                callback(self, step + 1)
        self.model_.eval()
        return self

    def train_step(self, images, masks, captions, cfg: LossConfig | None = None) -> float:
        """One optimizer step on a prepared batch; returns the loss before the update."""
        self._train_mode()
        probs = self.model_(images, captions)
        loss = total_loss(probs, masks, cfg or self._loss_config())
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite stage-2 loss: {loss.item()}", parameter_norms(self.model_))
        self.optimizer_.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer_.step()
        return float(loss.detach())

    @torch.no_grad()
    def predict_proba(self, X, captions=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, as_pair(self.image_size))
        captions = check_captions(captions, len(images))
        self.model_.eval()
        out = []
        for i in range(0, len(images), max(self.batch_size, 1)):
            out.append(self.model_(images[i:i + self.batch_size], captions[i:i + self.batch_size]))
        return torch.cat(out).numpy()

    def predict(self, X, captions=None) -> np.ndarray:
        """Binary masks ``(n, 1, H, W)`` as uint8 {0, 1}."""
        return (self.predict_proba(X, captions) > self.threshold).astype(np.uint8)

    def evaluate(self, X, y, captions=None) -> tuple[list[dict[str, float]], dict[str, float]]:
        masks = check_masks(y, None, as_pair(self.image_size)).numpy().astype(np.uint8)
        rows = per_image_metrics(self.predict(X, captions), masks)
        return rows, macro_average(rows)

    def score(self, X, y, captions=None) -> float:
        """Macro-averaged Dice on the thresholded predictions."""
        return self.evaluate(X, y, captions)[1]["dice"]

    @property
    def loss_curve_(self) -> list[float]:
        return [h["loss"] for h in self.history_]
