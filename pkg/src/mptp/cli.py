"""Command-line entry point: ``mptp pretrain|train|eval|predict|synth``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_bundle
from .config import RunConfig, build_pretrainer, build_segmenter
from .data import (ManifestError, ManifestRow, load_manifest, load_sample, load_samples,
                   make_synthetic_shapes, save_mask, write_dataset)
from .estimators import TextPromptSegmenter
from .exceptions import CheckpointError, ConfigurationError, NonFiniteLossError
from .metrics import METRIC_NAMES
from .validation import as_pair

logger = logging.getLogger("mptp")

EXIT_USAGE = 2
EXIT_NONFINITE = 3


class CliError(Exception):
    pass


def _stack(samples):
    images = torch.cat([s.image for s in samples])
    masks = torch.cat([s.mask for s in samples]) if all(s.mask is not None for s in samples) else None
    return images, masks, [s.caption for s in samples]


def _load_split(cfg: RunConfig, manifest, require_masks: bool):
    if manifest is None:
        raise CliError("no manifest given (config or --manifest)")
    rows = load_manifest(manifest, require_masks=require_masks)
    samples = load_samples(rows, as_pair(cfg.model.image_size), cfg.num_workers)
    logger.info("loaded %d samples from %s", len(samples), manifest)
    return samples


def _checkpoint_callback(out_dir: Path, stage: int, every: int):
    def cb(est, step):
        if every and step % every == 0:
            est.save_checkpoint(out_dir / f"stage{stage}_step{step:06d}.ckpt")
        if step % 10 == 0 or step == est.max_steps:
            logger.info("stage %d step %d/%d loss %.5f", stage, step, est.max_steps, est.history_[-1]["loss"])
    return cb


def write_loss_log(history, path: Path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for h in history:
            w.writerow([h["step"], repr(h["loss"])])


def _plot_losses(history, path: Path, title: str):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not installed; skipping %s", path.name)
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([h["step"] for h in history], [h["loss"] for h in history])
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _write_run_outputs(est, cfg: RunConfig, out_dir: Path, stage: int, extra: list[str], seconds: float):
    final = est.save_checkpoint(out_dir / f"stage{stage}_final.ckpt")
    write_loss_log(est.history_, out_dir / f"stage{stage}_loss.csv")
    losses = est.loss_curve_
    lines = [f"stage: {stage}", f"steps: {est.n_steps_}", f"seed: {cfg.seed}",
             f"wall_seconds: {seconds:.1f}", f"checkpoint: {final}"]
    if losses:
        k = min(10, len(losses))
        lines += [f"final_loss: {losses[-1]:.6f}",
                  f"mean_loss_first_{k}: {np.mean(losses[:k]):.6f}",
                  f"mean_loss_last_{k}: {np.mean(losses[-k:]):.6f}"]
    lines += extra
    (out_dir / f"stage{stage}_summary.txt").write_text("\n".join(lines) + "\n")
    if cfg.plot:
        _plot_losses(est.history_, out_dir / f"stage{stage}_loss.png", f"stage {stage} loss")
    (out_dir / "config_snapshot.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return final


def cmd_pretrain(cfg: RunConfig, args) -> Path:
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = _load_split(cfg, args.manifest or cfg.pretrain.manifest, require_masks=False)
    images, _, captions = _stack(samples)
    est = build_pretrainer(cfg, len(samples))
    t0 = time.time()
    est.fit(images, captions=captions, resume_from=args.resume,
            callback=_checkpoint_callback(out_dir, 1, cfg.pretrain.checkpoint_every))
    std = est.history_[-1]["rep_std"] if est.history_ else float("nan")
    return _write_run_outputs(est, cfg, out_dir, 1, [f"final_rep_std: {std:.6g}"], time.time() - t0)


def cmd_train(cfg: RunConfig, args) -> Path:
    if args.init_from and args.from_scratch:
        raise CliError("--init-from and --from-scratch are mutually exclusive")
    if args.init_from:
        cfg = cfg.with_overrides(train={"init_from": str(Path(args.init_from).resolve()), "from_scratch": False})
    elif args.from_scratch:
        cfg = cfg.with_overrides(train={"from_scratch": True})
    t = cfg.train
    if not t.from_scratch and not t.init_from:
        raise CliError("train needs a stage-1 bundle (--init-from) or an explicit --from-scratch")
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = _load_split(cfg, args.manifest or t.manifest, require_masks=True)
    images, masks, captions = _stack(samples)
    est = build_segmenter(cfg, len(samples))
    t0 = time.time()
    est.fit(images, masks, captions, resume_from=args.resume,
            callback=_checkpoint_callback(out_dir, 2, t.checkpoint_every))
    extra = [f"init_from: {t.init_from if not t.from_scratch else 'scratch'}"]
    if est.init_report_ is not None:
        extra.append(f"inheritance: {est.init_report_.summary()}")
    extra.append(f"train_dice: {est.score(images, masks, captions):.6f}")
    return _write_run_outputs(est, cfg, out_dir, 2, extra, time.time() - t0)


def _load_segmenter(cfg: RunConfig, args) -> TextPromptSegmenter:
    path = args.checkpoint or cfg.eval.checkpoint
    if path is None:
        raise CliError("no stage-2 checkpoint given (config eval.checkpoint or --checkpoint)")
    bundle = load_bundle(path)
    if bundle.stage != 2:
        raise CheckpointError(f"{path} is a stage-{bundle.stage} bundle; eval/predict need stage 2")
    return TextPromptSegmenter.from_checkpoint(bundle, threshold=cfg.eval.threshold)


def cmd_eval(cfg: RunConfig, args) -> Path:
    est = _load_segmenter(cfg, args)
    samples = _load_split(cfg, args.manifest or cfg.eval.manifest, require_masks=True)
    images, masks, captions = _stack(samples)
    rows, macro = est.evaluate(images, masks, captions)
    out = Path(args.output) if args.output else Path(cfg.output_dir) / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", *METRIC_NAMES])
        for s, r in zip(samples, rows):
            w.writerow([s.name, *(f"{r[m]:.6f}" for m in METRIC_NAMES)])
        w.writerow(["macro", *(f"{macro[m]:.6f}" for m in METRIC_NAMES)])
    summary = "\n".join(f"{m}: {macro[m]:.6f}" for m in METRIC_NAMES)
    out.with_name(out.stem + "_summary.txt").write_text(f"images: {len(rows)}\n{summary}\n")
    print(summary)
    return out


def cmd_predict(cfg: RunConfig, args) -> Path:
    if not args.caption or not args.caption.strip():
        raise CliError("predict needs --caption: the model is text-conditioned")
    if not args.image:
        raise CliError("predict needs --image")
    est = _load_segmenter(cfg, args)
    image_path = Path(args.image)
    try:
        with Image.open(image_path) as im:
            orig_w, orig_h = im.size
    except OSError as exc:
        raise ManifestError(f"cannot read image {image_path}: {exc}") from exc
    sample = load_sample(ManifestRow(0, image_path, args.caption), as_pair(est.image_size))
    probs = est.predict_proba(sample.image, [sample.caption])[0, 0]
    mask = Image.fromarray(((probs > est.threshold) * 255).astype(np.uint8))
    mask = mask.resize((orig_w, orig_h), Image.NEAREST)
    out = Path(args.output) if args.output else Path(cfg.output_dir) / f"{image_path.stem}_mask.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mask(np.asarray(mask) > 127, out)
    if args.save_probs:
        # probabilities stay at model resolution
        np.save(out.with_suffix(".npy"), probs.astype(np.float32))
    print(out)
    return out


def cmd_synth(args) -> Path:
    path = write_dataset(make_synthetic_shapes(args.n, args.size, args.seed), args.output)
    print(path)
    return path


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    model = {}
    for flag, key in (("no_downvit", "use_downvit"), ("no_upvit", "use_upvit"),
                      ("no_msff", "use_msff"), ("no_upattention", "use_upattention")):
        if getattr(args, flag, False):
            model[key] = False
    overrides = {"model": model}
    if getattr(args, "freeze_ppe", False):
        overrides["train"] = {"freeze_ppe": True}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = str(Path(args.output_dir).resolve())
    return cfg.with_overrides(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mptp", description="Text-prompted segmentation training toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None, help="override output_dir from the config")
        p.add_argument("--manifest", default=None, help="override the section's manifest")
        for name in ("downvit", "upvit", "msff", "upattention"):
            p.add_argument(f"--no-{name}", action="store_true", help=f"ablate the {name} block")
        return p

    p = common(sub.add_parser("pretrain", help="stage-1 Siamese pretraining"))
    p.add_argument("--resume", default=None, help="stage-1 bundle to continue from")

    p = common(sub.add_parser("train", help="stage-2 segmentation training"))
    p.add_argument("--init-from", default=None, help="stage-1 bundle to inherit the encoder from")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--freeze-ppe", action="store_true")
    p.add_argument("--resume", default=None, help="stage-2 bundle to continue from")

    p = common(sub.add_parser("eval", help="metrics on a labelled manifest"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--output", default=None, help="metrics CSV path")

    p = common(sub.add_parser("predict", help="segment one image"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--output", default=None, help="mask PNG path")
    p.add_argument("--save-probs", action="store_true", help="also write probabilities as .npy")

    p = sub.add_parser("synth", help="write a small synthetic shapes dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "synth":
        cmd_synth(args)
        return 0
    try:
        cfg = _apply_flags(RunConfig.load(args.config), args)
        COMMANDS[args.command](cfg, args)
    except NonFiniteLossError as exc:
        dump = Path(cfg.output_dir) / f"{args.command}_nonfinite.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"error": str(exc), "parameter_norms": exc.diagnostics}, indent=1))
        logger.error("%s; diagnostics written to %s", exc, dump)
        return EXIT_NONFINITE
    except (CliError, ConfigurationError, CheckpointError, ManifestError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
