"""Command-line entry point: pretrain, eval, sweep-decoders, crop-preview."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from .backbone import ViTEncoder
from .config import EvalConfig, TrainConfig, load_config
from .datapipe import load_dataset
from .errors import ConfigError

logger = logging.getLogger(__name__)

EVAL_MODES = {"probe": "linear_probe", "finetune": "fine_tune"}


def _load_run_config(args) -> TrainConfig:
    config = load_config(args.config)
    if getattr(args, "data_root", None):
        config = dataclasses.replace(config, data_root=args.data_root)
    return config


def _cmd_pretrain(args) -> int:
    from . import experiment, report

    config = _load_run_config(args)
    dataset = load_dataset(config.data_root or None, "train")
    ckpt = experiment.pretrain(
        config, dataset, resume=args.resume, force_resume=args.force
    )
    metrics = experiment.read_metrics(Path(config.out_dir) / "metrics.jsonl")
    report.render_training_curves(metrics, Path(config.out_dir) / "loss_curves.png")
    print(f"checkpoint {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    from . import experiment
    from .config import parse_config_text

    payload = experiment.load_checkpoint(args.ckpt)
    run_config = parse_config_text(payload["config_text"])
    root = args.data_root or run_config.data_root or None
    train_split = load_dataset(root, "train")
    val_split = load_dataset(root, "val")
    eval_config = EvalConfig(
        mode=EVAL_MODES[args.mode],
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    top1 = experiment.evaluate(args.ckpt, eval_config, train_split, val_split)
    print(f"top1 {top1:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    from . import report

    config = _load_run_config(args)
    train_split = load_dataset(config.data_root or None, "train")
    try:
        val_split = load_dataset(config.data_root or None, "val")
    except ConfigError:
        logger.warning("no val split found; probe accuracy will be blank")
        val_split = None
    rows = report.run_decoder_sweep(config, train_split, val_split)
    out_dir = Path(config.out_dir)
    csv_path = out_dir / "decoder_sweep.csv"
    report.write_sweep_csv(rows, csv_path)
    report.render_sweep_figure(rows, out_dir / "decoder_sweep.png")
    print(f"sweep {csv_path}")
    return 0


def _cmd_crop_preview(args) -> int:
    from . import experiment, report

    config = _load_run_config(args)
    dataset = load_dataset(config.data_root or None, "train")
    records = dataset.records[: args.limit]

    checkpoint_stats = None
    encoder = ViTEncoder(config.vit_config()).to(config.torch_dtype)
    if args.ckpt:
        payload = experiment.load_checkpoint(args.ckpt)
        experiment._load_module_state(encoder, payload["encoder"], "encoder")
        checkpoint_stats = (
            tuple(payload["norm_mean"]),
            tuple(payload["norm_std"]),
        )
    encoder.eval()

    policy = report.resolve_preview_policy(config, records, checkpoint_stats)
    written = report.render_crop_previews(
        records,
        encoder,
        config.patch_spec(),
        policy,
        config.crop_threshold,
        config.heatmap_source,
        args.out,
        limit=args.limit,
        seed=config.seed,
    )
    print(f"wrote {len(written)} previews to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmae",
        description="Masked-image pretraining with contrastive and location tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run pretraining from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="resume across config changes")
    p.add_argument("--data-root", default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("eval", help="linear probe or fine-tune a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=sorted(EVAL_MODES), default="probe")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-root", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-decoders", help="train and compare the decoder zoo")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root", default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("crop-preview", help="render heatmap/rect overlays")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--data-root", default=None)
    p.set_defaults(func=_cmd_crop_preview)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logger.debug("unhandled error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
