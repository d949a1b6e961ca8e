"""Report rendering: crop-preview overlays, decoder-sweep CSV and figures,
training-curve plots. All figures are written to files (headless backend)."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
import re
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from matplotlib.patches import Rectangle

from .backbone import ViTEncoder
from .config import EvalConfig, TrainConfig
from .contrastive_crop import (
    compute_heatmap,
    localize,
    sample_crop,
    save_rect_cache,
)
from .datapipe import (
    AugPolicy,
    DatasetSplit,
    ImageRecord,
    compute_norm_stats,
    resize_pixels,
)
from .decoder_zoo import DecoderSpec, param_count
from .errors import ConfigError

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("kind", "depth", "dim", "param_count", "final_recon_loss", "probe_top1")

KIND_COLORS = {
    "transformer": "tab:blue",
    "mlp": "tab:orange",
    "conv": "tab:green",
    "hybrid_mlp": "tab:red",
    "hybrid_conv": "tab:purple",
}


def _safe_name(source_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", source_id)


def render_crop_previews(
    records: Sequence[ImageRecord],
    encoder: ViTEncoder,
    spec,
    policy: AugPolicy,
    threshold: float,
    source: str,
    out_dir: str | Path,
    limit: int = 8,
    seed: int = 0,
) -> list[Path]:
    """Write heatmap/rect/crop overlay figures plus the rect TSV.

    One figure per image: the resized input, its heatmap with the localized
    rect, and two constrained crop draws.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    use = list(records)[:limit]
    if not use:
        raise ConfigError("no records to preview")
    height, width = spec.image_height, spec.image_width
    dtype = next(encoder.parameters()).dtype

    images = np.stack([resize_pixels(r.pixels(), height, width) for r in use])
    normalized = np.stack(
        [
            ((img.astype(np.float32) / 255.0 - np.asarray(policy.mean, np.float32))
             / np.asarray(policy.std, np.float32)).transpose(2, 0, 1)
            for img in images
        ]
    )
    heatmaps = compute_heatmap(
        encoder, torch.from_numpy(normalized).to(dtype), source, spec
    )

    written = []
    rects = {}
    rng = np.random.default_rng(seed)
    for record, pixels, heat in zip(use, images, heatmaps):
        rect = localize(heat, threshold)
        rects[record.source_id] = rect
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
        axes[0].imshow(pixels)
        axes[0].set_title("input")
        axes[1].imshow(pixels)
        axes[1].imshow(
            np.kron(heat.scores, np.ones((spec.patch_size, spec.patch_size))),
            cmap="magma",
            alpha=0.6,
            vmin=0.0,
            vmax=1.0,
        )
        x_lo, y_lo, x_hi, y_hi = rect.pixel_bounds(spec.patch_size)
        axes[1].add_patch(
            Rectangle(
                (x_lo, y_lo), x_hi - x_lo, y_hi - y_lo,
                fill=False, edgecolor="cyan", linewidth=1.5,
            )
        )
        axes[1].set_title(f"heatmap + rect (k={threshold})")
        axes[2].imshow(pixels)
        for color in ("lime", "yellow"):
            box, _ = sample_crop(
                policy.scale_range,
                policy.aspect_range,
                rect,
                (height, width),
                spec.patch_size,
                rng,
            )
            axes[2].add_patch(
                Rectangle(
                    (box.x1, box.y1), box.width, box.height,
                    fill=False, edgecolor=color, linewidth=1.5,
                )
            )
        axes[2].set_title("sampled crops")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        path = out_dir / f"{_safe_name(record.source_id)}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    save_rect_cache(rects, out_dir / "crop_boxes.tsv", epoch=0)
    return written


def sweep_specs(config: TrainConfig) -> list[DecoderSpec]:
    """Cross product of the configured sweep grids, invalid combos skipped."""
    kinds = [k.strip() for k in config.sweep_kinds.split(",") if k.strip()]
    depths = [int(d) for d in config.sweep_depths.split(",") if d.strip()]
    dims = [int(d) for d in config.sweep_dims.split(",") if d.strip()]
    specs = []
    for kind, depth, dim in itertools.product(kinds, depths, dims):
        try:
            specs.append(
                DecoderSpec(
                    kind=kind,
                    depth=depth,
                    dim=dim,
                    heads=config.decoder_heads,
                    dense_conv=config.decoder_dense_conv,
                    tag=f"{kind}-d{depth}-w{dim}",
                )
            )
        except ValueError as exc:
            logger.info("skipping %s depth=%d dim=%d: %s", kind, depth, dim, exc)
    return specs


def run_decoder_sweep(
    config: TrainConfig,
    train_split: DatasetSplit,
    val_split: Optional[DatasetSplit],
) -> list[dict]:
    """Pretrain once per decoder spec and collect the comparison table.

    Rows report the exact parameter count, the mean reconstruction loss over
    the final epoch, and (when a validation split is available) a frozen
    linear-probe top-1.
    """
    from .experiment import evaluate, pretrain, read_metrics

    spec = config.patch_spec()
    rows = []
    for dec in sweep_specs(config):
        run_config = dataclasses.replace(
            config,
            decoder_kind=dec.kind,
            decoder_depth=dec.depth,
            decoder_dim=dec.dim,
            out_dir=str(Path(config.out_dir) / "sweep" / dec.tag),
        )
        logger.info("sweep run %s", dec.tag)
        ckpt = pretrain(run_config, train_split)
        metrics = read_metrics(Path(run_config.out_dir) / "metrics.jsonl")
        steps = [m for m in metrics if m["kind"] == "step"]
        last_epoch = steps[-1]["epoch"]
        final_recon = float(
            np.mean(
                [m["loss_reconstruction"] for m in steps if m["epoch"] == last_epoch]
            )
        )
        if val_split is not None:
            top1 = evaluate(
                ckpt,
                EvalConfig(
                    mode="linear_probe",
                    epochs=config.eval_epochs,
                    lr=config.eval_lr,
                    batch_size=config.eval_batch_size,
                    seed=config.seed,
                ),
                train_split,
                val_split,
            )
        else:
            top1 = math.nan
        rows.append(
            {
                "kind": dec.kind,
                "depth": dec.depth,
                "dim": dec.dim,
                "param_count": param_count(dec, spec, config.vit_dim),
                "final_recon_loss": final_recon,
                "probe_top1": top1,
            }
        )
    return rows


def write_sweep_csv(rows: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SWEEP_COLUMNS})


def render_sweep_figure(rows: Sequence[dict], path: str | Path) -> None:
    """Reconstruction loss and probe accuracy against decoder size."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_loss, ax_top1) = plt.subplots(1, 2, figsize=(10, 4))
    seen = set()
    for row in rows:
        color = KIND_COLORS.get(row["kind"], "gray")
        label = row["kind"] if row["kind"] not in seen else None
        seen.add(row["kind"])
        ax_loss.scatter(
            row["param_count"], row["final_recon_loss"], color=color, label=label
        )
        if not math.isnan(row["probe_top1"]):
            ax_top1.scatter(row["param_count"], row["probe_top1"], color=color)
    ax_loss.set_xscale("log")
    ax_loss.set_xlabel("decoder parameters")
    ax_loss.set_ylabel("final reconstruction loss")
    ax_loss.legend(fontsize=8)
    ax_top1.set_xscale("log")
    ax_top1.set_xlabel("decoder parameters")
    ax_top1.set_ylabel("probe top-1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curves(metrics: Sequence[dict], path: str | Path) -> None:
    """Loss components over training steps."""
    steps = [m for m in metrics if m.get("kind") == "step"]
    if not steps:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xs = [m["step"] for m in steps]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (
        ("loss_total", "total"),
        ("loss_contrastive", "contrastive"),
        ("loss_location", "location"),
        ("loss_reconstruction", "reconstruction"),
    ):
        ax.plot(xs, [m[key] for m in steps], label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def resolve_preview_policy(
    config: TrainConfig,
    records: Sequence[ImageRecord],
    checkpoint_stats: Optional[tuple] = None,
) -> AugPolicy:
    """Normalization stats for preview passes: config, checkpoint, or computed."""
    explicit = config.explicit_norm_stats()
    if explicit is not None:
        mean, std = explicit
    elif checkpoint_stats is not None:
        mean, std = checkpoint_stats
    else:
        mean, std = compute_norm_stats(list(records))
    return config.aug_policy(mean, std)
