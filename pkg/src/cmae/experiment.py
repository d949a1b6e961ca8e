"""Pretraining driver, LR schedule, checkpointing, metrics, and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (
    EncoderState,
    momentum_update,
    run_contrastive_branches,
    ViTEncoder,
)
from .config import (
    EvalConfig,
    TrainConfig,
    config_fingerprint,
    config_text,
    parse_config_text,
)
from .contrastive_crop import (
    BoundingRect,
    ContrastiveCropSampler,
    RandomCropSampler,
    refresh_boxes,
    save_rect_cache,
)
from .datapipe import (
    AugPolicy,
    DatasetSplit,
    ImageRecord,
    make_views,
    normalize_image,
    patchify,
    resize_pixels,
    compute_norm_stats,
    write_class_manifest,
)
from .decoder_zoo import Decoder, build_decoder
from .decoder_zoo import decode as decode_patches
from .errors import ConfigError
from .masking import make_mask, split
from .objectives import (
    ContrastiveBatch,
    LocationHead,
    LossReport,
    info_nce,
    location_loss,
    location_targets,
    normalize_patch_targets,
    reconstruction_loss,
    total_loss,
)
from .seeding import keyed_rng, keyed_torch_seed, seed_module_init

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Learning-rate schedule


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Linear warmup to base_lr, then cosine annealing to min_lr."""
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span <= 0:
        return schedule.base_lr
    progress = (step - schedule.warmup_steps) / span
    return schedule.min_lr + (schedule.base_lr - schedule.min_lr) * 0.5 * (
        1.0 + math.cos(math.pi * progress)
    )


# ---------------------------------------------------------------------------
# Metrics


class MetricsLog:
    """Append-only JSON-lines metrics file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with open(self.path, "a") as handle:
            handle.write(json.dumps(record) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


# ---------------------------------------------------------------------------
# Training state


@dataclass
class TrainState:
    config: TrainConfig
    state: EncoderState
    location_head: LocationHead
    decoder: Decoder
    optimizer: torch.optim.AdamW
    norm_mean: tuple[float, float, float]
    norm_std: tuple[float, float, float]
    class_names: list[str]
    epoch: int = 0  # next epoch to run
    step: int = 0  # global step counter
    rect_cache: dict[str, BoundingRect] = field(default_factory=dict)

    def policy(self) -> AugPolicy:
        return self.config.aug_policy(self.norm_mean, self.norm_std)


def build_train_state(config: TrainConfig, dataset: DatasetSplit) -> TrainState:
    """Construct models, optimizer, and normalization stats for a fresh run.

    Each module is built under its own keyed seed so initialization does not
    depend on build order.
    """
    explicit = config.explicit_norm_stats()
    if explicit is not None:
        mean, std = explicit
    else:
        mean, std = compute_norm_stats(dataset.records)
    dtype = config.torch_dtype
    spec = config.patch_spec()

    seed_module_init(config.seed, "backbone")
    state = EncoderState.create(
        config.vit_config(), config.projection_spec(), config.momentum, dtype
    )
    seed_module_init(config.seed, "location_head")
    location_head = LocationHead(
        config.vit_dim, spec.num_tokens, config.location_hidden
    ).to(dtype)
    seed_module_init(config.seed, "decoder")
    decoder = build_decoder(config.decoder_spec(), spec, config.vit_dim).to(dtype)

    params = [
        p
        for p in (
            list(state.online_parameters())
            + list(location_head.parameters())
            + list(decoder.parameters())
        )
        if p.requires_grad
    ]
    optimizer = torch.optim.AdamW(
        params,
        lr=config.base_lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    return TrainState(
        config=config,
        state=state,
        location_head=location_head,
        decoder=decoder,
        optimizer=optimizer,
        norm_mean=mean,
        norm_std=std,
        class_names=list(dataset.class_names),
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def run_training_step(
    ts: TrainState,
    records: Sequence[ImageRecord],
    epoch: int,
    step: int,
    sampler,
    lr: float,
) -> LossReport:
    """One optimization step over a batch of records.

    Zero-weighted loss components are skipped entirely, so their parameters
    receive no gradient and stay untouched by the optimizer.
    """
    cfg = ts.config
    spec = cfg.patch_spec()
    dtype = cfg.torch_dtype
    weights = cfg.loss_weights()
    policy = ts.policy()

    views = make_views(
        records,
        policy,
        sampler,
        spec.image_height,
        spec.image_width,
        cfg.seed,
        epoch,
        dtype,
    )
    tokens_q = patchify(views.view_q, spec)
    batch = tokens_q.shape[0]
    plan_q = make_mask(
        spec.num_tokens, cfg.mask_ratio, keyed_rng(cfg.seed, "mask", step, 0), batch
    )

    need_key_view = weights.contrastive > 0 or cfg.symmetric_recon
    tokens_k = patchify(views.view_k, spec) if need_key_view else None
    plan_k = (
        make_mask(
            spec.num_tokens, cfg.mask_ratio, keyed_rng(cfg.seed, "mask", step, 1), batch
        )
        if need_key_view
        else None
    )

    zero = torch.zeros((), dtype=dtype)
    if weights.contrastive > 0:
        branch = run_contrastive_branches(ts.state, tokens_q, tokens_k, plan_q, plan_k)
        l_ctr = info_nce(
            ContrastiveBatch(branch.z_q, branch.z_k, cfg.temperature)
        )
        q1 = branch.q1_features
    else:
        parts = split(tokens_q, plan_q)
        q1 = ts.state.encoder(parts.visible, plan_q.visible)
        l_ctr = zero
    q1_patches = ts.state.encoder.strip_cls(q1)

    if weights.location > 0:
        scores = ts.location_head(q1_patches)
        l_loc = location_loss(
            scores, location_targets(plan_q, dtype), squared=cfg.location_squared
        )
    else:
        l_loc = zero

    if weights.reconstruction > 0:
        l_con = _reconstruction_term(ts, tokens_q, q1_patches, plan_q)
        if cfg.symmetric_recon:
            parts_k = split(tokens_k, plan_k)
            k_feats = ts.state.encoder(parts_k.visible, plan_k.visible)
            l_con_k = _reconstruction_term(
                ts, tokens_k, ts.state.encoder.strip_cls(k_feats), plan_k
            )
            l_con = 0.5 * (l_con + l_con_k)
    else:
        l_con = zero

    loss = total_loss(l_ctr, l_loc, l_con, weights)
    if not torch.isfinite(loss):
        raise RuntimeError(
            "non-finite loss at step "
            f"{step}: contrastive={float(l_ctr)}, location={float(l_loc)}, "
            f"reconstruction={float(l_con)}"
        )

    _set_lr(ts.optimizer, lr)
    ts.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    ts.optimizer.step()
    momentum_update(ts.state)
    return LossReport(
        contrastive=float(l_ctr.detach()),
        location=float(l_loc.detach()),
        reconstruction=float(l_con.detach()),
        total=float(loss.detach()),
    )


def _reconstruction_term(ts, tokens, visible_features, plan) -> torch.Tensor:
    predictions = decode_patches(ts.decoder, visible_features, plan)
    targets = (
        normalize_patch_targets(tokens) if ts.config.norm_pix_targets else tokens
    )
    return reconstruction_loss(predictions, targets, plan)


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """Shuffled sample order, a pure function of (seed, epoch)."""
    return keyed_rng(seed, "order", epoch).permutation(count)


def steps_per_epoch(count: int, batch_size: int) -> int:
    return math.ceil(count / batch_size)


def make_schedule(config: TrainConfig, count: int) -> LrSchedule:
    per_epoch = steps_per_epoch(count, config.batch_size)
    return LrSchedule(
        base_lr=config.base_lr,
        min_lr=config.min_lr,
        warmup_steps=config.warmup_epochs * per_epoch,
        total_steps=config.epochs * per_epoch,
    )


def _epoch_sampler(ts: TrainState, epoch: int, spec, policy):
    schedule = ts.config.crop_schedule()
    if ts.config.crop_enabled and schedule.active(epoch) and ts.rect_cache:
        return ContrastiveCropSampler(policy, spec, ts.rect_cache)
    return RandomCropSampler(policy, spec.image_height, spec.image_width)


def pretrain(
    config: TrainConfig,
    dataset: DatasetSplit,
    resume: Optional[str | Path] = None,
    force_resume: bool = False,
) -> Path:
    """Full pretraining run; returns the final checkpoint path."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_all = dataset
    if config.train_subset > 0:
        records_all = dataset.subset(config.train_subset)

    if resume is not None:
        ts = load_train_state(resume, config, force=force_resume)
    else:
        ts = build_train_state(config, records_all)

    write_class_manifest(records_all, out_dir / "classes.txt")
    (out_dir / "config.txt").write_text(config_text(config))
    metrics = MetricsLog(out_dir / "metrics.jsonl")

    spec = config.patch_spec()
    policy = ts.policy()
    schedule = make_schedule(config, len(records_all))
    crop_schedule = config.crop_schedule()
    records = records_all.records

    for epoch in range(ts.epoch, config.epochs):
        if config.crop_enabled and crop_schedule.should_refresh(epoch):
            ts.rect_cache = refresh_boxes(
                records,
                ts.state.encoder,
                config.crop_threshold,
                config.heatmap_source,
                spec,
                policy,
            )
            save_rect_cache(ts.rect_cache, out_dir / "crop_boxes.tsv", epoch)
            logger.info("refreshed %d crop rects at epoch %d", len(ts.rect_cache), epoch)
        sampler = _epoch_sampler(ts, epoch, spec, policy)
        order = epoch_order(config.seed, epoch, len(records))
        for start in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[start : start + config.batch_size]]
            lr = lr_at(ts.step, schedule)
            report = run_training_step(ts, batch, epoch, ts.step, sampler, lr)
            metrics.append(
                {
                    "kind": "step",
                    "step": ts.step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_contrastive": report.contrastive,
                    "loss_location": report.location,
                    "loss_reconstruction": report.reconstruction,
                    "loss_total": report.total,
                }
            )
            ts.step += 1
        ts.epoch = epoch + 1
        if (epoch + 1) % config.checkpoint_interval == 0 and ts.epoch < config.epochs:
            save_checkpoint(ts, out_dir / f"checkpoint_{epoch + 1:04d}.pt")

    final_path = out_dir / "checkpoint_final.pt"
    save_checkpoint(ts, final_path)
    return final_path


# ---------------------------------------------------------------------------
# Checkpointing


def save_checkpoint(ts: TrainState, path: str | Path) -> None:
    rects = {
        sid: (r.row_min, r.row_max, r.col_min, r.col_max)
        for sid, r in ts.rect_cache.items()
    }
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_text": config_text(ts.config),
        "fingerprint": config_fingerprint(ts.config),
        "epoch": ts.epoch,
        "step": ts.step,
        "encoder": ts.state.encoder.state_dict(),
        "momentum_encoder": ts.state.momentum_encoder.state_dict(),
        "projector": ts.state.projector.state_dict(),
        "momentum_projector": ts.state.momentum_projector.state_dict(),
        "location_head": ts.location_head.state_dict(),
        "decoder": ts.decoder.state_dict(),
        "optimizer": ts.optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "rect_cache": rects,
        "norm_mean": list(ts.norm_mean),
        "norm_std": list(ts.norm_std),
        "class_names": list(ts.class_names),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise RuntimeError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise RuntimeError(f"corrupt checkpoint {path}: missing version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise RuntimeError(
            f"checkpoint version {payload['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def _load_module_state(module: torch.nn.Module, state: dict, name: str) -> None:
    current = module.state_dict()
    for key, tensor in state.items():
        if key not in current:
            raise RuntimeError(f"unexpected tensor '{name}.{key}' in checkpoint")
        if tuple(current[key].shape) != tuple(tensor.shape):
            raise RuntimeError(
                f"shape mismatch for '{name}.{key}': checkpoint "
                f"{tuple(tensor.shape)} vs model {tuple(current[key].shape)}"
            )
    for key in current:
        if key not in state:
            raise RuntimeError(f"checkpoint is missing tensor '{name}.{key}'")
    module.load_state_dict(state)


def load_train_state(
    path: str | Path, config: TrainConfig, force: bool = False
) -> TrainState:
    """Rebuild a TrainState from a checkpoint for resumption."""
    payload = load_checkpoint(path)
    if payload["fingerprint"] != config_fingerprint(config) and not force:
        raise ConfigError(
            "checkpoint config fingerprint does not match the run config; "
            "pass --force to resume anyway"
        )
    mean = tuple(payload["norm_mean"])
    std = tuple(payload["norm_std"])
    dtype = config.torch_dtype
    spec = config.patch_spec()

    state = EncoderState.create(
        config.vit_config(), config.projection_spec(), config.momentum, dtype
    )
    location_head = LocationHead(
        config.vit_dim, spec.num_tokens, config.location_hidden
    ).to(dtype)
    decoder = build_decoder(config.decoder_spec(), spec, config.vit_dim).to(dtype)

    _load_module_state(state.encoder, payload["encoder"], "encoder")
    _load_module_state(
        state.momentum_encoder, payload["momentum_encoder"], "momentum_encoder"
    )
    _load_module_state(state.projector, payload["projector"], "projector")
    _load_module_state(
        state.momentum_projector, payload["momentum_projector"], "momentum_projector"
    )
    _load_module_state(location_head, payload["location_head"], "location_head")
    _load_module_state(decoder, payload["decoder"], "decoder")

    params = [
        p
        for p in (
            list(state.online_parameters())
            + list(location_head.parameters())
            + list(decoder.parameters())
        )
        if p.requires_grad
    ]
    optimizer = torch.optim.AdamW(
        params,
        lr=config.base_lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    optimizer.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["torch_rng"])

    rect_cache = {
        sid: BoundingRect(*coords) for sid, coords in payload["rect_cache"].items()
    }
    return TrainState(
        config=config,
        state=state,
        location_head=location_head,
        decoder=decoder,
        optimizer=optimizer,
        norm_mean=mean,
        norm_std=std,
        class_names=list(payload["class_names"]),
        epoch=payload["epoch"],
        step=payload["step"],
        rect_cache=rect_cache,
    )


# ---------------------------------------------------------------------------
# Evaluation


def _image_tensor(
    record: ImageRecord, spec, policy: AugPolicy, dtype: torch.dtype
) -> torch.Tensor:
    base = resize_pixels(record.pixels(), spec.image_height, spec.image_width)
    return torch.from_numpy(normalize_image(base, policy)).to(dtype)


def encode_pooled(
    encoder: ViTEncoder,
    records: Sequence[ImageRecord],
    spec,
    policy: AugPolicy,
    dtype: torch.dtype,
    batch_size: int,
    requires_grad: bool = False,
) -> torch.Tensor:
    """Mean-pooled patch-token features of the full unmasked sequence."""
    chunks = []
    positions = torch.arange(spec.num_tokens)
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        images = torch.stack(
            [_image_tensor(rec, spec, policy, dtype) for rec in batch]
        )
        tokens = patchify(images, spec)
        pos = positions.expand(tokens.shape[0], -1)
        if requires_grad:
            feats = encoder(tokens, pos)
        else:
            with torch.no_grad():
                feats = encoder(tokens, pos)
        chunks.append(encoder.strip_cls(feats).mean(dim=1))
    return torch.cat(chunks, dim=0)


def evaluate_splits(
    encoder: ViTEncoder,
    spec,
    policy: AugPolicy,
    train_split: DatasetSplit,
    val_split: DatasetSplit,
    eval_config: EvalConfig,
    dtype: torch.dtype = torch.float32,
) -> float:
    """Train a classifier per the eval mode and return val top-1 accuracy."""
    num_classes = train_split.num_classes
    dim = encoder.config.dim
    labels_train = torch.tensor([r.label for r in train_split.records])
    labels_val = torch.tensor([r.label for r in val_split.records])

    seed_module_init(eval_config.seed, "eval_classifier")
    classifier = torch.nn.Linear(dim, num_classes).to(dtype)

    probe = eval_config.mode == "linear_probe"
    if probe:
        for p in encoder.parameters():
            p.requires_grad_(False)
        feats_train = encode_pooled(
            encoder, train_split.records, spec, policy, dtype, eval_config.batch_size
        )
        trainable = list(classifier.parameters())
    else:
        for p in encoder.parameters():
            p.requires_grad_(True)
        trainable = list(encoder.parameters()) + list(classifier.parameters())
    optimizer = torch.optim.AdamW(trainable, lr=eval_config.lr, weight_decay=0.0)

    count = len(train_split.records)
    for epoch in range(eval_config.epochs):
        order = keyed_rng(eval_config.seed, "eval_order", epoch).permutation(count)
        for start in range(0, count, eval_config.batch_size):
            idx = torch.from_numpy(order[start : start + eval_config.batch_size].copy())
            if probe:
                logits = classifier(feats_train[idx])
            else:
                batch = [train_split.records[i] for i in idx.tolist()]
                pooled = encode_pooled(
                    encoder, batch, spec, policy, dtype, len(batch), requires_grad=True
                )
                logits = classifier(pooled)
            loss = F.cross_entropy(logits, labels_train[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

    feats_val = encode_pooled(
        encoder, val_split.records, spec, policy, dtype, eval_config.batch_size
    )
    with torch.no_grad():
        predictions = classifier(feats_val).argmax(dim=1)
    return float((predictions == labels_val).double().mean())


def evaluate(
    checkpoint_path: str | Path,
    eval_config: EvalConfig,
    train_split: DatasetSplit,
    val_split: DatasetSplit,
) -> float:
    """Evaluate a checkpoint on the given splits, reporting top-1 accuracy."""
    payload = load_checkpoint(checkpoint_path)
    config = parse_config_text(payload["config_text"])
    if train_split.num_classes != len(payload["class_names"]):
        raise RuntimeError(
            f"class count mismatch: dataset has {train_split.num_classes} classes, "
            f"checkpoint manifest has {len(payload['class_names'])}"
        )
    encoder = ViTEncoder(config.vit_config()).to(config.torch_dtype)
    _load_module_state(encoder, payload["encoder"], "encoder")
    encoder.eval()
    policy = config.aug_policy(tuple(payload["norm_mean"]), tuple(payload["norm_std"]))
    top1 = evaluate_splits(
        encoder,
        config.patch_spec(),
        policy,
        train_split,
        val_split,
        eval_config,
        config.torch_dtype,
    )
    metrics_path = Path(checkpoint_path).parent / "metrics.jsonl"
    if metrics_path.exists():
        MetricsLog(metrics_path).append(
            {
                "kind": "eval",
                "mode": eval_config.mode,
                "epoch": payload["epoch"],
                "top1": top1,
            }
        )
    return top1
