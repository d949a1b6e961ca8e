"""Run configuration: the flat key=value file format and derived objects."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .backbone import ProjectionSpec, ViTConfig
from .contrastive_crop import CropSchedule, HEATMAP_SOURCES
from .datapipe import AugPolicy, PatchSpec
from .decoder_zoo import DECODER_KINDS, DecoderSpec
from .errors import ConfigError
from .objectives import LossWeights

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    # data
    data_root: str = ""
    image_size: int = 64
    patch_size: int = 8
    train_subset: int = 0  # 0 = whole split
    norm_mean: str = ""  # "r,g,b"; empty = compute over the training split
    norm_std: str = ""

    # augmentation
    flip_prob: float = 0.5
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    crop_aspect_min: float = 0.75
    crop_aspect_max: float = 1.3333333333333333

    # heatmap-constrained cropping
    crop_enabled: bool = True
    crop_threshold: float = 0.1
    crop_warmup_epochs: float = -1.0  # -1 = 20% of epochs; inf disables
    crop_refresh_interval: int = 20
    heatmap_source: str = "encoder_features"

    # masking
    mask_ratio: float = 0.75

    # encoder / projection
    vit_depth: int = 4
    vit_dim: int = 192
    vit_heads: int = 4
    vit_mlp_ratio: float = 4.0
    cls_token: bool = True
    pos_embed: str = "sincos"
    proj_dim: int = 128
    proj_hidden: int = 0
    proj_pooling: str = "mean"
    normalize_embeddings: bool = True
    momentum: float = 0.99

    # decoder
    decoder_kind: str = "transformer"
    decoder_depth: int = 2
    decoder_dim: int = 128
    decoder_heads: int = 4
    decoder_dense_conv: bool = False

    # location head
    location_hidden: int = 0

    # losses
    temperature: float = 0.2
    weight_contrastive: float = 1.0
    weight_location: float = 1.0
    weight_reconstruction: float = 1.0
    location_squared: bool = False
    norm_pix_targets: bool = True
    symmetric_recon: bool = False

    # optimization
    epochs: int = 300
    batch_size: int = 64
    base_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.95

    # decoder sweep grids (comma-separated)
    sweep_kinds: str = "transformer,mlp,conv,hybrid_mlp,hybrid_conv"
    sweep_depths: str = "8,6,4,2"
    sweep_dims: str = "512,256,128,64"

    # run control
    seed: int = 0
    dtype: str = "float32"
    out_dir: str = "runs/cmae"
    checkpoint_interval: int = 50  # epochs
    eval_epochs: int = 100
    eval_lr: float = 1e-3
    eval_batch_size: int = 256

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.image_size >= self.patch_size > 0, "patch size must divide image size"),
            (self.image_size % self.patch_size == 0, "patch size must divide image size"),
            (0.0 <= self.mask_ratio < 1.0, "mask ratio must lie in [0, 1)"),
            (0.0 <= self.momentum <= 1.0, "momentum must lie in [0, 1]"),
            (self.temperature > 0, "temperature must be positive"),
            (
                min(
                    self.weight_contrastive,
                    self.weight_location,
                    self.weight_reconstruction,
                )
                >= 0,
                "loss weights must be non-negative",
            ),
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.batch_size >= 1, "batch size must be at least 1"),
            (self.warmup_epochs >= 0, "warmup epochs must be non-negative"),
            (self.dtype in DTYPES, f"dtype must be one of {sorted(DTYPES)}"),
            (self.heatmap_source in HEATMAP_SOURCES,
             f"heatmap source must be one of {HEATMAP_SOURCES}"),
            (self.decoder_kind in DECODER_KINDS,
             f"decoder kind must be one of {DECODER_KINDS}"),
            (0.0 < self.crop_threshold < 1.0, "crop threshold must lie in (0, 1)"),
            (self.crop_refresh_interval >= 1, "crop refresh interval must be >= 1"),
            (self.checkpoint_interval >= 1, "checkpoint interval must be >= 1"),
            (0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0,
             "crop scale range must lie in (0, 1]"),
            (0.0 < self.crop_aspect_min <= self.crop_aspect_max,
             "crop aspect range must be positive"),
            (self.eval_epochs >= 1, "eval epochs must be at least 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    # ---- derived objects -------------------------------------------------

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def patch_spec(self) -> PatchSpec:
        return PatchSpec.for_image(self.image_size, self.image_size, self.patch_size)

    def vit_config(self) -> ViTConfig:
        spec = self.patch_spec()
        return ViTConfig(
            depth=self.vit_depth,
            dim=self.vit_dim,
            heads=self.vit_heads,
            grid_h=spec.grid_h,
            grid_w=spec.grid_w,
            patch_size=self.patch_size,
            mlp_ratio=self.vit_mlp_ratio,
            cls_token=self.cls_token,
            pos_embed=self.pos_embed,
        )

    def projection_spec(self) -> ProjectionSpec:
        return ProjectionSpec(
            out_dim=self.proj_dim,
            hidden_dim=self.proj_hidden,
            pooling=self.proj_pooling,
            normalize=self.normalize_embeddings,
        )

    def decoder_spec(self) -> DecoderSpec:
        return DecoderSpec(
            kind=self.decoder_kind,
            depth=self.decoder_depth,
            dim=self.decoder_dim,
            heads=self.decoder_heads,
            dense_conv=self.decoder_dense_conv,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            contrastive=self.weight_contrastive,
            location=self.weight_location,
            reconstruction=self.weight_reconstruction,
        )

    def crop_schedule(self) -> CropSchedule:
        if not self.crop_enabled:
            warmup = math.inf
        elif self.crop_warmup_epochs < 0:
            warmup = 0.2 * self.epochs
        else:
            warmup = self.crop_warmup_epochs
        return CropSchedule(
            warmup_epochs=warmup, refresh_interval=self.crop_refresh_interval
        )

    def aug_policy(
        self, mean: tuple[float, float, float], std: tuple[float, float, float]
    ) -> AugPolicy:
        return AugPolicy(
            flip_prob=self.flip_prob,
            scale_range=(self.crop_scale_min, self.crop_scale_max),
            aspect_range=(self.crop_aspect_min, self.crop_aspect_max),
            mean=mean,
            std=std,
            crop_mode="contrastive" if self.crop_enabled else "random",
        )

    def explicit_norm_stats(self):
        """Mean/std from the config, or None when they must be computed."""
        if not self.norm_mean and not self.norm_std:
            return None
        try:
            mean = tuple(float(v) for v in self.norm_mean.split(","))
            std = tuple(float(v) for v in self.norm_std.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad norm stats: {exc}") from exc
        if len(mean) != 3 or len(std) != 3:
            raise ConfigError("norm_mean and norm_std need three components each")
        return mean, std


def _coerce(raw: str, kind: type, key: str):
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot read {raw!r} as a boolean for {key}")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)  # accepts "inf"
    except ValueError as exc:
        raise ConfigError(f"cannot read {raw!r} as {kind.__name__} for {key}") from exc
    return raw


def parse_config_text(text: str) -> TrainConfig:
    """Parse the flat key=value format; unknown keys are fatal."""
    defaults = TrainConfig()
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in field_names:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(raw, type(getattr(defaults, key)), key)
    return TrainConfig(**values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text())


def config_text(config: TrainConfig) -> str:
    """Canonical key=value rendering (sorted keys)."""
    pairs = {
        f.name: getattr(config, f.name) for f in dataclasses.fields(TrainConfig)
    }
    return "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs))


def config_fingerprint(config: TrainConfig) -> str:
    return hashlib.sha256(config_text(config).encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalConfig:
    """Frozen-probe or fine-tune evaluation settings."""

    mode: str = "linear_probe"
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("linear_probe", "fine_tune"):
            raise ConfigError(f"unknown eval mode {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("eval epochs must be at least 1")
