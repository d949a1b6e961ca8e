"""Heatmap-guided crop localization and constrained random crop sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import ViTEncoder
from .datapipe import (
    AugPolicy,
    ImageRecord,
    PatchSpec,
    normalize_image,
    patchify,
    resize_pixels,
)
from .errors import ConfigError

logger = logging.getLogger(__name__)

HEATMAP_SOURCES = ("encoder_features", "attention_map")


@dataclass(frozen=True)
class HeatMap:
    """Min-max normalized grid of object-evidence scores in [0, 1]."""

    scores: np.ndarray  # (grid_h, grid_w)
    source: str

    def __post_init__(self) -> None:
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be 2-D, got shape {self.scores.shape}")
        if self.scores.min() < 0.0 or self.scores.max() > 1.0:
            raise ValueError("heatmap scores must lie in [0, 1]")


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Scale into [0, 1]; a constant map becomes all ones so localization
    degrades to the full image."""
    lo = float(raw.min())
    hi = float(raw.max())
    if hi - lo < 1e-12:
        return np.ones_like(raw, dtype=np.float64)
    return (raw.astype(np.float64) - lo) / (hi - lo)


@dataclass(frozen=True)
class BoundingRect:
    """Inclusive token-grid rectangle."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self) -> None:
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate rect {self}")
        if min(self.row_min, self.col_min) < 0:
            raise ValueError(f"rect {self} has negative coordinates")

    @classmethod
    def full(cls, grid_h: int, grid_w: int) -> "BoundingRect":
        return cls(0, grid_h - 1, 0, grid_w - 1)

    def contains(self, other: "BoundingRect") -> bool:
        return (
            self.row_min <= other.row_min
            and self.row_max >= other.row_max
            and self.col_min <= other.col_min
            and self.col_max >= other.col_max
        )

    def pixel_bounds(self, patch_size: int) -> tuple[float, float, float, float]:
        """(x_lo, y_lo, x_hi, y_hi) pixel extent of the rect."""
        return (
            self.col_min * patch_size,
            self.row_min * patch_size,
            (self.col_max + 1) * patch_size,
            (self.row_max + 1) * patch_size,
        )

    def pixel_center(self, patch_size: int) -> tuple[float, float]:
        x_lo, y_lo, x_hi, y_hi = self.pixel_bounds(patch_size)
        return (x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0


@dataclass(frozen=True)
class CropBox:
    """Pixel-coordinate crop window, half-open on the high edges."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            raise ValueError(f"invalid crop box {self}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0


@dataclass(frozen=True)
class CropSchedule:
    """When heatmap-constrained cropping switches on and how often boxes refresh."""

    warmup_epochs: float
    refresh_interval: int

    def __post_init__(self) -> None:
        if self.warmup_epochs < 0:
            raise ValueError("warmup epochs must be non-negative")
        if self.refresh_interval < 1:
            raise ValueError("refresh interval must be at least 1")

    def active(self, epoch: int) -> bool:
        return epoch >= self.warmup_epochs

    def should_refresh(self, epoch: int) -> bool:
        if not self.active(epoch):
            return False
        first = int(math.ceil(self.warmup_epochs))
        return (epoch - first) % self.refresh_interval == 0


def compute_heatmap(
    encoder: ViTEncoder,
    images: torch.Tensor,
    source: str,
    spec: PatchSpec,
) -> list[HeatMap]:
    """Score each grid cell's object evidence from a full unmasked pass.

    ``encoder_features`` scores each patch token by the L2 norm of the last
    block's output (before the final norm, which would equalize token norms);
    ``attention_map`` uses cls-to-patch attention of the last block averaged
    over heads. Both are min-max normalized per image.
    """
    if source not in HEATMAP_SOURCES:
        raise ConfigError(f"unknown heatmap source {source!r}")
    if source == "attention_map" and not encoder.has_cls():
        raise ConfigError("attention_map heatmaps require an encoder with a cls token")
    if images.ndim == 3:
        images = images.unsqueeze(0)
    tokens = patchify(images, spec)
    positions = torch.arange(spec.num_tokens).expand(tokens.shape[0], -1)
    with torch.no_grad():
        _, pre_norm, attn = encoder.forward_intermediate(tokens, positions)
    if source == "encoder_features":
        raw = encoder.strip_cls(pre_norm).norm(dim=-1)  # (B, N)
    else:
        if attn is None:  # zero-depth encoder has no attention to read
            raise ConfigError("attention_map heatmaps require depth >= 1")
        raw = attn[:, :, 0, 1:].mean(dim=1)  # cls row to patches, head-averaged
    raw = raw.double().cpu().numpy()
    maps = []
    for row in raw:
        scores = minmax_normalize(row).reshape(spec.grid_h, spec.grid_w)
        maps.append(HeatMap(scores=scores, source=source))
    return maps


def localize(scores: np.ndarray | HeatMap, threshold: float) -> BoundingRect:
    """Tight bounding rectangle of cells scoring above the threshold.

    Falls back to the full grid when nothing passes (unreachable for properly
    normalized heatmaps, whose max is 1).
    """
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(scores, HeatMap):
        scores = scores.scores
    grid_h, grid_w = scores.shape
    hot = scores > threshold
    if not hot.any():
        return BoundingRect.full(grid_h, grid_w)
    rows, cols = np.nonzero(hot)
    return BoundingRect(
        int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())
    )


def sample_crop(
    scale_range: tuple[float, float],
    aspect_range: tuple[float, float],
    rect: Optional[BoundingRect],
    image_size: tuple[int, int],
    patch_size: int,
    rng: np.random.Generator,
    max_tries: int = 10,
) -> tuple[CropBox, bool]:
    """Random-resized-crop draw whose center must land inside the rect.

    Draws (scale, log-uniform aspect, position) and resamples until the crop
    center falls within the rect's pixel extent; after ``max_tries``
    rejections the crop is centered on the rect at the last drawn size.
    Returns the box and whether the fallback fired.
    """
    height, width = image_size
    area = float(height * width)
    if rect is None:
        x_lo, y_lo, x_hi, y_hi = 0.0, 0.0, float(width), float(height)
    else:
        x_lo, y_lo, x_hi, y_hi = rect.pixel_bounds(patch_size)
        x_hi = min(x_hi, float(width))
        y_hi = min(y_hi, float(height))
    log_aspect = (math.log(aspect_range[0]), math.log(aspect_range[1]))

    w = h = 0
    for _ in range(max_tries):
        scale = rng.uniform(*scale_range)
        aspect = math.exp(rng.uniform(*log_aspect))
        w = max(1, int(round(math.sqrt(area * scale * aspect))))
        h = max(1, int(round(math.sqrt(area * scale / aspect))))
        if w > width or h > height:
            continue
        x1 = int(rng.integers(0, width - w + 1))
        y1 = int(rng.integers(0, height - h + 1))
        cx, cy = x1 + w / 2.0, y1 + h / 2.0
        if x_lo <= cx <= x_hi and y_lo <= cy <= y_hi:
            return CropBox(x1=x1, y1=y1, x2=x1 + w, y2=y1 + h), False

    w = min(max(w, 1), width)
    h = min(max(h, 1), height)
    cx, cy = (x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0
    x1 = int(np.clip(round(cx - w / 2.0), 0, width - w))
    y1 = int(np.clip(round(cy - h / 2.0), 0, height - h))
    return CropBox(x1=x1, y1=y1, x2=x1 + w, y2=y1 + h), True


class RandomCropSampler:
    """Plain random-resized-crop: the center constraint is vacuous."""

    def __init__(self, policy: AugPolicy, height: int, width: int):
        self.policy = policy
        self.height = height
        self.width = width

    def __call__(self, record: ImageRecord, view_index: int, rng) -> CropBox:
        box, _ = sample_crop(
            self.policy.scale_range,
            self.policy.aspect_range,
            None,
            (self.height, self.width),
            1,
            rng,
        )
        return box


class ContrastiveCropSampler:
    """Crop sampler constrained by cached per-image bounding rects."""

    def __init__(
        self,
        policy: AugPolicy,
        spec: PatchSpec,
        rect_cache: dict[str, BoundingRect],
        max_tries: int = 10,
    ):
        self.policy = policy
        self.spec = spec
        self.rect_cache = rect_cache
        self.max_tries = max_tries
        self.fallbacks = 0
        self.misses = 0

    def __call__(self, record: ImageRecord, view_index: int, rng) -> CropBox:
        rect = self.rect_cache.get(record.source_id)
        if rect is None:
            self.misses += 1
            logger.warning(
                "no cached rect for %s; using the full image", record.source_id
            )
            rect = BoundingRect.full(self.spec.grid_h, self.spec.grid_w)
        box, fell_back = sample_crop(
            self.policy.scale_range,
            self.policy.aspect_range,
            rect,
            (self.spec.image_height, self.spec.image_width),
            self.spec.patch_size,
            rng,
            max_tries=self.max_tries,
        )
        if fell_back:
            self.fallbacks += 1
            logger.debug(
                "crop fallback for %s view %d after %d rejections",
                record.source_id,
                view_index,
                self.max_tries,
            )
        return box


def refresh_boxes(
    records: Sequence[ImageRecord],
    encoder: ViTEncoder,
    threshold: float,
    source: str,
    spec: PatchSpec,
    policy: AugPolicy,
    batch_size: int = 64,
) -> dict[str, BoundingRect]:
    """One gradient-free localization pass over the whole split.

    Each image is resized and normalized (no crop, no flip), scored, and the
    thresholded rect cached under its source id.
    """
    cache: dict[str, BoundingRect] = {}
    dtype = next(encoder.parameters()).dtype
    encoder_was_training = encoder.training
    encoder.eval()
    try:
        for start in range(0, len(records), batch_size):
            batch = records[start : start + batch_size]
            imgs = np.stack(
                [
                    normalize_image(
                        resize_pixels(
                            rec.pixels(), spec.image_height, spec.image_width
                        ),
                        policy,
                    )
                    for rec in batch
                ]
            )
            maps = compute_heatmap(
                encoder, torch.from_numpy(imgs).to(dtype), source, spec
            )
            for rec, heat in zip(batch, maps):
                cache[rec.source_id] = localize(heat, threshold)
    finally:
        encoder.train(encoder_was_training)
    return cache


def save_rect_cache(
    cache: dict[str, BoundingRect], path: str | Path, epoch: int
) -> None:
    """Persist the rect cache as crop_boxes.tsv."""
    lines = ["source_id\trow_min\trow_max\tcol_min\tcol_max\tepoch\n"]
    for source_id in sorted(cache):
        r = cache[source_id]
        lines.append(
            f"{source_id}\t{r.row_min}\t{r.row_max}\t{r.col_min}\t{r.col_max}\t{epoch}\n"
        )
    Path(path).write_text("".join(lines))


def load_rect_cache(path: str | Path) -> tuple[dict[str, BoundingRect], int]:
    """Read crop_boxes.tsv back into a rect cache; returns (cache, epoch)."""
    cache: dict[str, BoundingRect] = {}
    epoch = 0
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        source_id, r0, r1, c0, c1, ep = line.split("\t")
        cache[source_id] = BoundingRect(int(r0), int(r1), int(c0), int(c1))
        epoch = int(ep)
    return cache, epoch
