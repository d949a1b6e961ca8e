"""Dataset ingestion, patch tokenization, and two-view augmentation."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError
from .seeding import keyed_rng

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpeg", ".jpg", ".png")
DATA_ROOT_ENV = "CMAE_DATA_ROOT"


@dataclass
class ImageRecord:
    """One dataset image: uint8 pixels (possibly lazy), label, stable identity."""

    source_id: str
    label: int
    index: int
    path: Optional[str] = None
    _pixels: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_array(
        cls, pixels: np.ndarray, label: int, index: int, source_id: Optional[str] = None
    ) -> "ImageRecord":
        pixels = np.asarray(pixels, dtype=np.uint8)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got {pixels.shape}")
        return cls(
            source_id=source_id if source_id is not None else f"mem/{index}",
            label=label,
            index=index,
            _pixels=pixels,
        )

    def pixels(self) -> np.ndarray:
        """H×W×3 uint8 intensities; loaded from disk on first access."""
        if self._pixels is None:
            if self.path is None:
                raise ValueError(f"record {self.source_id} has neither pixels nor path")
            with Image.open(self.path) as img:
                self._pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        return self._pixels


@dataclass
class DatasetSplit:
    """Loaded split: a sequence of ImageRecord plus the class-name mapping."""

    records: list[ImageRecord]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> ImageRecord:
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, n: int) -> "DatasetSplit":
        """First n records in dataset order (class mapping unchanged)."""
        return DatasetSplit(self.records[:n], self.class_names)


def resolve_data_root(root: Optional[str]) -> str:
    root = root or os.environ.get(DATA_ROOT_ENV, "")
    if not root:
        raise ConfigError(
            f"no dataset root given and {DATA_ROOT_ENV} is not set"
        )
    if not os.path.isdir(root):
        raise ConfigError(f"dataset root {root!r} does not exist")
    return root


def load_dataset(root: Optional[str], split: str) -> DatasetSplit:
    """Load a class-subdirectory image tree.

    Layout is ``<root>/<split>/<class_dir>/**/*.{jpeg,jpg,png}``; ordering is
    lexicographic by path and labels follow sorted class-directory names.
    """
    root = resolve_data_root(root)
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise ConfigError(f"split directory {split_dir} does not exist")
    class_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"no classes found under {split_dir}")
    class_names = [d.name for d in class_dirs]
    records: list[ImageRecord] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            p
            for p in class_dir.rglob("*")
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            logger.warning("class directory %s holds no images", class_dir)
        for p in files:
            records.append(
                ImageRecord(
                    source_id=p.relative_to(root).as_posix(),
                    label=label,
                    index=len(records),
                    path=str(p),
                )
            )
    return DatasetSplit(records=records, class_names=class_names)


def write_class_manifest(split: DatasetSplit, path: str | Path) -> None:
    """Emit classes.txt, one class name per line in label order."""
    Path(path).write_text("".join(f"{name}\n" for name in split.class_names))


@dataclass(frozen=True)
class PatchSpec:
    """Token grid geometry for square patches."""

    patch_size: int
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("patch size and grid dims must be positive")

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchSpec":
        if height % patch_size or width % patch_size:
            raise ValueError(
                f"image {height}x{width} not divisible by patch size {patch_size}"
            )
        return cls(patch_size, height // patch_size, width // patch_size)

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def token_pixels(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def image_height(self) -> int:
        return self.grid_h * self.patch_size

    @property
    def image_width(self) -> int:
        return self.grid_w * self.patch_size


def patchify(batch: torch.Tensor, spec: PatchSpec) -> torch.Tensor:
    """B×3×H×W images to B×N×(P²·3) pixel tokens, row-major grid order.

    Within a token, pixels are raster-ordered with channels last.
    """
    B, C, H, W = batch.shape
    if C != 3 or H != spec.image_height or W != spec.image_width:
        raise ValueError(
            f"batch {tuple(batch.shape)} does not match spec "
            f"(3, {spec.image_height}, {spec.image_width})"
        )
    P = spec.patch_size
    x = batch.reshape(B, C, spec.grid_h, P, spec.grid_w, P)
    x = x.permute(0, 2, 4, 3, 5, 1)  # B, gh, gw, P, P, C
    return x.reshape(B, spec.num_tokens, spec.token_pixels)


def unpatchify(tokens: torch.Tensor, spec: PatchSpec) -> torch.Tensor:
    """Exact inverse of :func:`patchify`."""
    B, N, D = tokens.shape
    if N != spec.num_tokens or D != spec.token_pixels:
        raise ValueError(
            f"tokens {tuple(tokens.shape)} do not match spec "
            f"({spec.num_tokens}, {spec.token_pixels})"
        )
    P = spec.patch_size
    x = tokens.reshape(B, spec.grid_h, spec.grid_w, P, P, 3)
    x = x.permute(0, 5, 1, 3, 2, 4)  # B, C, gh, P, gw, P
    return x.reshape(B, 3, spec.image_height, spec.image_width)


@dataclass(frozen=True)
class AugPolicy:
    """Per-view augmentation: crop geometry, flip, channel normalization."""

    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.2, 1.0)
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    crop_mode: str = "random"  # or "contrastive"

    def __post_init__(self) -> None:
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"scale range must lie in (0, 1], got {self.scale_range}")
        alo, ahi = self.aspect_range
        if not (0.0 < alo <= ahi):
            raise ValueError(f"aspect range must be positive, got {self.aspect_range}")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError(f"flip prob must lie in [0, 1], got {self.flip_prob}")
        if self.crop_mode not in ("random", "contrastive"):
            raise ValueError(f"unknown crop mode {self.crop_mode!r}")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be positive")


@dataclass
class ViewPair:
    """Two independently augmented views of the same batch, index-aligned."""

    view_q: torch.Tensor  # B×3×H×W, normalized
    view_k: torch.Tensor
    box_q: list
    box_k: list


def compute_norm_stats(
    records: Sequence[ImageRecord], cap: Optional[int] = None
) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Per-channel mean/std over [0,1]-scaled pixels of the given records."""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    use = records if cap is None else records[:cap]
    for rec in use:
        px = rec.pixels().astype(np.float64) / 255.0
        total += px.sum(axis=(0, 1))
        total_sq += (px**2).sum(axis=(0, 1))
        count += px.shape[0] * px.shape[1]
    if count == 0:
        raise ConfigError("cannot compute normalization stats over zero pixels")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 1e-12)
    std = np.sqrt(var)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def normalize_image(pixels: np.ndarray, policy: AugPolicy) -> np.ndarray:
    """uint8 H×W×3 to normalized float32 3×H×W."""
    x = pixels.astype(np.float32) / 255.0
    mean = np.asarray(policy.mean, dtype=np.float32)
    std = np.asarray(policy.std, dtype=np.float32)
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def denormalize_view(view: torch.Tensor, policy: AugPolicy) -> torch.Tensor:
    """Invert channel normalization, returning [0,1]-scaled 3×H×W floats."""
    mean = torch.tensor(policy.mean, dtype=view.dtype).view(-1, 1, 1)
    std = torch.tensor(policy.std, dtype=view.dtype).view(-1, 1, 1)
    return view * std + mean


def resize_pixels(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear uint8 resize; identity when already at the target size."""
    if pixels.shape[:2] == (height, width):
        return pixels
    img = Image.fromarray(pixels).resize((width, height), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def _augment_one(
    record: ImageRecord,
    policy: AugPolicy,
    crop_sampler: Callable,
    height: int,
    width: int,
    rng: np.random.Generator,
    view_index: int,
):
    base = resize_pixels(record.pixels(), height, width)
    box = crop_sampler(record, view_index, rng)
    if not (0 <= box.x1 < box.x2 <= width and 0 <= box.y1 < box.y2 <= height):
        raise ValueError(
            f"crop box {box} outside {width}x{height} image (sampler contract)"
        )
    crop = base[box.y1 : box.y2, box.x1 : box.x2]
    crop = resize_pixels(crop, height, width)
    if rng.random() < policy.flip_prob:
        crop = crop[:, ::-1]
    return normalize_image(np.ascontiguousarray(crop), policy), box


def make_views(
    records: Sequence[ImageRecord],
    policy: AugPolicy,
    crop_sampler: Callable,
    height: int,
    width: int,
    seed: int,
    epoch: int,
    dtype: torch.dtype = torch.float32,
) -> ViewPair:
    """Two independent augmentations per record.

    Randomness is a pure function of (seed, epoch, record index, view index),
    so output is identical regardless of batching or worker layout.
    """
    views = ([], [])
    boxes = ([], [])
    for rec in records:
        for v in range(2):
            rng = keyed_rng(seed, "aug", epoch, rec.index, v)
            img, box = _augment_one(
                rec, policy, crop_sampler, height, width, rng, v
            )
            views[v].append(img)
            boxes[v].append(box)
    view_q = torch.from_numpy(np.stack(views[0])).to(dtype)
    view_k = torch.from_numpy(np.stack(views[1])).to(dtype)
    return ViewPair(view_q=view_q, view_k=view_k, box_q=boxes[0], box_k=boxes[1])
