"""Weakened-decoder families for pixel reconstruction: transformer, token-wise
MLP, depthwise convolutional, and hybrids, all behind one interface."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datapipe import PatchSpec
from .masking import MaskPlan, restore_merge
from .backbone import TransformerBlock, sincos_pos_embed_2d

DECODER_KINDS = ("transformer", "mlp", "conv", "hybrid_mlp", "hybrid_conv")


@dataclass(frozen=True)
class DecoderSpec:
    kind: str
    depth: int
    dim: int
    heads: int = 8
    dense_conv: bool = False  # plain 3x3 instead of depthwise separable
    tag: str = ""  # sweep-series marker, carried through reports

    def __post_init__(self) -> None:
        if self.kind not in DECODER_KINDS:
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if self.depth < 1:
            raise ValueError("decoder depth must be at least 1")
        if self.kind.startswith("hybrid") and self.depth < 3:
            raise ValueError(
                "hybrid decoders need depth >= 3 (first and last blocks stay transformer)"
            )
        if self.kind in ("transformer", "hybrid_mlp", "hybrid_conv"):
            if self.dim % self.heads != 0:
                raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


class TokenMlpBlock(nn.Module):
    """Token-wise residual MLP; no cross-token mixing."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class ConvBlock(nn.Module):
    """Residual conv block over the token grid: 3x3 (stride 1, pad 1) then 1x1.

    The 3x3 is depthwise by default; ``dense`` switches to a full convolution.
    """

    def __init__(self, dim: int, grid_h: int, grid_w: int, dense: bool = False):
        super().__init__()
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.norm = nn.LayerNorm(dim)
        groups = 1 if dense else dim
        self.spatial = nn.Conv2d(dim, dim, 3, stride=1, padding=1, groups=groups)
        self.pointwise = nn.Conv2d(dim, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, C = x.shape
        y = self.norm(x)
        y = y.transpose(1, 2).reshape(B, C, self.grid_h, self.grid_w)
        y = self.pointwise(F.gelu(self.spatial(y)))
        y = y.reshape(B, C, N).transpose(1, 2)
        return x + y


def _build_blocks(spec: DecoderSpec, grid_h: int, grid_w: int) -> nn.ModuleList:
    def transformer() -> nn.Module:
        return TransformerBlock(spec.dim, spec.heads)

    def mlp() -> nn.Module:
        return TokenMlpBlock(spec.dim)

    def conv() -> nn.Module:
        return ConvBlock(spec.dim, grid_h, grid_w, dense=spec.dense_conv)

    if spec.kind == "transformer":
        makers = [transformer] * spec.depth
    elif spec.kind == "mlp":
        makers = [mlp] * spec.depth
    elif spec.kind == "conv":
        makers = [conv] * spec.depth
    else:
        middle = mlp if spec.kind == "hybrid_mlp" else conv
        makers = [transformer] + [middle] * (spec.depth - 2) + [transformer]
    return nn.ModuleList(make() for make in makers)


class Decoder(nn.Module):
    """MAE-style decoder: project visible features, fill mask tokens, add
    fixed positional embeddings, run the block stack, predict pixels."""

    def __init__(self, spec: DecoderSpec, patch_spec: PatchSpec, encoder_dim: int):
        super().__init__()
        self.spec = spec
        self.patch_spec = patch_spec
        self.embed = nn.Linear(encoder_dim, spec.dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, spec.dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.register_buffer(
            "pos_embed",
            sincos_pos_embed_2d(spec.dim, patch_spec.grid_h, patch_spec.grid_w),
        )
        self.blocks = _build_blocks(spec, patch_spec.grid_h, patch_spec.grid_w)
        self.norm = nn.LayerNorm(spec.dim)
        self.head = nn.Linear(spec.dim, patch_spec.token_pixels)

    def decode_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Block stack + norm + pixel head over an already-embedded sequence."""
        for block in self.blocks:
            if isinstance(block, TransformerBlock):
                x, _ = block(x)
            else:
                x = block(x)
        return self.head(self.norm(x))


def build_decoder(
    spec: DecoderSpec, patch_spec: PatchSpec, encoder_dim: int
) -> Decoder:
    return Decoder(spec, patch_spec, encoder_dim)


def decode(
    decoder: Decoder, visible_features: torch.Tensor, plan: MaskPlan
) -> torch.Tensor:
    """Predict per-token pixels (B×N×(P²·3)) from visible-token features.

    Visible features are projected to decoder width, scattered back to their
    original slots with shared mask tokens in the gaps, and positioned with
    the fixed embeddings before decoding.
    """
    if visible_features.shape[1] != plan.num_visible:
        raise ValueError(
            f"expected {plan.num_visible} visible features, got {visible_features.shape[1]}"
        )
    x = decoder.embed(visible_features)
    fill = decoder.mask_token.to(x.dtype).expand(x.shape[0], plan.num_masked, -1)
    x = restore_merge(x, fill, plan)
    x = x + decoder.pos_embed.to(x.dtype)
    return decoder.decode_tokens(x)


def _transformer_block_params(dim: int, mlp_ratio: float = 4.0) -> int:
    hidden = int(dim * mlp_ratio)
    norms = 2 * (2 * dim)
    attn = (dim * 3 * dim + 3 * dim) + (dim * dim + dim)
    mlp = (dim * hidden + hidden) + (hidden * dim + dim)
    return norms + attn + mlp


def _mlp_block_params(dim: int) -> int:
    return 2 * dim + (dim * 4 * dim + 4 * dim) + (4 * dim * dim + dim)


def _conv_block_params(dim: int, dense: bool) -> int:
    spatial = (9 * dim * dim if dense else 9 * dim) + dim
    return 2 * dim + spatial + (dim * dim + dim)


def param_count(spec: DecoderSpec, patch_spec: PatchSpec, encoder_dim: int) -> int:
    """Closed-form count of learnable scalars in the decoder this spec builds.

    Positional embeddings are fixed buffers and contribute nothing; the input
    projection, mask token, final norm, and pixel head are all included.
    """
    d = spec.dim
    out = patch_spec.token_pixels
    total = (encoder_dim * d + d) + d + (2 * d) + (d * out + out)
    if spec.kind == "transformer":
        total += spec.depth * _transformer_block_params(d)
    elif spec.kind == "mlp":
        total += spec.depth * _mlp_block_params(d)
    elif spec.kind == "conv":
        total += spec.depth * _conv_block_params(d, spec.dense_conv)
    elif spec.kind == "hybrid_mlp":
        total += 2 * _transformer_block_params(d)
        total += (spec.depth - 2) * _mlp_block_params(d)
    else:
        total += 2 * _transformer_block_params(d)
        total += (spec.depth - 2) * _conv_block_params(d, spec.dense_conv)
    return total
