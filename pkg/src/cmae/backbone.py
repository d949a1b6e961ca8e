"""ViT encoder, momentum twin, projection heads, and the momentum update."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import MaskPlan, restore_merge, split


def sincos_pos_embed_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    """Fixed sine/cosine embedding of scalar positions, shape (len, dim)."""
    if dim % 2 != 0:
        raise ValueError("1d sincos embedding needs an even dim")
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / (10000.0**omega)
    angles = np.einsum("p,d->pd", positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed_2d(dim: int, grid_h: int, grid_w: int) -> torch.Tensor:
    """Fixed 2D sine/cosine grid embedding, shape (grid_h*grid_w, dim).

    Half the channels encode the row coordinate, half the column, in row-major
    token order to match ``datapipe.patchify``.
    """
    if dim % 4 != 0:
        raise ValueError("2d sincos embedding needs dim divisible by 4")
    rows, cols = np.meshgrid(
        np.arange(grid_h), np.arange(grid_w), indexing="ij"
    )
    emb_r = sincos_pos_embed_1d(dim // 2, rows.reshape(-1))
    emb_c = sincos_pos_embed_1d(dim // 2, cols.reshape(-1))
    return torch.from_numpy(np.concatenate([emb_r, emb_c], axis=1)).float()


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, need_weights: bool = False
    ) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        B, L, C = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, C)
        out = self.proj(out)
        return out, (attn if need_weights else None)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(
        self, x: torch.Tensor, need_weights: bool = False
    ) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        y, weights = self.attn(self.norm1(x), need_weights=need_weights)
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, weights


@dataclass(frozen=True)
class ViTConfig:
    depth: int
    dim: int
    heads: int
    grid_h: int
    grid_w: int
    patch_size: int
    mlp_ratio: float = 4.0
    cls_token: bool = True
    pos_embed: str = "sincos"  # or "learned"

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pos_embed not in ("sincos", "learned"):
            raise ValueError(f"unknown pos_embed mode {self.pos_embed!r}")

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def token_pixels(self) -> int:
        return self.patch_size * self.patch_size * 3


class ViTEncoder(nn.Module):
    """Transformer encoder over raw pixel tokens.

    Tokens arrive with their original grid indices so the right positional
    embedding is added even for shuffled or partial sequences.
    """

    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Linear(config.token_pixels, config.dim)
        if config.pos_embed == "learned":
            self.pos_embed = nn.Parameter(
                torch.zeros(config.num_tokens, config.dim)
            )
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
        else:
            self.register_buffer(
                "pos_embed",
                sincos_pos_embed_2d(config.dim, config.grid_h, config.grid_w),
            )
        if config.cls_token:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, config.dim))
            nn.init.trunc_normal_(self.cls_token, std=0.02)
        else:
            self.cls_token = None
        self.blocks = nn.ModuleList(
            TransformerBlock(config.dim, config.heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim)

    def has_cls(self) -> bool:
        return self.cls_token is not None

    def _embed(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        if positions.min() < 0 or positions.max() >= self.config.num_tokens:
            raise ValueError(
                f"position index out of [0, {self.config.num_tokens})"
            )
        x = self.patch_embed(tokens)
        x = x + self.pos_embed[positions].to(x.dtype)
        if self.cls_token is not None:
            cls = self.cls_token.expand(x.shape[0], -1, -1).to(x.dtype)
            x = torch.cat([cls, x], dim=1)
        return x

    def forward(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Encode pixel tokens; output is final-normed, cls first when present."""
        x = self._embed(tokens, positions)
        for block in self.blocks:
            x, _ = block(x)
        return self.norm(x)

    def forward_intermediate(
        self, tokens: torch.Tensor, positions: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        """Return (normed output, last-block output before final norm, last attention)."""
        x = self._embed(tokens, positions)
        weights = None
        for i, block in enumerate(self.blocks):
            x, weights = block(x, need_weights=(i == len(self.blocks) - 1))
        return self.norm(x), x, weights

    def strip_cls(self, features: torch.Tensor) -> torch.Tensor:
        return features[:, 1:] if self.has_cls() else features


@dataclass(frozen=True)
class ProjectionSpec:
    out_dim: int = 128
    hidden_dim: int = 0  # 0 means same as encoder dim
    pooling: str = "mean"  # or "cls"
    normalize: bool = True

    def __post_init__(self) -> None:
        if self.out_dim < 2:
            raise ValueError("projection output dim must be at least 2")
        if self.pooling not in ("mean", "cls"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


class ProjectionHead(nn.Module):
    """Two-layer head mapping pooled encoder features to the contrastive space."""

    def __init__(self, in_dim: int, spec: ProjectionSpec):
        super().__init__()
        hidden = spec.hidden_dim or in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, spec.out_dim)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(pooled)))


def project(
    head: ProjectionHead,
    features: torch.Tensor,
    pooling: str = "mean",
    normalize: bool = True,
) -> torch.Tensor:
    """Pool a token sequence, project, and optionally L2-normalize.

    ``cls`` pooling takes index 0 of the sequence; callers must place the cls
    feature there.
    """
    if pooling == "mean":
        pooled = features.mean(dim=1)
    elif pooling == "cls":
        pooled = features[:, 0]
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    z = head(pooled)
    if normalize:
        z = F.normalize(z, dim=-1)
    return z


@dataclass
class EncoderState:
    """Online encoder/projector plus their gradient-free momentum twins."""

    encoder: ViTEncoder
    momentum_encoder: ViTEncoder
    projector: ProjectionHead
    momentum_projector: ProjectionHead
    momentum: float
    projection: ProjectionSpec

    @classmethod
    def create(
        cls,
        config: ViTConfig,
        projection: ProjectionSpec,
        momentum: float,
        dtype: torch.dtype = torch.float32,
    ) -> "EncoderState":
        if not (0.0 <= momentum <= 1.0):
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        encoder = ViTEncoder(config).to(dtype)
        projector = ProjectionHead(config.dim, projection).to(dtype)
        momentum_encoder = copy.deepcopy(encoder)
        momentum_projector = copy.deepcopy(projector)
        for module in (momentum_encoder, momentum_projector):
            for p in module.parameters():
                p.requires_grad_(False)
        return cls(
            encoder=encoder,
            momentum_encoder=momentum_encoder,
            projector=projector,
            momentum_projector=momentum_projector,
            momentum=momentum,
            projection=projection,
        )

    def online_parameters(self):
        yield from self.encoder.parameters()
        yield from self.projector.parameters()


def momentum_update(state: EncoderState, momentum: Optional[float] = None) -> EncoderState:
    """EMA update of the momentum twins, in place: θ_M ← m·θ_M + (1−m)·θ."""
    m = state.momentum if momentum is None else momentum
    if not (0.0 <= m <= 1.0):
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    with torch.no_grad():
        pairs = [
            (state.encoder, state.momentum_encoder),
            (state.projector, state.momentum_projector),
        ]
        for online, target in pairs:
            for p, mp in zip(online.parameters(), target.parameters()):
                mp.mul_(m).add_(p, alpha=1.0 - m)
    return state


class BranchOutput(NamedTuple):
    z_q: torch.Tensor
    z_k: torch.Tensor
    q1_features: torch.Tensor  # online pass over visible tokens, cls kept if configured


def run_contrastive_branches(
    state: EncoderState,
    tokens_q: torch.Tensor,
    tokens_k: torch.Tensor,
    plan_q: MaskPlan,
    plan_k: MaskPlan,
) -> BranchOutput:
    """Run both contrastive branches over one pair of token sequences.

    The online encoder sees the query view's visible tokens with gradient and
    its masked tokens without; the momentum twins handle the key view entirely
    without gradient. Merged sequences are restored to original token order
    before projection, detaching the masked online part.
    """
    enc = state.encoder
    sq = split(tokens_q, plan_q)
    sk = split(tokens_k, plan_k)

    q1 = enc(sq.visible, plan_q.visible)
    with torch.no_grad():
        q2 = enc(sq.masked, plan_q.masked)
        k1 = state.momentum_encoder(sk.visible, plan_k.visible)
        k2 = state.momentum_encoder(sk.masked, plan_k.masked)

    h1 = restore_merge(
        enc.strip_cls(q1), enc.strip_cls(q2), plan_q, stop_grad_b=True
    )
    with torch.no_grad():
        h2 = restore_merge(
            state.momentum_encoder.strip_cls(k1),
            state.momentum_encoder.strip_cls(k2),
            plan_k,
        )

    spec = state.projection
    if spec.pooling == "cls":
        if not enc.has_cls():
            raise ValueError("cls pooling requires an encoder with a cls token")
        h1 = torch.cat([q1[:, :1], h1], dim=1)
        h2 = torch.cat([k1[:, :1], h2], dim=1)
    z_q = project(state.projector, h1, spec.pooling, spec.normalize)
    with torch.no_grad():
        z_k = project(state.momentum_projector, h2, spec.pooling, spec.normalize)
    return BranchOutput(z_q=z_q, z_k=z_k, q1_features=q1)
