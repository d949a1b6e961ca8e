"""The three training losses and their weighted combination."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import MaskPlan

logger = logging.getLogger(__name__)

LOCATION_EPS = 1e-8


@dataclass
class ContrastiveBatch:
    """Index-aligned positive pairs with in-batch negatives."""

    z_q: torch.Tensor  # (B, d)
    z_k: torch.Tensor  # (B, d)
    temperature: float

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.z_q.shape != self.z_k.shape:
            raise ValueError(
                f"z_q {tuple(self.z_q.shape)} and z_k {tuple(self.z_k.shape)} disagree"
            )


def info_nce(batch: ContrastiveBatch) -> torch.Tensor:
    """Mean over i of −log softmax over {z_qᵢ·z_kⱼ/τ}ⱼ at the aligned pair.

    The momentum-branch outputs of the other batch images act as negatives;
    a batch of one has no negatives and scores zero.
    """
    logits = batch.z_q @ batch.z_k.t() / batch.temperature
    targets = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, targets)


class LocationHead(nn.Module):
    """Two affine layers scoring each visible token against all grid slots.

    Outputs raw scores; the loss regresses them directly against one-hot
    targets. Inputs must be patch tokens only (no cls).
    """

    def __init__(self, in_dim: int, num_tokens: int, hidden_dim: int = 0):
        super().__init__()
        hidden = hidden_dim or in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_tokens)
        self.num_tokens = num_tokens

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1] > self.num_tokens:
            raise ValueError(
                f"{features.shape[1]} tokens exceed the {self.num_tokens}-slot grid; "
                "strip the cls token before location prediction"
            )
        return self.fc2(F.gelu(self.fc1(features)))


def location_targets(plan: MaskPlan, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """One-hot grid-slot targets for the visible tokens, (B, visible, N)."""
    return F.one_hot(plan.visible, num_classes=plan.num_tokens).to(dtype)


def _check_one_hot(targets: torch.Tensor) -> None:
    is_binary = ((targets == 0) | (targets == 1)).all()
    rows_sum_one = (targets.sum(dim=-1) == 1).all()
    if not (is_binary and rows_sum_one):
        raise ValueError("location targets must be one-hot rows")


def location_loss(
    predictions: torch.Tensor,
    targets: torch.Tensor,
    squared: bool = False,
) -> torch.Tensor:
    """Per-token Euclidean distance to the one-hot target, averaged over
    tokens and batch.

    The unsquared norm carries a 1e-8 guard inside the root so its gradient
    is defined at zero residual (flooring the loss at 1e-4 when exact).
    ``squared`` trades the stated form for a smooth squared distance.
    """
    if predictions.shape != targets.shape:
        raise ValueError(
            f"predictions {tuple(predictions.shape)} and targets "
            f"{tuple(targets.shape)} disagree"
        )
    _check_one_hot(targets)
    sq = ((predictions - targets) ** 2).sum(dim=-1)
    if squared:
        return sq.mean()
    return torch.sqrt(sq + LOCATION_EPS).mean()


def normalize_patch_targets(tokens: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-token mean/std normalization of pixel targets."""
    mean = tokens.mean(dim=-1, keepdim=True)
    var = tokens.var(dim=-1, keepdim=True, unbiased=False)
    return (tokens - mean) / torch.sqrt(var + eps)


def reconstruction_loss(
    predictions: torch.Tensor,
    targets: torch.Tensor,
    plan: MaskPlan,
) -> torch.Tensor:
    """Mean squared error over masked-token entries only.

    Targets must already be in the intended space (raw or per-patch
    normalized pixels); visible slots never contribute.
    """
    if predictions.shape != targets.shape:
        raise ValueError(
            f"predictions {tuple(predictions.shape)} and targets "
            f"{tuple(targets.shape)} disagree"
        )
    if plan.num_masked == 0:
        logger.warning("empty masked set; reconstruction loss is zero")
        return predictions.sum() * 0.0
    idx = plan.masked.to(predictions.device)
    idx = idx.unsqueeze(-1).expand(-1, -1, predictions.shape[-1])
    diff = torch.gather(predictions, 1, idx) - torch.gather(targets, 1, idx)
    return (diff**2).mean()


@dataclass(frozen=True)
class LossWeights:
    contrastive: float = 1.0
    location: float = 1.0
    reconstruction: float = 1.0

    def __post_init__(self) -> None:
        if min(self.contrastive, self.location, self.reconstruction) < 0:
            raise ValueError("loss weights must be non-negative")


def total_loss(
    contrastive: torch.Tensor,
    location: torch.Tensor,
    reconstruction: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted sum of the three components."""
    return (
        weights.contrastive * contrastive
        + weights.location * location
        + weights.reconstruction * reconstruction
    )


@dataclass(frozen=True)
class LossReport:
    """Scalar component values of one step, for logging."""

    contrastive: float
    location: float
    reconstruction: float
    total: float
