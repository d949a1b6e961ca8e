"""Random token masking, visible/masked splitting, and order-restoring merge."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


def visible_count(num_tokens: int, mask_ratio: float) -> int:
    """Number of tokens kept visible at a given mask ratio (floor convention)."""
    return int(math.floor(num_tokens * (1.0 - mask_ratio)))


@dataclass(frozen=True)
class MaskPlan:
    """Bookkeeping for one batch of random masks.

    ``perm`` holds one independent permutation of ``[0, num_tokens)`` per batch
    row. The first ``num_visible`` entries of each row are the visible token
    indices, the remainder the masked ones.
    """

    num_tokens: int
    mask_ratio: float
    perm: torch.Tensor  # (B, N) int64

    def __post_init__(self) -> None:
        if self.perm.ndim != 2 or self.perm.shape[1] != self.num_tokens:
            raise ValueError(
                f"perm must be (B, {self.num_tokens}), got {tuple(self.perm.shape)}"
            )
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.num_visible < 1:
            raise ValueError(
                f"mask ratio {self.mask_ratio} leaves no visible token for N={self.num_tokens}"
            )

    @property
    def batch(self) -> int:
        return self.perm.shape[0]

    @property
    def num_visible(self) -> int:
        return visible_count(self.num_tokens, self.mask_ratio)

    @property
    def num_masked(self) -> int:
        return self.num_tokens - self.num_visible

    @property
    def visible(self) -> torch.Tensor:
        """Visible token indices, shape (B, num_visible)."""
        return self.perm[:, : self.num_visible]

    @property
    def masked(self) -> torch.Tensor:
        """Masked token indices, shape (B, num_masked)."""
        return self.perm[:, self.num_visible :]

    @property
    def restore_index(self) -> torch.Tensor:
        """Index that maps perm-ordered sequences back to original order."""
        return torch.argsort(self.perm, dim=1)

    def masked_flags(self) -> torch.Tensor:
        """Boolean (B, N) tensor, True at masked slots."""
        flags = torch.zeros(self.batch, self.num_tokens, dtype=torch.bool)
        flags.scatter_(1, self.masked, True)
        return flags


@dataclass(frozen=True)
class SplitTokens:
    """Visible/masked partition of a token sequence, perm-ordered within parts."""

    visible: torch.Tensor  # (B, num_visible, D)
    masked: torch.Tensor  # (B, num_masked, D)
    plan: MaskPlan


def make_mask(
    num_tokens: int,
    mask_ratio: float,
    rng: np.random.Generator,
    batch: int = 1,
) -> MaskPlan:
    """Draw independent uniform-random mask permutations for a batch.

    Visible count follows the floor convention ``⌊N·(1−ratio)⌋`` and must be
    at least one.
    """
    if num_tokens < 1:
        raise ValueError("need at least one token")
    if not (0.0 <= mask_ratio < 1.0):
        raise ValueError(f"mask ratio must lie in [0, 1), got {mask_ratio}")
    if visible_count(num_tokens, mask_ratio) < 1:
        raise ValueError(
            f"mask ratio {mask_ratio} leaves no visible token for N={num_tokens}"
        )
    perms = np.stack([rng.permutation(num_tokens) for _ in range(batch)])
    return MaskPlan(num_tokens, mask_ratio, torch.from_numpy(perms).long())


def split(tokens: torch.Tensor, plan: MaskPlan) -> SplitTokens:
    """Gather visible and masked tokens per the plan's permutation order."""
    if tokens.ndim != 3 or tokens.shape[0] != plan.batch or tokens.shape[1] != plan.num_tokens:
        raise ValueError(
            f"tokens must be ({plan.batch}, {plan.num_tokens}, D), got {tuple(tokens.shape)}"
        )
    dim = tokens.shape[-1]
    vis_idx = plan.visible.to(tokens.device).unsqueeze(-1).expand(-1, -1, dim)
    msk_idx = plan.masked.to(tokens.device).unsqueeze(-1).expand(-1, -1, dim)
    return SplitTokens(
        visible=torch.gather(tokens, 1, vis_idx),
        masked=torch.gather(tokens, 1, msk_idx),
        plan=plan,
    )


def restore_merge(
    part_a: torch.Tensor,
    part_b: torch.Tensor,
    plan: MaskPlan,
    stop_grad_b: bool = False,
) -> torch.Tensor:
    """Concatenate perm-ordered parts and restore original token order.

    Output index j holds the feature of original token j. With ``stop_grad_b``
    the second part is detached, so no gradient reaches its producer.
    """
    if part_a.shape[1] + part_b.shape[1] != plan.num_tokens:
        raise ValueError(
            f"part lengths {part_a.shape[1]}+{part_b.shape[1]} != N={plan.num_tokens}"
        )
    if part_a.shape[1] != plan.num_visible:
        raise ValueError(
            f"part_a length {part_a.shape[1]} != visible count {plan.num_visible}"
        )
    if stop_grad_b:
        part_b = part_b.detach()
    merged = torch.cat([part_a, part_b], dim=1)
    dim = merged.shape[-1]
    idx = plan.restore_index.to(merged.device).unsqueeze(-1).expand(-1, -1, dim)
    return torch.gather(merged, 1, idx)
