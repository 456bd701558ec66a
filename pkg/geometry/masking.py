import logging
import math
from dataclasses import dataclass

import torch

from exceptions import RejectedInputError
from models import ScheduleKind
from schemas import MaskSchedule
from substrate.tensor_ops import Rng, sample_uniform

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskPlan:
    """Per-image mask over vision positions (True = masked)."""
    mask: torch.Tensor
    ratio_used: float
    image_id: int = 0

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    @property
    def masked_positions(self) -> torch.Tensor:
        return self.mask.nonzero().flatten()


def ratio_at(schedule: MaskSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise RejectedInputError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == ScheduleKind.constant:
        return schedule.target_ratio
    # cosine ramp from 0 up to the target ratio
    return schedule.target_ratio * 0.5 * (1.0 - math.cos(math.pi * step / schedule.total_steps))


def draw_mask(rng: Rng, n_tokens: int, ratio: float, image_id: int = 0) -> MaskPlan:
    """Mask each of ``n_tokens`` positions independently with probability ``ratio``."""
    if n_tokens <= 0:
        raise RejectedInputError("cannot draw a mask over zero vision tokens")
    if not 0.0 <= ratio <= 1.0:
        raise RejectedInputError(f"mask ratio must lie in [0, 1], got {ratio}")
    mask = sample_uniform(rng, (n_tokens,)) < ratio
    return MaskPlan(mask=mask, ratio_used=ratio, image_id=image_id)


def apply_mask(vision_tokens: torch.Tensor, plan: MaskPlan, mask_embedding: torch.Tensor) -> torch.Tensor:
    """Replace masked rows with ``mask_embedding``; other rows pass through untouched."""
    if vision_tokens.dim() != 2:
        raise RejectedInputError(f"vision tokens must be [N, D], got {tuple(vision_tokens.shape)}")
    n, d = vision_tokens.shape
    if plan.mask.shape != (n,):
        raise RejectedInputError(f"mask length {tuple(plan.mask.shape)} does not match {n} vision tokens")
    if mask_embedding.shape != (d,):
        raise RejectedInputError(f"mask embedding shape {tuple(mask_embedding.shape)} does not match D={d}")
    return torch.where(plan.mask.unsqueeze(-1), mask_embedding.expand(n, d), vision_tokens)
