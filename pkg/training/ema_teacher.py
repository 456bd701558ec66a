import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict

import torch

from exceptions import RejectedInputError, TeacherFault
from geometry.spatial import AttentionLayout
from models import EmaScheduleKind, MicroMLLM
from schemas import EmaConfig

logger = logging.getLogger(__name__)

# Parameters outside the EMA average; copied by value at every teacher update.
COPIED_PREFIXES = ("patch_projector.",)


@dataclass
class TeacherState:
    params: MicroMLLM
    last_update_step: int = 0
    updates: int = 0


def init_teacher(student: MicroMLLM) -> TeacherState:
    """Deep copy of the student, frozen: no teacher tensor ever requires grad."""
    teacher = copy.deepcopy(student)
    for param in teacher.parameters():
        param.requires_grad_(False)
    teacher.eval()
    logger.info(
        "EMA teacher covers all decoder, head and embedding weights; %s copied by value at each update",
        ", ".join(p.rstrip(".") for p in COPIED_PREFIXES),
    )
    return TeacherState(params=teacher)


def decay_at(cfg: EmaConfig, step: int) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise RejectedInputError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.schedule == EmaScheduleKind.constant:
        return cfg.decay
    return cfg.decay + (1.0 - cfg.decay) * 0.5 * (1.0 - math.cos(math.pi * step / cfg.total_steps))


def _matched_tensors(teacher: MicroMLLM, student: MicroMLLM) -> Dict[str, tuple]:
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        missing = sorted(set(t_params) ^ set(s_params))
        raise TeacherFault(f"teacher/student parameter names differ: {missing[:5]}")
    pairs = {}
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise TeacherFault(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        pairs[name] = (t, s)
    return pairs


@torch.no_grad()
def ema_blend(teacher: MicroMLLM, student: MicroMLLM, decay: float) -> None:
    """teacher <- decay * teacher + (1 - decay) * student, projector copied."""
    for name, (t, s) in _matched_tensors(teacher, student).items():
        if name.startswith(COPIED_PREFIXES):
            t.copy_(s)
        else:
            t.mul_(decay).add_(s.detach() * (1.0 - decay))


def maybe_update(teacher: TeacherState, student: MicroMLLM, cfg: EmaConfig, step: int) -> TeacherState:
    if step < teacher.last_update_step:
        raise RejectedInputError(f"step {step} precedes the last teacher update at {teacher.last_update_step}")
    if step - teacher.last_update_step < cfg.update_every:
        return teacher
    decay = decay_at(cfg, min(step, cfg.total_steps))
    ema_blend(teacher.params, student, decay)
    teacher.last_update_step = step
    teacher.updates += 1
    logger.debug("teacher update %d at step %d (decay %.5f)", teacher.updates, step, decay)
    return teacher


@torch.no_grad()
def teacher_visual_logits(teacher: TeacherState, tokens: torch.Tensor, layout: AttentionLayout) -> torch.Tensor:
    """Gradient-free targets Z^ for the vision positions of ``layout``."""
    targets = teacher.params(tokens.detach(), layout).visual_logits
    assert not targets.requires_grad
    return targets
