"""
Training objectives with analytic gradients
===========================================
Every loss returns a ``LossTerm``: the scalar value plus its gradient with
respect to the student logits it was given. Teacher logits are read through
``.detach()`` and never receive a gradient. Values and gradients are
computed in float64; gradients are cast back to the logits' dtype.

    lm_loss    mean next-token NLL over the answer rows (rows P..T-1)
    mim_loss   teacher/student cross-entropy over masked positions, / |P_M|
    ga_loss    ||G(Z~) - G(Z^)||_F^2
    cga_loss   ||max(0, G(Z~) - G(Z^))||_F^2

Gram losses accept stacked images [..., N, D_v]; each image gets its own
N x N Gram matrix and the per-image losses are summed.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Union

import torch
import torch.nn.functional as F

from exceptions import RejectedInputError
from geometry.masking import MaskPlan
from schemas import LossWeights, Temperatures
from substrate.tensor_ops import l2_normalize, log_softmax, softmax

logger = logging.getLogger(__name__)

LOSS_NAMES = ("lm", "mim", "ga", "cga")


@dataclass(frozen=True)
class LossTerm:
    value: float
    grad: torch.Tensor


@dataclass
class LossReport:
    lm: float = 0.0
    mim: float = 0.0
    ga: float = 0.0
    cga: float = 0.0
    total: float = 0.0
    grads: Dict[str, torch.Tensor] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        return {"lm": self.lm, "mim": self.mim, "ga": self.ga, "cga": self.cga, "total": self.total}


def _check_pair(student: torch.Tensor, teacher: torch.Tensor) -> None:
    if student.shape != teacher.shape:
        raise RejectedInputError(f"student logits {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    if student.dim() < 2:
        raise RejectedInputError(f"logits must be [..., N, D_v], got {tuple(student.shape)}")


# ── language modelling ────────────────────────────────────────────────────────

def lm_loss(text_logits: torch.Tensor, targets: torch.Tensor, prompt_len: int) -> LossTerm:
    """Cross-entropy where ``text_logits[..., t, :]`` predicts ``targets[..., t]``.

    Only rows ``prompt_len .. T-1`` are supervised; the mean runs over those
    rows (and over any leading batch axes).
    """
    length = text_logits.shape[-2]
    if not 0 <= prompt_len < length:
        raise RejectedInputError(f"prompt length {prompt_len} must be below sequence length {length}")
    if targets.shape != text_logits.shape[:-1]:
        raise RejectedInputError(f"targets {tuple(targets.shape)} do not match logits {tuple(text_logits.shape)}")

    rows = text_logits.detach().double()[..., prompt_len:, :]
    labels = targets[..., prompt_len:].long()
    logp = log_softmax(rows)
    nll = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    count = nll.numel()

    grad = torch.zeros_like(text_logits, dtype=torch.float64)
    grad[..., prompt_len:, :] = (logp.exp() - F.one_hot(labels, rows.shape[-1]).double()) / count
    return LossTerm(float(nll.sum() / count), grad.to(text_logits.dtype))


# ── masked latent reconstruction ──────────────────────────────────────────────

def mim_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    mask: Union[MaskPlan, torch.Tensor],
    temps: Temperatures,
) -> LossTerm:
    _check_pair(student_logits, teacher_logits)
    mask = (mask.mask if isinstance(mask, MaskPlan) else mask).bool()
    if mask.shape != student_logits.shape[:-1]:
        raise RejectedInputError(f"mask {tuple(mask.shape)} does not match logits {tuple(student_logits.shape)}")

    count = int(mask.sum())
    if count == 0:
        return LossTerm(0.0, torch.zeros_like(student_logits))

    p_teacher = softmax(teacher_logits.detach().double(), temps.tau_teacher)
    logp_student = log_softmax(student_logits.detach().double(), temps.tau_student)
    per_token = -(p_teacher * logp_student).sum(-1)
    value = per_token[mask].sum() / count

    weight = mask.unsqueeze(-1).double() / (count * temps.tau_student)
    grad = (logp_student.exp() - p_teacher) * weight
    return LossTerm(float(value), grad.to(student_logits.dtype))


# ── Gram anchoring ────────────────────────────────────────────────────────────

def gram(z: torch.Tensor) -> torch.Tensor:
    """Cosine-similarity matrix Norm(Z) Norm(Z)^T of each [N, D_v] block."""
    u = l2_normalize(z)
    return u @ u.transpose(-1, -2)


def gram_difference(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    _check_pair(student_logits, teacher_logits)
    return gram(student_logits.detach().double()) - gram(teacher_logits.detach().double())


def _gram_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, clip: bool) -> LossTerm:
    _check_pair(student_logits, teacher_logits)
    s = student_logits.detach().double()
    u = l2_normalize(s)
    diff = u @ u.transpose(-1, -2) - gram(teacher_logits.detach().double())
    if clip:
        diff = diff.clamp_min(0.0)
    value = (diff ** 2).sum()

    # dL/dG = 2*diff (symmetric) gives dL/du = 4*diff@u; project out the radial part
    grad_u = 4.0 * diff @ u
    radial = (grad_u * u).sum(-1, keepdim=True)
    grad = (grad_u - radial * u) / s.norm(dim=-1, keepdim=True)
    return LossTerm(float(value), grad.to(student_logits.dtype))


def ga_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> LossTerm:
    return _gram_loss(student_logits, teacher_logits, clip=False)


def cga_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> LossTerm:
    """Penalize only pairs whose student similarity exceeds the teacher's."""
    return _gram_loss(student_logits, teacher_logits, clip=True)


# ── combined objective ────────────────────────────────────────────────────────

def total_loss(terms: Dict[str, LossTerm], weights: LossWeights, active: Iterable[str]) -> LossReport:
    """Weighted sum of the active terms; inactive terms report exactly 0.

    ``grads["text_logits"]`` carries the LM gradient and
    ``grads["visual_logits"]`` the weighted sum of the visual gradients.
    """
    active = set(active)
    unknown = active - set(LOSS_NAMES)
    if unknown:
        raise RejectedInputError(f"unknown loss terms {sorted(unknown)}")
    missing = [name for name in active if name not in terms]
    if missing:
        raise RejectedInputError(f"active loss terms {missing} were not computed")

    factors = {"lm": 1.0, "mim": weights.w_mim, "ga": weights.w_ga, "cga": weights.w_cga}
    report = LossReport()
    total = 0.0
    visual_grad = None
    for name in LOSS_NAMES:
        if name not in active:
            continue
        term = terms[name]
        setattr(report, name, term.value)
        total += factors[name] * term.value
        if name == "lm":
            report.grads["text_logits"] = term.grad
        elif visual_grad is None:
            visual_grad = factors[name] * term.grad
        else:
            visual_grad = visual_grad + factors[name] * term.grad
    if visual_grad is not None:
        report.grads["visual_logits"] = visual_grad
    report.total = total
    return report
