"""
Tensor substrate
================
The small set of numeric kernels every other package builds on. Tensors are
plain ``torch.Tensor`` objects stored as float32; reductions (softmax
denominators, norms, Gram entries) accumulate in float64 and are cast back.

All kernels are pure and differentiable, so the decoder stack can use them
under autograd while the objectives use them for analytic gradients.
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from exceptions import RejectedInputError

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5
NORMALIZE_EPS = 1e-12
RNG_ALGORITHM = "mt19937"


# ── seeded randomness ─────────────────────────────────────────────────────────

@dataclass
class Rng:
    """Seeded handle over torch's CPU Mersenne-Twister generator.

    The CPU generator is platform independent, so identical seeds give
    identical streams. Handles are not thread safe.
    """
    seed: int
    algorithm: str = RNG_ALGORITHM
    generator: torch.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise RejectedInputError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def spawn(self, *stream: int) -> "Rng":
        """Independent substream derived from (seed, *stream); does not advance this handle."""
        value = self.seed
        for s in stream:
            value = (value * 6364136223846793005 + 1442695040888963407 + int(s)) % (2 ** 64)
        return Rng(value)


def sample_gaussian(rng: Rng, shape: Sequence[int], std: float = 1.0) -> torch.Tensor:
    if std < 0:
        raise RejectedInputError(f"std must be nonnegative, got {std}")
    return torch.randn(tuple(shape), generator=rng.generator, dtype=torch.float32) * std


def sample_uniform(rng: Rng, shape: Sequence[int]) -> torch.Tensor:
    return torch.rand(tuple(shape), generator=rng.generator, dtype=torch.float32)


def sample_integers(rng: Rng, high: int, shape: Sequence[int]) -> torch.Tensor:
    return torch.randint(0, high, tuple(shape), generator=rng.generator)


# ── kernels ──────────────────────────────────────────────────────────────────

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise RejectedInputError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise RejectedInputError(f"inner dimensions differ: {tuple(a.shape)} · {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Last-axis softmax of ``x / temperature`` with max subtraction, 64-bit inside."""
    if not temperature > 0:
        raise RejectedInputError(f"temperature must be positive, got {temperature}")
    z = x.double() / temperature
    z = z - z.amax(dim=-1, keepdim=True)
    e = z.exp()
    return (e / e.sum(dim=-1, keepdim=True)).to(x.dtype)


def log_softmax(x: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    if not temperature > 0:
        raise RejectedInputError(f"temperature must be positive, got {temperature}")
    z = x.double() / temperature
    z = z - z.amax(dim=-1, keepdim=True)
    return (z - z.exp().sum(dim=-1, keepdim=True).log()).to(x.dtype)


def masked_softmax(scores: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
    """Softmax over allowed columns only; disallowed entries are exactly 0.

    Rows without any allowed column (pad queries) come out all zero.
    """
    z = scores.double().masked_fill(~allow, float("-inf"))
    row_max = z.amax(dim=-1, keepdim=True)
    row_max = torch.where(torch.isfinite(row_max), row_max, torch.zeros_like(row_max))
    e = (z - row_max).exp()
    denom = e.sum(dim=-1, keepdim=True)
    probs = e / torch.where(denom > 0, denom, torch.ones_like(denom))
    return probs.to(scores.dtype)


def l2_normalize(x: torch.Tensor, eps: float = NORMALIZE_EPS) -> torch.Tensor:
    """Unit-normalize the rows of an [..., n, d] tensor; rejects near-zero rows."""
    norms = x.double().norm(dim=-1, keepdim=True)
    small = (norms <= eps).squeeze(-1)
    if bool(small.any()):
        row = tuple(int(i) for i in small.nonzero()[0])
        raise RejectedInputError(f"row {row[-1] if len(row) == 1 else row} has near-zero norm")
    return (x.double() / norms).to(x.dtype)


def layernorm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LAYERNORM_EPS) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise RejectedInputError(
            f"layernorm affine shape {tuple(gain.shape)} does not match features {x.shape[-1]}"
        )
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)
