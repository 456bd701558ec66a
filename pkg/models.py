import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, TYPE_CHECKING

import torch
import torch.nn as nn

from exceptions import ForwardFault, RejectedInputError
from substrate.tensor_ops import Rng, gelu, layernorm, masked_softmax, sample_gaussian

if TYPE_CHECKING:
    from geometry.spatial import AttentionLayout
    from schemas import ModelConfig

logger = logging.getLogger(__name__)


# Enums

class SegmentKind(enum.Enum):
    vision = "vision"
    text = "text"
    pad = "pad"

class ScheduleKind(enum.Enum):
    constant = "constant"
    cosine = "cosine"

class EmaScheduleKind(enum.Enum):
    constant = "constant"
    cosine_to_one = "cosine_to_one"

class TrainMode(enum.Enum):
    baseline = "baseline"
    mim_only = "mim_only"
    mim_ga = "mim_ga"
    laver = "laver"

class OptimizerKind(enum.Enum):
    adam = "adam"


# Models

@dataclass
class ForwardTrace:
    """Everything one forward pass exposes to losses and diagnostics.

    ``hidden_states`` is [L+1, ..., T, D] (index 0 = input embeddings) and
    ``attentions`` is [L, ..., heads, T, T]; both are only kept when the
    forward ran with ``capture=True``.
    """
    layout: "AttentionLayout"
    final_hidden: torch.Tensor
    text_logits: Optional[torch.Tensor]
    visual_logits: torch.Tensor
    hidden_states: Optional[torch.Tensor] = None
    attentions: Optional[torch.Tensor] = None


class PatchProjector(nn.Module):
    """Encoder-free path: one affine map from raw pixel patches to vision tokens."""

    def __init__(self, config: "ModelConfig"):
        super().__init__()
        self.patch_size = config.patch_size
        self.channels = config.channels
        self.proj = nn.Linear(config.patch_size * config.patch_size * config.channels, config.d_model)

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        if pixels.dim() < 3:
            raise RejectedInputError(f"pixels must be [..., H, W, C], got {tuple(pixels.shape)}")
        *lead, height, width, channels = pixels.shape
        p = self.patch_size
        if height % p or width % p:
            raise RejectedInputError(f"image {height}x{width} is not divisible by patch size {p}")
        if channels != self.channels:
            raise RejectedInputError(f"expected {self.channels} channels, got {channels}")
        rows, cols = height // p, width // p
        patches = pixels.reshape(*lead, rows, p, cols, p, channels).transpose(-4, -3)
        return patches.reshape(*lead, rows * cols, p * p * channels)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.proj(self.patchify(pixels))


class SelfAttention(nn.Module):
    def __init__(self, config: "ModelConfig"):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.rope_base = config.rope_base
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.out = nn.Linear(config.d_model, config.d_model)

    def forward(self, x: torch.Tensor, layout: "AttentionLayout") -> Tuple[torch.Tensor, torch.Tensor]:
        from geometry.spatial import apply_rope  # geometry.spatial imports SegmentKind from here

        *lead, length, d_model = x.shape
        q, k, v = self.qkv(x).view(*lead, length, 3, self.n_heads, self.head_dim).unbind(-3)
        q = apply_rope(q, layout.row_index, layout.col_index, self.rope_base)
        k = apply_rope(k, layout.row_index, layout.col_index, self.rope_base)
        scores = torch.einsum("...qhd,...khd->...hqk", q, k) / math.sqrt(self.head_dim)
        probs = masked_softmax(scores, layout.allow)
        mixed = torch.einsum("...hqk,...khd->...qhd", probs, v).reshape(*lead, length, d_model)
        return self.out(mixed), probs


class DecoderBlock(nn.Module):
    """Pre-norm block: LN → attention → residual → LN → MLP → residual."""

    def __init__(self, config: "ModelConfig"):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = SelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.fc1 = nn.Linear(config.d_model, 4 * config.d_model)
        self.fc2 = nn.Linear(4 * config.d_model, config.d_model)

    def forward(self, x: torch.Tensor, layout: "AttentionLayout") -> Tuple[torch.Tensor, torch.Tensor]:
        attended, probs = self.attn(layernorm(x, self.ln1.weight, self.ln1.bias), layout)
        x = x + attended
        x = x + self.fc2(gelu(self.fc1(layernorm(x, self.ln2.weight, self.ln2.bias))))
        return x, probs


class VisionHead(nn.Module):
    """3-layer MLP, ReLU after the first two layers, producing visual logits."""

    def __init__(self, config: "ModelConfig"):
        super().__init__()
        self.fc1 = nn.Linear(config.d_model, config.vision_head_hidden)
        self.fc2 = nn.Linear(config.vision_head_hidden, config.vision_head_hidden)
        self.fc3 = nn.Linear(config.vision_head_hidden, config.visual_logit_dim)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.fc3(torch.relu(self.fc2(torch.relu(self.fc1(hidden)))))


class MicroMLLM(nn.Module):
    """Miniature multimodal decoder; its state dict is the full parameter set."""

    def __init__(self, config: "ModelConfig", rng: Optional[Rng] = None):
        super().__init__()
        self.config = config
        self.patch_projector = PatchProjector(config)
        self.token_embed = nn.Embedding(config.vocab_size, config.d_model)
        self.mask_embedding = nn.Parameter(torch.zeros(config.d_model))
        self.blocks = nn.ModuleList([DecoderBlock(config) for _ in range(config.n_layers)])
        self.final_norm = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size)
        self.vision_head = VisionHead(config)
        if rng is not None:
            self.reset_parameters(rng)

    @torch.no_grad()
    def reset_parameters(self, rng: Rng) -> None:
        """Gaussian(std=init_std) weights and embeddings, zero biases, unit LayerNorm gains."""
        for name, param in self.named_parameters():
            if name.startswith(("final_norm", )) or ".ln" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.copy_(sample_gaussian(rng, param.shape, self.config.init_std))

    # ── pieces ───────────────────────────────────────────────────────────────

    def embed_image(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.patch_projector(pixels)

    def embed_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.token_embed(token_ids)

    def lm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden)

    def visual_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.vision_head(hidden)

    # ── full pass ────────────────────────────────────────────────────────────

    def forward(self, tokens: torch.Tensor, layout: "AttentionLayout", capture: bool = False) -> ForwardTrace:
        if tokens.dim() < 2 or tokens.shape[-2] != layout.length or tokens.shape[-1] != self.config.d_model:
            raise RejectedInputError(
                f"tokens {tuple(tokens.shape)} do not match layout length {layout.length} and D={self.config.d_model}"
            )
        h = tokens
        hidden = [h]
        attentions = []
        for index, block in enumerate(self.blocks, start=1):
            h, probs = block(h, layout)
            if not bool(torch.isfinite(h).all()):
                raise ForwardFault(index)
            if capture:
                hidden.append(h)
                attentions.append(probs)

        final = layernorm(h, self.final_norm.weight, self.final_norm.bias)
        text_logits = self.lm_logits(final) if bool((layout.kinds == 1).any()) else None
        visual = self.visual_logits(final.index_select(-2, layout.vision_positions))
        return ForwardTrace(
            layout=layout,
            final_hidden=final,
            text_logits=text_logits,
            visual_logits=visual,
            hidden_states=torch.stack(hidden) if capture else None,
            attentions=torch.stack(attentions) if capture else None,
        )
