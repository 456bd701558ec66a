"""
Spatial geometry
================
Attention allow-matrices and 2D rotary position indices for the two kinds of
sequence the model sees:

  * the multimodal sequence (vision prefix + text): mixed attention, i.e.
    vision tokens attend bidirectionally to every vision token and never to
    text, while text tokens attend causally to everything before them;
  * the packed visual sequence (several images + padding): diagonally
    blocked bidirectional attention, pads isolated.

Vision token (r, c) of an image starting at sequence position ``base`` gets
the rotary index pair (base + r, base + c); text and pad tokens at position
p get (p, p), which reduces 2D rotary to the usual 1-D form.
"""

import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch

from exceptions import RejectedInputError
from models import SegmentKind

logger = logging.getLogger(__name__)

_KIND_CODES = {SegmentKind.vision: 0, SegmentKind.text: 1, SegmentKind.pad: 2}
_KIND_LETTERS = {0: "V", 1: "T", 2: "P"}


@dataclass(frozen=True)
class SegmentSpec:
    kind: SegmentKind
    length: int
    grid: Optional[Tuple[int, int]] = None
    image_id: Optional[int] = None

    def __post_init__(self):
        if self.length <= 0:
            raise RejectedInputError(f"{self.kind.value} segment has non-positive length {self.length}")
        if self.kind == SegmentKind.vision:
            if self.grid is None or self.grid[0] * self.grid[1] != self.length:
                raise RejectedInputError(f"vision segment grid {self.grid} does not cover {self.length} tokens")


def vision_segment(rows: int, cols: int, image_id: int = 0) -> SegmentSpec:
    return SegmentSpec(SegmentKind.vision, rows * cols, (rows, cols), image_id)


def text_segment(length: int) -> SegmentSpec:
    return SegmentSpec(SegmentKind.text, length)


def pad_segment(length: int) -> SegmentSpec:
    return SegmentSpec(SegmentKind.pad, length)


@dataclass(frozen=True)
class AttentionLayout:
    """Boolean allow matrix [T, T] plus rotary index pairs for one sequence.

    ``segment_ids`` holds the segment index per position (-1 for pads) and
    ``kinds`` the segment kind code (0 vision, 1 text, 2 pad).
    """
    allow: torch.Tensor
    row_index: torch.Tensor
    col_index: torch.Tensor
    segment_ids: torch.Tensor
    kinds: torch.Tensor

    @property
    def length(self) -> int:
        return self.allow.shape[0]

    @property
    def vision_positions(self) -> torch.Tensor:
        return (self.kinds == 0).nonzero().flatten()

    def image_blocks(self) -> List[torch.Tensor]:
        """Positions of each vision segment, in sequence order."""
        vision = self.kinds == 0
        ids = torch.unique(self.segment_ids[vision], sorted=True)
        return [((self.segment_ids == i) & vision).nonzero().flatten() for i in ids.tolist()]


def _flatten(segments: Sequence[SegmentSpec]) -> Tuple[torch.Tensor, torch.Tensor]:
    if not segments:
        raise RejectedInputError("layout needs at least one segment")
    kinds, seg_ids = [], []
    for idx, seg in enumerate(segments):
        code = _KIND_CODES[seg.kind]
        kinds.extend([code] * seg.length)
        seg_ids.extend([-1 if seg.kind == SegmentKind.pad else idx] * seg.length)
    return torch.tensor(kinds, dtype=torch.long), torch.tensor(seg_ids, dtype=torch.long)


def assign_rope_indices(
    segments: Sequence[SegmentSpec], rope_2d: bool = True
) -> Tuple[torch.Tensor, torch.Tensor]:
    rows: List[int] = []
    cols: List[int] = []
    base = 0
    for seg in segments:
        if seg.kind == SegmentKind.vision and rope_2d:
            grid_rows, grid_cols = seg.grid
            for r in range(grid_rows):
                for c in range(grid_cols):
                    rows.append(base + r)
                    cols.append(base + c)
        else:
            positions = range(base, base + seg.length)
            rows.extend(positions)
            cols.extend(positions)
        base += seg.length
    return torch.tensor(rows, dtype=torch.long), torch.tensor(cols, dtype=torch.long)


def build_mixed_layout(
    segments: Sequence[SegmentSpec], mixed: bool = True, rope_2d: bool = True
) -> AttentionLayout:
    """Layout for a multimodal sequence.

    With ``mixed=False`` every position attends causally, which is the
    plain decoder baseline used by the spatial-awareness ablation.
    """
    kinds, seg_ids = _flatten(segments)
    pos = torch.arange(kinds.shape[0])
    is_vision = kinds == 0
    is_text = kinds == 1
    not_pad = kinds != 2
    causal = pos.unsqueeze(0) <= pos.unsqueeze(1)
    if mixed:
        allow = (is_text.unsqueeze(1) & causal & not_pad.unsqueeze(0)) | (
            is_vision.unsqueeze(1) & is_vision.unsqueeze(0)
        )
    else:
        allow = causal & not_pad.unsqueeze(1) & not_pad.unsqueeze(0)
    row_index, col_index = assign_rope_indices(segments, rope_2d)
    return AttentionLayout(allow, row_index, col_index, seg_ids, kinds)


def build_packed_layout(
    images: Sequence[SegmentSpec], pad_to: int, rope_2d: bool = True
) -> AttentionLayout:
    """Diagonally blocked layout for several images packed into ``pad_to`` positions."""
    if not images:
        raise RejectedInputError("packed layout needs at least one image")
    for seg in images:
        if seg.kind != SegmentKind.vision:
            raise RejectedInputError(f"packed sequences hold vision segments only, got {seg.kind.value}")
    total = sum(seg.length for seg in images)
    if total > pad_to:
        raise RejectedInputError(f"{total} vision tokens overflow packed length {pad_to}")
    segments = list(images)
    if total < pad_to:
        segments.append(pad_segment(pad_to - total))
    kinds, seg_ids = _flatten(segments)
    not_pad = seg_ids >= 0
    allow = (seg_ids.unsqueeze(0) == seg_ids.unsqueeze(1)) & not_pad.unsqueeze(0) & not_pad.unsqueeze(1)
    row_index, col_index = assign_rope_indices(segments, rope_2d)
    return AttentionLayout(allow, row_index, col_index, seg_ids, kinds)


# ── rotary embedding ─────────────────────────────────────────────────────────

def rope_frequencies(dim: int, base: float = 10000.0) -> torch.Tensor:
    """Angular frequencies base^(-2i/dim) of the dim/2 rotary pairs, float64."""
    if dim <= 0 or dim % 2:
        raise RejectedInputError(f"rotary dim must be positive and even, got {dim}")
    return base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)


def _rotate_pairs(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate consecutive pairs (x[2i], x[2i+1]) by position * base^(-2i/m)."""
    angles = positions.to(torch.float64).unsqueeze(-1) * rope_frequencies(x.shape[-1], base)  # [T, m/2]
    # broadcast over the head axis
    cos = angles.cos().unsqueeze(-2).to(x.dtype)
    sin = angles.sin().unsqueeze(-2).to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


def apply_rope(
    x: torch.Tensor, row_index: torch.Tensor, col_index: torch.Tensor, base: float = 10000.0
) -> torch.Tensor:
    """2D rotary on [..., T, heads, head_dim]: first half by row index, second half by column index."""
    if x.dim() < 3:
        raise RejectedInputError(f"rotary input must be [..., T, heads, head_dim], got {tuple(x.shape)}")
    head_dim = x.shape[-1]
    if head_dim % 4:
        raise RejectedInputError(f"head dim {head_dim} must be even and divisible by 4")
    if row_index.shape != (x.shape[-3],) or col_index.shape != (x.shape[-3],):
        raise RejectedInputError(
            f"index vectors {tuple(row_index.shape)}/{tuple(col_index.shape)} do not match T={x.shape[-3]}"
        )
    half = head_dim // 2
    return torch.cat(
        (_rotate_pairs(x[..., :half], row_index, base), _rotate_pairs(x[..., half:], col_index, base)),
        dim=-1,
    )


# ── debug rendering ──────────────────────────────────────────────────────────

_SEGMENT_PATTERN = re.compile(r"^(?:v(\d+)x(\d+)|t(\d+)|p(\d+))$")


def parse_segments(text: str) -> List[SegmentSpec]:
    """Parse ``v2x2,t3,p1`` into segments (vision rows x cols, text n, pad n)."""
    segments: List[SegmentSpec] = []
    image_id = 0
    for token in [t.strip().lower() for t in text.split(",") if t.strip()]:
        match = _SEGMENT_PATTERN.match(token)
        if not match:
            raise RejectedInputError(f"cannot parse segment {token!r}; expected vRxC, tN or pN")
        rows, cols, text_len, pad_len = match.groups()
        if rows is not None:
            segments.append(vision_segment(int(rows), int(cols), image_id))
            image_id += 1
        elif text_len is not None:
            segments.append(text_segment(int(text_len)))
        else:
            segments.append(pad_segment(int(pad_len)))
    if not segments:
        raise RejectedInputError("no segments given")
    return segments


def render_layout(layout: AttentionLayout) -> str:
    letters = [_KIND_LETTERS[int(k)] for k in layout.kinds]
    lines = ["  " + "".join(letters)]
    for i, letter in enumerate(letters):
        cells = "".join("#" if bool(a) else "." for a in layout.allow[i])
        lines.append(f"{letter} {cells}")
    lines.append("")
    lines.append("row: " + " ".join(str(int(v)) for v in layout.row_index))
    lines.append("col: " + " ".join(str(int(v)) for v in layout.col_index))
    return "\n".join(lines)
