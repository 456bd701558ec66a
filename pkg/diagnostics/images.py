import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
from PIL import Image

from exceptions import FormatError, RejectedInputError
from models import ForwardTrace
from substrate.tensor_ops import l2_normalize

logger = logging.getLogger(__name__)


def principal_components(features: torch.Tensor, n_components: int = 3) -> Tuple[torch.Tensor, torch.Tensor]:
    """Project mean-centered rows onto the top principal axes.

    Returns (projected [N, n_components], eigenvalues [n_components]), both
    float64. Each axis is signed so its largest-magnitude loading is positive.
    """
    if features.dim() != 2:
        raise RejectedInputError(f"features must be [N, D], got {tuple(features.shape)}")
    n, d = features.shape
    if d < n_components or n < 2:
        raise RejectedInputError(f"need D >= {n_components} and N >= 2, got {tuple(features.shape)}")
    centered = features.double() - features.double().mean(0, keepdim=True)
    rank = int(torch.linalg.matrix_rank(centered))
    if rank < n_components:
        raise RejectedInputError(f"feature rank {rank} is below the {n_components} components requested")

    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = torch.linalg.eigh(cov)
    top = torch.argsort(eigenvalues, descending=True)[:n_components]
    values, axes = eigenvalues[top], eigenvectors[:, top]
    pivots = axes.abs().argmax(0)
    signs = torch.sign(axes[pivots, torch.arange(n_components)])
    axes = axes * signs
    return centered @ axes, values


def _minmax_bytes(x: torch.Tensor, dim=None) -> torch.Tensor:
    lo = x.amin(dim=dim, keepdim=dim is not None)
    hi = x.amax(dim=dim, keepdim=dim is not None)
    span = torch.where(hi > lo, hi - lo, torch.ones_like(hi))
    return ((x - lo) / span * 255.0).round().clamp(0, 255).to(torch.uint8)


def pca_rgb(features: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """[rows, cols, 3] uint8 image: top-3 components, each channel min-max scaled to [0, 255]."""
    rows, cols = grid
    if features.shape[0] != rows * cols:
        raise RejectedInputError(f"{features.shape[0]} tokens do not fill a {rows}x{cols} grid")
    projected, _ = principal_components(features, 3)
    return _minmax_bytes(projected, dim=0).reshape(rows, cols, 3)


def cosine_matrix(features: torch.Tensor) -> torch.Tensor:
    """[N, N] float64 feature-wise cosine similarity."""
    u = l2_normalize(features.double())
    return u @ u.T


def cosine_matrix_bytes(features: torch.Tensor) -> torch.Tensor:
    # -1 -> 0, +1 -> 255
    return ((cosine_matrix(features) + 1.0) * 127.5).round().clamp(0, 255).to(torch.uint8)


def attention_heatmap(
    trace: ForwardTrace, vision_positions: torch.Tensor, query_position: int, grid: Tuple[int, int], sample: int = 0
) -> torch.Tensor:
    """Last-layer, head-averaged attention of one query over the image grid, as [rows, cols] uint8."""
    if trace.attentions is None:
        raise RejectedInputError("trace was recorded without capture=True")
    return heatmap_from_attentions(trace.attentions, vision_positions, query_position, grid, sample)


def heatmap_from_attentions(
    attentions: torch.Tensor, vision_positions: torch.Tensor, query_position: int, grid: Tuple[int, int], sample: int = 0
) -> torch.Tensor:
    last = attentions[-1]
    if last.dim() == 4:
        last = last[sample]
    elif last.dim() != 3:
        raise RejectedInputError(f"expected [L, (B,) heads, T, T] attentions, got {tuple(attentions.shape)}")
    rows, cols = grid
    if vision_positions.numel() != rows * cols:
        raise RejectedInputError(f"{vision_positions.numel()} vision positions do not fill a {rows}x{cols} grid")
    length = last.shape[-1]
    if not 0 <= query_position < length:
        raise RejectedInputError(f"query position {query_position} outside [0, {length})")
    weights = last.double()[:, query_position].mean(0)
    return _minmax_bytes(weights.index_select(0, vision_positions)).reshape(rows, cols)


def save_image(path: Union[str, Path], pixels: torch.Tensor, scale: int = 1) -> Path:
    """Write [H, W, 3] as binary PPM or [H, W] as binary PGM, optionally nearest-upscaled."""
    path = Path(path)
    if pixels.dtype != torch.uint8:
        raise RejectedInputError(f"image bytes must be uint8, got {pixels.dtype}")
    if pixels.dim() == 3 and pixels.shape[-1] == 3:
        mode = "RGB"
    elif pixels.dim() == 2:
        mode = "L"
    else:
        raise RejectedInputError(f"expected [H, W] or [H, W, 3], got {tuple(pixels.shape)}")
    image = Image.fromarray(np.ascontiguousarray(pixels.numpy()), mode=mode)
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        image.save(path, format="PPM")
    except OSError as e:
        raise FormatError(f"cannot write image: {e}", str(path))
    return path


def load_image(path: Union[str, Path]) -> torch.Tensor:
    try:
        with Image.open(path) as image:
            return torch.from_numpy(np.array(image))
    except OSError as e:
        raise FormatError(f"cannot read image: {e}", str(path))
