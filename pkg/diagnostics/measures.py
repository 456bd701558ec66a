"""
Representation measures
=======================
Scalar and per-layer measurements over vision-token features:

  * mean pairwise cosine similarity (homogenization) per layer
  * attention mass that predicted text places on vision tokens per layer
  * linear CKA and its k-nearest-neighbour restriction (CKNNA), both as
    single scores and as layer-by-layer curves against the input tokens

Everything accumulates in float64. Kernels are double-centered
(Kc = H K H, H = I - 11^T/N) so that HSIC(K, L) = sum(Kc * Lc) / (N-1)^2.
"""

import logging
import math
from typing import List, Optional, Sequence

import torch

from exceptions import RejectedInputError
from models import ForwardTrace
from substrate.tensor_ops import l2_normalize

logger = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-12


# ── homogenization ────────────────────────────────────────────────────────────

def mean_pairwise_cosine(features: torch.Tensor) -> float:
    """Mean of cos(v_i, v_j) over i < j for the rows of an [N, D] matrix."""
    if features.dim() != 2 or features.shape[0] < 2:
        raise RejectedInputError(f"need an [N, D] matrix with N >= 2, got {tuple(features.shape)}")
    n = features.shape[0]
    u = l2_normalize(features.double())
    sims = u @ u.T
    upper = torch.triu_indices(n, n, offset=1)
    return float(sims[upper[0], upper[1]].mean())


def vision_layers(trace: ForwardTrace, vision_positions: Optional[torch.Tensor] = None) -> torch.Tensor:
    """[L+1, images, N, D] hidden states of the vision positions; batch axes become the image axis."""
    if trace.hidden_states is None:
        raise RejectedInputError("trace was recorded without capture=True")
    positions = trace.layout.vision_positions if vision_positions is None else vision_positions
    layers = trace.hidden_states.index_select(-2, positions)
    return layers.reshape(layers.shape[0], -1, *layers.shape[-2:])


def _check_layers(layers: torch.Tensor) -> None:
    if layers.dim() != 4:
        raise RejectedInputError(f"layer stack must be [L+1, images, N, D], got {tuple(layers.shape)}")


def homogenization_from_layers(layers: torch.Tensor) -> List[float]:
    _check_layers(layers)
    n_images = layers.shape[1]
    return [sum(mean_pairwise_cosine(image) for image in layer) / n_images for layer in layers]


def homogenization_profile(trace: ForwardTrace, vision_positions: Optional[torch.Tensor] = None) -> List[float]:
    """Per-layer mean vision cosine, averaged over images; length L+1."""
    return homogenization_from_layers(vision_layers(trace, vision_positions))



# ── attention allocation ──────────────────────────────────────────────────────

def allocation_from_attentions(
    attentions: torch.Tensor, vision_positions: torch.Tensor, query_positions: torch.Tensor
) -> List[float]:
    """``attentions`` is [L, ..., heads, T, T]; returns the mean vision mass per layer."""
    if query_positions.numel() == 0:
        raise RejectedInputError("attention allocation needs at least one query position")
    length = attentions.shape[-1]
    for name, idx in (("vision", vision_positions), ("query", query_positions)):
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= length):
            raise RejectedInputError(f"{name} position out of range for sequence length {length}")

    attn = attentions.double().index_select(-2, query_positions)   # [L, ..., h, Q, T]
    on_vision = attn.index_select(-1, vision_positions).sum(-1)    # [L, ..., h, Q]
    n_layers = on_vision.shape[0]
    return [float(v) for v in on_vision.reshape(n_layers, -1).mean(-1)]


def attention_allocation(
    trace: ForwardTrace, vision_positions: torch.Tensor, query_positions: torch.Tensor
) -> List[float]:
    """Per layer: fraction of each query's attention on vision columns, per head, then averaged."""
    if trace.attentions is None:
        raise RejectedInputError("trace was recorded without capture=True")
    return allocation_from_attentions(trace.attentions, vision_positions, query_positions)



# ── kernel alignment ──────────────────────────────────────────────────────────

def linear_kernel(features: torch.Tensor) -> torch.Tensor:
    x = features.double()
    return x @ x.T


def _check_kernel(k: torch.Tensor, name: str) -> None:
    if k.dim() != 2 or k.shape[0] != k.shape[1]:
        raise RejectedInputError(f"kernel {name} must be square, got {tuple(k.shape)}")
    if k.shape[0] < 2:
        raise RejectedInputError(f"kernel {name} needs N >= 2")
    if not torch.allclose(k, k.T, atol=1e-9 * max(1.0, float(k.abs().max()))):
        raise RejectedInputError(f"kernel {name} is not symmetric")


def center(k: torch.Tensor) -> torch.Tensor:
    k = k.double()
    return k - k.mean(0, keepdim=True) - k.mean(1, keepdim=True) + k.mean()


def hsic(k: torch.Tensor, l: torch.Tensor, indicator: Optional[torch.Tensor] = None) -> float:
    _check_kernel(k, "K")
    _check_kernel(l, "L")
    if k.shape != l.shape:
        raise RejectedInputError(f"kernels differ in size: {tuple(k.shape)} vs {tuple(l.shape)}")
    n = k.shape[0]
    product = center(k) * center(l)
    if indicator is not None:
        product = product * indicator.double()
    return float(product.sum() / (n - 1) ** 2)


def _alignment(cross: float, self_k: float, self_l: float) -> float:
    for name, value in (("K", self_k), ("L", self_l)):
        if value <= DEGENERATE_EPS:
            raise RejectedInputError(f"kernel {name} is degenerate (self-HSIC {value:.3e} has no variance)")
    return cross / math.sqrt(self_k * self_l)


def cka(k: torch.Tensor, l: torch.Tensor) -> float:
    return _alignment(hsic(k, l), hsic(k, k), hsic(l, l))


def knn_mask(kernel: torch.Tensor, k: int) -> torch.Tensor:
    """[N, N] bool; row i marks the k most similar j != i, lower index winning ties."""
    n = kernel.shape[0]
    scores = kernel.double().clone()
    scores.fill_diagonal_(float("-inf"))
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices[:, :k]
    mask = torch.zeros(n, n, dtype=torch.bool)
    mask.scatter_(1, order, True)
    return mask


def cknna(features_a: torch.Tensor, features_b: torch.Tensor, k: int) -> float:
    """CKA restricted to pairs that are mutual k-nearest neighbours in both spaces."""
    if features_a.dim() != 2 or features_b.dim() != 2 or features_a.shape[0] != features_b.shape[0]:
        raise RejectedInputError(
            f"feature sets must be [N, D] with equal N, got {tuple(features_a.shape)} and {tuple(features_b.shape)}"
        )
    n = features_a.shape[0]
    if not 1 <= k <= n - 1:
        raise RejectedInputError(f"k={k} outside [1, {n - 1}]")
    kern_a = linear_kernel(features_a)
    kern_b = linear_kernel(features_b)
    mask_a = knn_mask(kern_a, k)
    mask_b = knn_mask(kern_b, k)
    return _alignment(
        hsic(kern_a, kern_b, mask_a & mask_b),
        hsic(kern_a, kern_a, mask_a),
        hsic(kern_b, kern_b, mask_b),
    )


def cka_profile_from_layers(layers: torch.Tensor) -> List[float]:
    _check_layers(layers)
    n_images = layers.shape[1]
    bases = [linear_kernel(layers[0, i]) for i in range(n_images)]
    return [
        sum(cka(bases[i], linear_kernel(layer[i])) for i in range(n_images)) / n_images
        for layer in layers
    ]


def cknna_profile_from_layers(layers: torch.Tensor, k: int) -> List[float]:
    _check_layers(layers)
    n_images = layers.shape[1]
    return [sum(cknna(layers[0, i], layer[i], k) for i in range(n_images)) / n_images for layer in layers]


def cka_profile(trace: ForwardTrace, vision_positions: Optional[torch.Tensor] = None) -> List[float]:
    return cka_profile_from_layers(vision_layers(trace, vision_positions))


def cknna_profile(trace: ForwardTrace, k: int, vision_positions: Optional[torch.Tensor] = None) -> List[float]:
    """Alignment of each layer's vision hidden states with the input vision tokens, averaged over images."""
    return cknna_profile_from_layers(vision_layers(trace, vision_positions), k)



def average_profiles(profiles: Sequence[Sequence[float]], counts: Sequence[int]) -> List[float]:
    """Merge per-shard profiles, weighting each by its sample count."""
    if not profiles or len(profiles) != len(counts):
        raise RejectedInputError("need one count per profile")
    total = sum(counts)
    width = len(profiles[0])
    return [sum(p[i] * c for p, c in zip(profiles, counts)) / total for i in range(width)]
