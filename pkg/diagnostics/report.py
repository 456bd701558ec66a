"""
Diagnostics runner
==================
Measures a trained checkpoint (or a directory of LVTD dumps) on a probe set
and writes ``report.json`` plus PPM/PGM images next to it.

Dump directory layout (see ``dump_trace``):
    hidden_states.lvtd   [L+1, images, N, D]  vision-token hidden states
    attentions.lvtd      [L, images, heads, T, T]  optional
    trace.json           {"grid": [rows, cols], "vision_positions": [...], "query_positions": [...]}
"""

import json
import logging
from pathlib import Path
from typing import List, Optional, Union

import torch

from diagnostics.images import attention_heatmap, cosine_matrix_bytes, heatmap_from_attentions, pca_rgb, save_image
from diagnostics.measures import (
    allocation_from_attentions,
    cka_profile_from_layers,
    cknna_profile_from_layers,
    homogenization_from_layers,
    vision_layers,
)
from exceptions import FormatError, RejectedInputError
from models import ForwardTrace
from schemas import DiagnosticReport
from substrate.lvtd import load_tensor, save_tensor
from substrate.tensor_ops import Rng
from training.trainer import answer_accuracy, answer_query_position, load_models, multimodal_forward
from data.synth_data import generate_batch

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
IMAGE_SCALE = 16


def _clamp_k(k: int, n_tokens: int) -> int:
    if n_tokens < 2:
        raise RejectedInputError("CKNNA needs at least two vision tokens per image")
    if k > n_tokens - 1:
        logger.warning(f"cknna k={k} exceeds N-1={n_tokens - 1}; using {n_tokens - 1}")
    return min(k, n_tokens - 1)


def _write_images(layers: torch.Tensor, grid, out: Path, heatmap: Optional[torch.Tensor] = None) -> List[str]:
    """PCA maps of the first and last layer plus the last layer's cosine map, for probe image 0."""
    written = []
    last = layers.shape[0] - 1
    for layer in sorted({0, last}):
        path = save_image(out / f"pca_layer{layer}.ppm", pca_rgb(layers[layer, 0], grid), IMAGE_SCALE)
        written.append(path.name)
    written.append(save_image(out / f"cosine_layer{last}.pgm", cosine_matrix_bytes(layers[last, 0]), 4).name)
    if heatmap is not None:
        written.append(save_image(out / "attention_last_layer.pgm", heatmap, IMAGE_SCALE).name)
    return written


def _finish(report: DiagnosticReport, out: Path) -> DiagnosticReport:
    path = out / REPORT_FILE
    try:
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot write report: {e}", str(path))
    logger.info(f"Wrote diagnostics report {path}")
    return report


@torch.no_grad()
def diagnose_checkpoint(
    checkpoint: Union[str, Path],
    out_dir: Union[str, Path],
    probe_seed: Optional[int] = None,
    k: Optional[int] = None,
    use_teacher: bool = False,
) -> DiagnosticReport:
    config, student, teacher, step = load_models(checkpoint)
    model = teacher if use_teacher else student
    model.eval()
    seed = config.data.probe_seed if probe_seed is None else probe_seed
    probe = generate_batch(Rng(seed), config.model, config.data, config.data.probe_count)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    trace, rows, _ = multimodal_forward(model, config, probe, capture=True)
    layers = vision_layers(trace)
    vision = trace.layout.vision_positions
    query = torch.tensor([answer_query_position(config, probe.prompt_len)])
    k = _clamp_k(config.cknna_k if k is None else k, config.model.n_vision_tokens)
    accuracy = answer_accuracy(rows, probe)
    heatmap = attention_heatmap(trace, vision, int(query), config.model.grid)

    report = DiagnosticReport(
        checkpoint=str(checkpoint),
        probe_seed=seed,
        probe_count=len(probe),
        homogenization=homogenization_from_layers(layers),
        attention_allocation=allocation_from_attentions(trace.attentions, vision, query),
        cka_profile=cka_profile_from_layers(layers),
        cknna_profile=cknna_profile_from_layers(layers, k),
        cknna_k=k,
        accuracy=accuracy,
        images=_write_images(layers, config.model.grid, out, heatmap),
    )
    logger.info(f"Diagnosed step {step}: deep-layer cosine {report.homogenization[-1]:.4f}, accuracy {accuracy:.3f}")
    return _finish(report, out)


# ── LVTD dumps ────────────────────────────────────────────────────────────────

def dump_trace(
    trace: ForwardTrace, out_dir: Union[str, Path], grid, query_positions: Optional[torch.Tensor] = None
) -> Path:
    """Write a captured trace in the layout ``diagnose_dumps`` reads."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_tensor(out / "hidden_states.lvtd", vision_layers(trace))
        meta = {
            "grid": list(grid),
            "vision_positions": trace.layout.vision_positions.tolist(),
            "query_positions": [] if query_positions is None else query_positions.tolist(),
        }
        if trace.attentions is not None and query_positions is not None:
            attentions = trace.attentions
            if attentions.dim() == 4:
                attentions = attentions.unsqueeze(1)
            save_tensor(out / "attentions.lvtd", attentions)
        (out / "trace.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot write trace dump: {e}", str(out))
    return out


def diagnose_dumps(dump_dir: Union[str, Path], out_dir: Union[str, Path], k: int = 10) -> DiagnosticReport:
    src = Path(dump_dir)
    try:
        meta = json.loads((src / "trace.json").read_text(encoding="utf-8"))
        grid = tuple(meta["grid"])
    except (OSError, ValueError, KeyError) as e:
        raise FormatError(f"unreadable trace metadata: {e}", str(src / "trace.json"))
    layers = load_tensor(src / "hidden_states.lvtd")
    if layers.dim() == 3:
        layers = layers.unsqueeze(1)
    if layers.dim() != 4 or layers.shape[2] != grid[0] * grid[1]:
        raise FormatError(f"hidden states {tuple(layers.shape)} do not match grid {grid}", str(src))

    allocation: List[float] = []
    heatmap = None
    attention_path = src / "attentions.lvtd"
    if attention_path.exists() and meta.get("query_positions"):
        attentions = load_tensor(attention_path)
        vision = torch.tensor(meta["vision_positions"], dtype=torch.long)
        query = torch.tensor(meta["query_positions"], dtype=torch.long)
        allocation = allocation_from_attentions(attentions, vision, query)
        heatmap = heatmap_from_attentions(attentions, vision, int(query[-1]), grid)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = _clamp_k(k, layers.shape[2])
    report = DiagnosticReport(
        checkpoint=None,
        probe_seed=None,
        probe_count=layers.shape[1],
        homogenization=homogenization_from_layers(layers),
        attention_allocation=allocation,
        cka_profile=cka_profile_from_layers(layers),
        cknna_profile=cknna_profile_from_layers(layers, k),
        cknna_k=k,
        images=_write_images(layers, grid, out, heatmap),
    )
    return _finish(report, out)
