"""
Synthetic colour-grid task
==========================
Each image is a rows x cols grid of solid colour cells (one cell per patch)
with Gaussian pixel noise. The prompt asks ``COLOR AT r c`` and the answer
is the colour token of that cell, so the Bayes-optimal answer is always
recoverable from the pixels.

Vocabulary:
    0 PAD, 1 BOS, 2 EOS, 3 COLOR, 4 AT,
    5 .. 5+D-1        digits 0..D-1, D = max(rows, cols)
    5+D .. 5+D+C-1    colour ids
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import torch

from exceptions import FormatError, RejectedInputError
from schemas import DataConfig, ModelConfig
from substrate.lvtd import load_tensor, save_tensor
from substrate.tensor_ops import Rng, sample_gaussian, sample_integers

logger = logging.getLogger(__name__)

PAD, BOS, EOS, COLOR, AT = 0, 1, 2, 3, 4
DIGIT_BASE = 5
KEYWORDS = {PAD: "PAD", BOS: "BOS", EOS: "EOS", COLOR: "COLOR", AT: "AT"}
PROMPT_LEN = 5


@dataclass(frozen=True)
class Vocabulary:
    n_digits: int
    n_colors: int

    @property
    def color_base(self) -> int:
        return DIGIT_BASE + self.n_digits

    @property
    def size(self) -> int:
        return self.color_base + self.n_colors

    def digit(self, value: int) -> int:
        return DIGIT_BASE + value

    def color(self, value: int) -> int:
        return self.color_base + value

    def describe(self, token_id: int) -> str:
        if token_id in KEYWORDS:
            return KEYWORDS[token_id]
        if token_id < self.color_base:
            return str(token_id - DIGIT_BASE)
        return f"C{token_id - self.color_base}"


def vocabulary_for(model_config: ModelConfig, data_config: DataConfig) -> Vocabulary:
    vocab = Vocabulary(n_digits=max(model_config.grid), n_colors=data_config.colors)
    if vocab.size > model_config.vocab_size:
        raise RejectedInputError(
            f"{data_config.colors} colours need {vocab.size} tokens, vocabulary holds {model_config.vocab_size}"
        )
    return vocab


def color_prototypes(n_colors: int, channels: int) -> torch.Tensor:
    """[C, channels] palette: colour c written in base-L digits, one digit per channel, scaled to [0,1]."""
    levels = max(2, math.ceil(n_colors ** (1.0 / channels) - 1e-9))
    while levels ** channels < n_colors:
        levels += 1
    palette = torch.zeros(n_colors, channels)
    for c in range(n_colors):
        value = c
        for ch in reversed(range(channels)):
            palette[c, ch] = (value % levels) / (levels - 1)
            value //= levels
    return palette


@dataclass(frozen=True)
class Sample:
    pixels: torch.Tensor      # [rows*p, cols*p, channels]
    cells: torch.Tensor       # [rows, cols] colour index per cell
    prompt: torch.Tensor      # [P] token ids
    answer: int               # colour token id
    prompt_len: int = PROMPT_LEN


@dataclass(frozen=True)
class SampleBatch:
    pixels: torch.Tensor      # [B, H, W, C]
    cells: torch.Tensor       # [B, rows, cols]
    prompts: torch.Tensor     # [B, P]
    answers: torch.Tensor     # [B]

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompts.shape[1]

    def samples(self) -> List[Sample]:
        return [
            Sample(self.pixels[i], self.cells[i], self.prompts[i], int(self.answers[i]), self.prompt_len)
            for i in range(len(self))
        ]


def generate_batch(rng: Rng, model_config: ModelConfig, data_config: DataConfig, count: int) -> SampleBatch:
    if data_config.colors < 2:
        raise RejectedInputError("need at least two colours")
    if count <= 0:
        raise RejectedInputError(f"sample count must be positive, got {count}")
    vocab = vocabulary_for(model_config, data_config)
    rows, cols = model_config.grid
    p = model_config.patch_size

    cells = sample_integers(rng, data_config.colors, (count, rows, cols))
    palette = color_prototypes(data_config.colors, model_config.channels)
    # every pixel of a cell starts at the cell's prototype colour
    pixels = palette[cells].repeat_interleave(p, dim=1).repeat_interleave(p, dim=2)
    if data_config.noise_std > 0:
        noise = sample_gaussian(rng, pixels.shape, data_config.noise_std)
        pixels = (pixels + noise).clamp(0.0, 1.0)

    query_rows = sample_integers(rng, rows, (count,))
    query_cols = sample_integers(rng, cols, (count,))
    prompts = torch.stack(
        [
            torch.full((count,), BOS),
            torch.full((count,), COLOR),
            torch.full((count,), AT),
            query_rows + DIGIT_BASE,
            query_cols + DIGIT_BASE,
        ],
        dim=1,
    )
    answers = cells[torch.arange(count), query_rows, query_cols] + vocab.color_base
    return SampleBatch(pixels=pixels, cells=cells, prompts=prompts, answers=answers)


def generate(rng: Rng, model_config: ModelConfig, data_config: DataConfig, count: int) -> List[Sample]:
    return generate_batch(rng, model_config, data_config, count).samples()


def collate(samples: List[Sample]) -> SampleBatch:
    if not samples:
        raise RejectedInputError("cannot collate an empty sample list")
    return SampleBatch(
        pixels=torch.stack([s.pixels for s in samples]),
        cells=torch.stack([s.cells for s in samples]),
        prompts=torch.stack([s.prompt for s in samples]),
        answers=torch.tensor([s.answer for s in samples]),
    )


def oracle_answers(batch: SampleBatch, model_config: ModelConfig, data_config: DataConfig) -> torch.Tensor:
    """Nearest-prototype answer from the pixels of the queried cell alone."""
    vocab = vocabulary_for(model_config, data_config)
    p = model_config.patch_size
    palette = color_prototypes(data_config.colors, model_config.channels)
    answers = []
    for i in range(len(batch)):
        r = int(batch.prompts[i, 3]) - DIGIT_BASE
        c = int(batch.prompts[i, 4]) - DIGIT_BASE
        patch = batch.pixels[i, r * p:(r + 1) * p, c * p:(c + 1) * p].reshape(-1, model_config.channels)
        distances = ((patch.mean(0) - palette) ** 2).sum(-1)
        answers.append(int(distances.argmin()) + vocab.color_base)
    return torch.tensor(answers)


# ── corpus dump ───────────────────────────────────────────────────────────────

def dump_corpus(batch: SampleBatch, vocab: Vocabulary, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_tensor(out / "pixels.lvtd", batch.pixels)
        save_tensor(out / "cells.lvtd", batch.cells.float())
        save_tensor(out / "prompts.lvtd", batch.prompts.float())
        save_tensor(out / "answers.lvtd", batch.answers.float())
        with open(out / "index.jsonl", "w", encoding="utf-8") as f:
            for i in range(len(batch)):
                record = {
                    "index": i,
                    "prompt": " ".join(vocab.describe(int(t)) for t in batch.prompts[i]),
                    "answer": vocab.describe(int(batch.answers[i])),
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise FormatError(f"cannot write corpus: {e}", str(out))
    logger.info("Dumped %d samples to %s", len(batch), out)
    return out


def load_corpus(in_dir: Union[str, Path]) -> SampleBatch:
    src = Path(in_dir)
    batch = SampleBatch(
        pixels=load_tensor(src / "pixels.lvtd"),
        cells=load_tensor(src / "cells.lvtd").long(),
        prompts=load_tensor(src / "prompts.lvtd").long(),
        answers=load_tensor(src / "answers.lvtd").long(),
    )
    if not (batch.pixels.shape[0] == batch.cells.shape[0] == batch.prompts.shape[0] == batch.answers.shape[0]):
        raise FormatError("corpus fields disagree on sample count", str(src))
    return batch
