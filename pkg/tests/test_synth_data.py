import pytest
import torch

from data.synth_data import (
    AT,
    BOS,
    COLOR,
    DIGIT_BASE,
    collate,
    color_prototypes,
    dump_corpus,
    generate,
    generate_batch,
    load_corpus,
    oracle_answers,
    vocabulary_for,
)
from exceptions import RejectedInputError
from schemas import DataConfig
from substrate.tensor_ops import Rng


def test_noise_free_cells_are_solid_prototypes(model_config):
    data = DataConfig(colors=4, noise_std=0.0)
    batch = generate_batch(Rng(0), model_config, data, 3)
    palette = color_prototypes(4, 3)
    p = model_config.patch_size
    for i in range(3):
        for r in range(3):
            for c in range(3):
                cell = batch.pixels[i, r * p:(r + 1) * p, c * p:(c + 1) * p]
                assert torch.equal(cell, palette[batch.cells[i, r, c]].expand(p, p, 3))


def test_prototypes_are_distinct():
    palette = color_prototypes(8, 3)
    assert len({tuple(row.tolist()) for row in palette}) == 8
    assert float(palette.min()) >= 0.0 and float(palette.max()) <= 1.0


def test_prompts_ask_about_a_cell(model_config):
    data = DataConfig(colors=4)
    batch = generate_batch(Rng(1), model_config, data, 16)
    vocab = vocabulary_for(model_config, data)
    assert batch.prompts[:, :3].tolist() == [[BOS, COLOR, AT]] * 16
    rows = batch.prompts[:, 3] - DIGIT_BASE
    cols = batch.prompts[:, 4] - DIGIT_BASE
    assert torch.equal(batch.answers, batch.cells[torch.arange(16), rows, cols] + vocab.color_base)


def test_same_seed_same_corpus(model_config):
    data = DataConfig(colors=4)
    a = generate_batch(Rng(2), model_config, data, 5)
    b = generate_batch(Rng(2), model_config, data, 5)
    assert torch.equal(a.pixels, b.pixels)
    assert torch.equal(a.answers, b.answers)


def test_answers_are_roughly_uniform(model_config):
    data = DataConfig(colors=4)
    vocab = vocabulary_for(model_config, data)
    answers = generate_batch(Rng(3), model_config, data, 4000).answers - vocab.color_base
    counts = torch.bincount(answers, minlength=4).double() / 4000
    assert torch.all((counts - 0.25).abs() < 0.03)


def test_pixel_oracle_is_perfect(model_config):
    data = DataConfig(colors=4, noise_std=0.05)
    batch = generate_batch(Rng(4), model_config, data, 200)
    assert torch.equal(oracle_answers(batch, model_config, data), batch.answers)


def test_vocabulary_overflow_is_rejected(model_config):
    with pytest.raises(RejectedInputError, match="vocabulary"):
        generate_batch(Rng(0), model_config, DataConfig(colors=40), 1)


def test_vocabulary_describes_tokens(model_config):
    vocab = vocabulary_for(model_config, DataConfig(colors=4))
    assert [vocab.describe(t) for t in (BOS, vocab.digit(2), vocab.color(3))] == ["BOS", "2", "C3"]


def test_collate_inverts_samples(model_config):
    batch = generate_batch(Rng(5), model_config, DataConfig(colors=4), 3)
    again = collate(generate(Rng(5), model_config, DataConfig(colors=4), 3))
    assert torch.equal(again.prompts, batch.prompts)
    assert torch.equal(again.answers, batch.answers)


def test_corpus_dump_and_reload(tmp_path, model_config):
    data = DataConfig(colors=4)
    batch = generate_batch(Rng(6), model_config, data, 4)
    dump_corpus(batch, vocabulary_for(model_config, data), tmp_path)
    loaded = load_corpus(tmp_path)
    assert torch.equal(loaded.pixels, batch.pixels)
    assert torch.equal(loaded.answers, batch.answers)
    assert len((tmp_path / "index.jsonl").read_text().splitlines()) == 4
