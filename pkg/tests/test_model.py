import math

import pytest
import torch

from exceptions import ForwardFault, RejectedInputError
from geometry.spatial import build_mixed_layout, build_packed_layout, text_segment, vision_segment
from models import MicroMLLM, PatchProjector
from schemas import ModelConfig
from substrate.tensor_ops import Rng, sample_gaussian, sample_integers
from conftest import TINY_MODEL


def reference_causal_decoder(model, tokens):
    """Pre-norm causal decoder written out with complex-number rotary on each half of every head."""
    cfg = model.config
    length, d_model = tokens.shape
    heads, head_dim = cfg.n_heads, cfg.head_dim
    half = head_dim // 2
    freqs = cfg.rope_base ** (-torch.arange(0, half, 2, dtype=torch.float64) / half)
    turns = torch.polar(torch.ones(length, half // 2, dtype=torch.float64), torch.arange(length).double()[:, None] * freqs)

    def rotate(x):
        parts = []
        for part in (x[..., :half], x[..., half:]):
            pairs = torch.view_as_complex(part.contiguous().reshape(length, heads, half // 2, 2))
            parts.append(torch.view_as_real(pairs * turns[:, None, :]).reshape(length, heads, half))
        return torch.cat(parts, -1)

    def norm(x, ln):
        mean = x.mean(-1, keepdim=True)
        var = ((x - mean) ** 2).mean(-1, keepdim=True)
        return (x - mean) / torch.sqrt(var + 1e-5) * ln.weight + ln.bias

    causal = torch.ones(length, length, dtype=torch.bool).tril()
    x = tokens
    for block in model.blocks:
        qkv = norm(x, block.ln1) @ block.attn.qkv.weight.T + block.attn.qkv.bias
        q, k, v = (qkv[:, i * d_model:(i + 1) * d_model].reshape(length, heads, head_dim) for i in range(3))
        scores = torch.einsum("qhd,khd->hqk", rotate(q), rotate(k)) / math.sqrt(head_dim)
        probs = scores.masked_fill(~causal, float("-inf")).softmax(-1)
        mixed = torch.einsum("hqk,khd->qhd", probs, v).reshape(length, d_model)
        x = x + mixed @ block.attn.out.weight.T + block.attn.out.bias
        z = norm(x, block.ln2) @ block.fc1.weight.T + block.fc1.bias
        x = x + (0.5 * z * (1 + torch.erf(z / math.sqrt(2)))) @ block.fc2.weight.T + block.fc2.bias
    final = norm(x, model.final_norm)
    return final, final @ model.lm_head.weight.T + model.lm_head.bias


def test_patchify_orders_tokens_row_major():
    config = ModelConfig(d_model=16, n_heads=2, patch_size=8, grid=(2, 2), vision_head_hidden=16)
    projector = PatchProjector(config)
    pixels = torch.zeros(16, 16, 3)
    pixels[8:, :8] = 1.0  # cell (1, 0)
    patches = projector.patchify(pixels)
    assert patches.shape == (4, 8 * 8 * 3)
    assert patches.sum(-1).tolist() == [0.0, 0.0, 192.0, 0.0]


def test_patchify_rejects_ragged_images(tiny_model):
    with pytest.raises(RejectedInputError, match="divisible"):
        tiny_model.embed_image(torch.zeros(5, 6, 3))


def test_zero_image_embeds_to_projector_bias(tiny_model):
    tokens = tiny_model.embed_image(torch.zeros(6, 6, 3))
    assert torch.equal(tokens, tiny_model.patch_projector.proj.bias.expand(9, 16))


def test_attention_rows_are_distributions(tiny_model, model_config):
    layout = build_packed_layout([vision_segment(3, 3, 0)], 11)
    tokens = sample_gaussian(Rng(2), (11, model_config.d_model))
    trace = tiny_model(tokens, layout, capture=True)
    probs = trace.attentions  # [L, h, T, T]
    assert probs.shape == (2, 2, 11, 11)
    assert torch.allclose(probs[..., :9, :].sum(-1), torch.ones(2, 2, 9), atol=1e-6)
    assert torch.equal(probs[..., 9:, :], torch.zeros(2, 2, 2, 11))
    assert torch.equal(probs[..., :9, 9:], torch.zeros(2, 2, 9, 2))
    assert trace.hidden_states.shape == (3, 11, 16)
    assert trace.text_logits is None
    assert trace.visual_logits.shape == (9, 8)


def test_packed_images_do_not_influence_each_other(tiny_model, model_config):
    layout = build_packed_layout([vision_segment(3, 3, 0), vision_segment(3, 3, 1)], 20)
    tokens = sample_gaussian(Rng(3), (20, model_config.d_model))
    changed = tokens.clone()
    changed[9:18] = sample_gaussian(Rng(4), (9, model_config.d_model))
    with torch.no_grad():
        a = tiny_model(tokens, layout).final_hidden
        b = tiny_model(changed, layout).final_hidden
    assert torch.equal(a[:9], b[:9])
    assert not torch.equal(a[9:18], b[9:18])


def test_packed_isolation_holds_for_random_shapes(tiny_model, model_config):
    rng = Rng(15)
    for _ in range(100):
        r1, c1, r2, c2 = (int(v) + 1 for v in sample_integers(rng, 4, (4,)))
        n1, n2 = r1 * c1, r2 * c2
        pad_to = n1 + n2 + int(sample_integers(rng, 4, (1,)))
        layout = build_packed_layout([vision_segment(r1, c1, 0), vision_segment(r2, c2, 1)], pad_to)
        tokens = sample_gaussian(rng, (pad_to, model_config.d_model))
        changed = tokens.clone()
        changed[:n1] = sample_gaussian(rng, (n1, model_config.d_model))
        with torch.no_grad():
            a = tiny_model(tokens, layout, capture=True)
            b = tiny_model(changed, layout, capture=True)
        image_b = slice(n1, n1 + n2)
        assert torch.equal(a.hidden_states[:, image_b], b.hidden_states[:, image_b])
        assert torch.equal(a.visual_logits[n1:], b.visual_logits[n1:])
        assert not bool(a.attentions[..., :n1, image_b].any())
        assert not bool(a.attentions[..., image_b, :n1].any())


def test_single_token_attends_to_its_own_value(tiny_model, model_config):
    attn = tiny_model.blocks[0].attn
    x = sample_gaussian(Rng(14), (1, model_config.d_model))
    with torch.no_grad():
        out, probs = attn(x, build_mixed_layout([text_segment(1)]))
        expected = attn.out(attn.qkv(x)[:, 2 * model_config.d_model:])
    assert torch.equal(probs, torch.ones(model_config.n_heads, 1, 1))
    assert torch.allclose(out, expected, atol=1e-6)


def test_causal_layout_with_shared_indices_is_a_plain_rotary_decoder():
    config = ModelConfig(**TINY_MODEL, init_std=0.3)
    model = MicroMLLM(config, Rng(12)).double()
    layout = build_mixed_layout([vision_segment(3, 3), text_segment(4)], mixed=False, rope_2d=False)
    assert torch.equal(layout.row_index, layout.col_index)
    tokens = sample_gaussian(Rng(13), (13, config.d_model)).double()
    with torch.no_grad():
        trace = model(tokens, layout)
        final, logits = reference_causal_decoder(model, tokens)
    assert torch.allclose(trace.final_hidden, final, atol=1e-10)
    assert torch.allclose(trace.text_logits, logits, atol=1e-10)


def test_text_never_changes_vision_under_mixed_attention(tiny_model, model_config):
    layout = build_mixed_layout([vision_segment(3, 3), text_segment(4)])
    tokens = sample_gaussian(Rng(5), (13, model_config.d_model))
    changed = tokens.clone()
    changed[9:] += 1.0
    with torch.no_grad():
        a = tiny_model(tokens, layout)
        b = tiny_model(changed, layout)
    assert torch.equal(a.visual_logits, b.visual_logits)
    assert a.text_logits.shape == (13, model_config.vocab_size)


def test_vision_head_is_positively_homogeneous(tiny_model, model_config):
    hidden = sample_gaussian(Rng(6), (5, model_config.d_model))
    head = tiny_model.visual_logits
    assert torch.equal(head(torch.zeros(1, model_config.d_model)), torch.zeros(1, 8))
    assert torch.allclose(head(3.0 * hidden), 3.0 * head(hidden), atol=1e-5)


def test_vision_head_matches_explicit_mlp(tiny_model, model_config):
    hidden = sample_gaussian(Rng(7), (4, model_config.d_model))
    h = tiny_model.vision_head
    expected = torch.relu(torch.relu(hidden @ h.fc1.weight.T + h.fc1.bias) @ h.fc2.weight.T + h.fc2.bias)
    expected = expected @ h.fc3.weight.T + h.fc3.bias
    assert torch.allclose(h(hidden), expected, atol=1e-6)


def test_same_seed_builds_same_weights(model_config):
    a = MicroMLLM(model_config, Rng(8)).state_dict()
    b = MicroMLLM(model_config, Rng(8)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert torch.equal(a["blocks.0.ln1.weight"], torch.ones(16))
    assert torch.equal(a["lm_head.bias"], torch.zeros(model_config.vocab_size))


def test_non_finite_hidden_state_raises_forward_fault(tiny_model, model_config):
    layout = build_packed_layout([vision_segment(3, 3, 0)], 9)
    tokens = torch.full((9, model_config.d_model), float("nan"))
    with pytest.raises(ForwardFault) as info:
        tiny_model(tokens, layout)
    assert info.value.layer == 1


def test_forward_rejects_length_mismatch(tiny_model):
    layout = build_packed_layout([vision_segment(3, 3, 0)], 9)
    with pytest.raises(RejectedInputError):
        tiny_model(torch.zeros(8, 16), layout)


def test_no_attention_mass_crosses_packed_images(tiny_model, model_config):
    layout = build_packed_layout([vision_segment(3, 3, 0), vision_segment(3, 3, 1)], 20)
    tokens = sample_gaussian(Rng(9), (20, model_config.d_model))
    with torch.no_grad():
        probs = tiny_model(tokens, layout, capture=True).attentions
    assert torch.equal(probs[..., :9, 9:], torch.zeros_like(probs[..., :9, 9:]))
    assert torch.equal(probs[..., 9:18, :9], torch.zeros_like(probs[..., 9:18, :9]))
