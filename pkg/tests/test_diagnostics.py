import math

import pytest
import torch

from diagnostics.images import (
    cosine_matrix,
    cosine_matrix_bytes,
    heatmap_from_attentions,
    load_image,
    pca_rgb,
    principal_components,
    save_image,
)
from diagnostics.measures import (
    allocation_from_attentions,
    average_profiles,
    cka,
    cka_profile_from_layers,
    cknna,
    cknna_profile_from_layers,
    homogenization_from_layers,
    hsic,
    knn_mask,
    linear_kernel,
    mean_pairwise_cosine,
)
from exceptions import RejectedInputError
from substrate.tensor_ops import Rng, sample_gaussian


# ── brute-force references ───────────────────────────────────────────────────

def centered(kernel):
    n = len(kernel)
    h = [[(1.0 if i == j else 0.0) - 1.0 / n for j in range(n)] for i in range(n)]
    hk = [[sum(h[i][a] * kernel[a][j] for a in range(n)) for j in range(n)] for i in range(n)]
    return [[sum(hk[i][a] * h[a][j] for a in range(n)) for j in range(n)] for i in range(n)]


def neighbours(kernel, k):
    n = len(kernel)
    result = []
    for i in range(n):
        others = sorted((j for j in range(n) if j != i), key=lambda j: (-kernel[i][j], j))
        result.append(set(others[:k]))
    return result


def reference_cknna(a, b, k):
    ka = [[float(x) for x in row] for row in (a.double() @ a.double().T)]
    kb = [[float(x) for x in row] for row in (b.double() @ b.double().T)]
    ca, cb = centered(ka), centered(kb)
    na, nb = neighbours(ka, k), neighbours(kb, k)
    n = len(ka)

    def total(x, y, keep):
        return sum(x[i][j] * y[i][j] for i in range(n) for j in range(n) if keep(i, j))

    cross = total(ca, cb, lambda i, j: j in na[i] and j in nb[i])
    self_a = total(ca, ca, lambda i, j: j in na[i])
    self_b = total(cb, cb, lambda i, j: j in nb[i])
    return cross / math.sqrt(self_a * self_b)


# ── homogenization ────────────────────────────────────────────────────────────

def test_mean_pairwise_cosine_examples():
    assert mean_pairwise_cosine(torch.tensor([[1.0, 0.0], [2.0, 0.0], [0.5, 0.0]])) == pytest.approx(1.0)
    assert mean_pairwise_cosine(torch.tensor([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(0.0)
    assert mean_pairwise_cosine(torch.tensor([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx(-1.0)


def test_mean_pairwise_cosine_ignores_order_and_scale():
    x = sample_gaussian(Rng(0), (6, 5))
    shuffled = x[torch.tensor([3, 0, 5, 1, 4, 2])] * 4.0
    assert mean_pairwise_cosine(shuffled) == pytest.approx(mean_pairwise_cosine(x))


def test_mean_pairwise_cosine_needs_two_rows():
    with pytest.raises(RejectedInputError):
        mean_pairwise_cosine(torch.ones(1, 3))


def test_homogenization_averages_images():
    same = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    opposite = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    layers = torch.stack([torch.stack([same, opposite]), torch.stack([same, same])])
    assert homogenization_from_layers(layers) == pytest.approx([0.0, 1.0])


# ── attention allocation ─────────────────────────────────────────────────────

def test_allocation_of_hand_built_attention():
    attn = torch.zeros(2, 2, 4, 4)  # [L, heads, T, T]; vision = {0, 1}
    attn[0, 0, 3] = torch.tensor([0.5, 0.25, 0.0, 0.25])
    attn[0, 1, 3] = torch.tensor([0.0, 0.0, 0.5, 0.5])
    attn[1, :, 3] = torch.tensor([0.0, 1.0, 0.0, 0.0])
    values = allocation_from_attentions(attn, torch.tensor([0, 1]), torch.tensor([3]))
    assert values == pytest.approx([0.375, 1.0])


def test_allocation_without_vision_is_zero():
    attn = torch.softmax(sample_gaussian(Rng(1), (1, 2, 5, 5)), -1)
    assert allocation_from_attentions(attn, torch.tensor([], dtype=torch.long), torch.tensor([4])) == [0.0]


def test_allocation_rejects_bad_positions():
    attn = torch.zeros(1, 1, 3, 3)
    with pytest.raises(RejectedInputError):
        allocation_from_attentions(attn, torch.tensor([0]), torch.tensor([], dtype=torch.long))
    with pytest.raises(RejectedInputError):
        allocation_from_attentions(attn, torch.tensor([5]), torch.tensor([2]))


# ── kernel alignment ──────────────────────────────────────────────────────────

def test_cka_of_identical_and_rescaled_features():
    x = sample_gaussian(Rng(2), (8, 5))
    k = linear_kernel(x)
    assert cka(k, k) == pytest.approx(1.0)
    assert cka(k, linear_kernel(3.0 * x)) == pytest.approx(1.0)


def test_cka_is_rotation_invariant():
    x = sample_gaussian(Rng(3), (8, 4)).double()
    q, _ = torch.linalg.qr(sample_gaussian(Rng(4), (4, 4)).double())
    y = sample_gaussian(Rng(5), (8, 3)).double()
    assert cka(linear_kernel(x @ q), linear_kernel(y)) == pytest.approx(cka(linear_kernel(x), linear_kernel(y)))


def test_hsic_matches_explicit_centering():
    x = sample_gaussian(Rng(6), (5, 3))
    y = sample_gaussian(Rng(7), (5, 2))
    ka, kb = linear_kernel(x), linear_kernel(y)
    ca, cb = centered(ka.tolist()), centered(kb.tolist())
    expected = sum(ca[i][j] * cb[i][j] for i in range(5) for j in range(5)) / 16
    assert hsic(ka, kb) == pytest.approx(expected)


def test_degenerate_kernel_is_rejected():
    constant = torch.ones(4, 3)
    with pytest.raises(RejectedInputError, match="degenerate"):
        cka(linear_kernel(constant), linear_kernel(sample_gaussian(Rng(8), (4, 3))))


def test_asymmetric_kernel_is_rejected():
    with pytest.raises(RejectedInputError, match="symmetric"):
        hsic(torch.tensor([[1.0, 2.0], [0.0, 1.0]]), torch.eye(2))


def test_knn_ties_prefer_lower_index():
    kernel = torch.tensor([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    assert knn_mask(kernel, 1).tolist() == [[False, True, False], [True, False, False], [True, False, False]]


@pytest.mark.parametrize("n", [4, 6, 8])
def test_cknna_matches_brute_force(n):
    rng = Rng(100 + n)
    for _ in range(20):
        a = sample_gaussian(rng, (n, 5))
        b = sample_gaussian(rng, (n, 3))
        for k in range(1, n):
            assert cknna(a, b, k) == pytest.approx(reference_cknna(a, b, k), abs=1e-9)


def test_cknna_self_alignment_is_one():
    x = sample_gaussian(Rng(9), (8, 4))
    for k in range(1, 8):
        assert cknna(x, x, k) == pytest.approx(1.0)


def test_cknna_rejects_k_out_of_range():
    x = sample_gaussian(Rng(10), (4, 3))
    with pytest.raises(RejectedInputError):
        cknna(x, x, 4)
    with pytest.raises(RejectedInputError):
        cknna(x, x, 0)


def test_profiles_start_at_one():
    layers = sample_gaussian(Rng(11), (3, 2, 6, 4))
    assert cka_profile_from_layers(layers)[0] == pytest.approx(1.0)
    profile = cknna_profile_from_layers(layers, 3)
    assert len(profile) == 3
    assert profile[0] == pytest.approx(1.0)


def test_average_profiles_weights_by_count():
    assert average_profiles([[1.0, 0.0], [0.0, 1.0]], [3, 1]) == pytest.approx([0.75, 0.25])
    with pytest.raises(RejectedInputError):
        average_profiles([[1.0]], [1, 2])


# ── images ────────────────────────────────────────────────────────────────────

def _walsh_features():
    h1 = torch.tensor([1, 1, 1, 1, -1, -1, -1, -1], dtype=torch.float64)
    h2 = torch.tensor([1, 1, -1, -1, 1, 1, -1, -1], dtype=torch.float64)
    h3 = torch.tensor([1, -1, 1, -1, 1, -1, 1, -1], dtype=torch.float64)
    return torch.stack([3 * h1, 2 * h2, h3, torch.zeros(8, dtype=torch.float64)], dim=1) + 5.0, (h1, h2, h3)


def test_principal_components_of_orthogonal_design():
    features, (h1, h2, h3) = _walsh_features()
    projected, values = principal_components(features, 3)
    assert values.tolist() == pytest.approx([72 / 7, 32 / 7, 8 / 7])
    assert torch.allclose(projected[:, 0], 3 * h1, atol=1e-9)
    assert torch.allclose(projected[:, 1], 2 * h2, atol=1e-9)
    assert torch.allclose(projected[:, 2], h3, atol=1e-9)


def test_principal_components_reject_low_rank():
    x = sample_gaussian(Rng(12), (8, 1)).double()
    with pytest.raises(RejectedInputError, match="rank"):
        principal_components(torch.cat([x, 2 * x, -x, x], dim=1), 3)


def test_pca_rgb_spans_full_byte_range():
    features, _ = _walsh_features()
    image = pca_rgb(features, (2, 4))
    assert image.shape == (2, 4, 3)
    assert image.dtype == torch.uint8
    for channel in range(3):
        assert int(image[..., channel].min()) == 0
        assert int(image[..., channel].max()) == 255


def test_cosine_matrix_and_bytes():
    x = torch.tensor([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]])
    sims = cosine_matrix(x)
    assert sims.dtype == torch.float64
    assert torch.allclose(sims, torch.tensor([[1.0, 0, -1], [0, 1, 0], [-1, 0, 1]], dtype=torch.float64))
    assert cosine_matrix_bytes(x).tolist() == [[255, 128, 0], [128, 255, 128], [0, 128, 255]]


def test_heatmap_picks_the_query_row():
    attn = torch.zeros(1, 2, 6, 6)
    attn[0, :, 5, :4] = torch.tensor([0.1, 0.2, 0.3, 0.4])
    heat = heatmap_from_attentions(attn, torch.arange(4), 5, (2, 2))
    assert heat.tolist() == [[0, 85], [170, 255]]


def test_images_round_trip_through_netpbm(tmp_path):
    rgb = torch.arange(2 * 3 * 3, dtype=torch.uint8).reshape(2, 3, 3)
    gray = torch.tensor([[0, 255], [128, 7]], dtype=torch.uint8)
    rgb_path = save_image(tmp_path / "a.ppm", rgb)
    gray_path = save_image(tmp_path / "b.pgm", gray, scale=2)
    assert rgb_path.read_bytes()[:2] == b"P6"
    assert gray_path.read_bytes()[:2] == b"P5"
    assert torch.equal(load_image(rgb_path), rgb)
    upscaled = load_image(gray_path)
    assert upscaled.shape == (4, 4)
    assert torch.equal(upscaled[::2, ::2], gray)


def test_save_image_rejects_floats(tmp_path):
    with pytest.raises(RejectedInputError):
        save_image(tmp_path / "x.pgm", torch.zeros(2, 2))
