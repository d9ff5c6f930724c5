import math

import numpy as np
import pytest
import torch
from torch import nn

from tsgan.discriminators import (ImageDiscriminator, ImageDiscriminatorConfig, VideoDiscriminator,
                                  VideoDiscriminatorConfig, d_image_score, d_video_score, gather_frames,
                                  SpectralNorm, normalized_weights, sample_frame_subset, spectral_normalize)


def set_weight(module, value):
    """Write the raw (pre-normalisation) weight of a spectrally normalised layer."""
    with torch.no_grad():
        module.parametrizations.weight.original.copy_(value)


def tiny_image_disc(labels=(3,)):
    return ImageDiscriminator(ImageDiscriminatorConfig(base_width=2, widths=(1, 2, 2), frames_judged=2), labels)


def tiny_video_disc(labels=(3,), frames=4):
    return VideoDiscriminator(VideoDiscriminatorConfig(base_width=2, widths=(1, 2, 2, 2)), labels, frames)


def test_frame_subset_cases():
    assert sample_frame_subset(6, 6).tolist() == list(range(6))
    one = sample_frame_subset(6, 1, torch.Generator().manual_seed(0))
    assert one.shape == (1,) and 0 <= one.item() < 6
    for n in (0, 7):
        with pytest.raises(ValueError):
            sample_frame_subset(6, n)
    a = sample_frame_subset(8, 3, torch.Generator().manual_seed(5))
    b = sample_frame_subset(8, 3, torch.Generator().manual_seed(5))
    assert torch.equal(a, b) and len(set(a.tolist())) == 3


def test_frame_subset_uniform():
    g = torch.Generator().manual_seed(0)
    T, N, draws = 8, 3, 10_000
    counts = np.zeros(T)
    for _ in range(draws):
        counts[sample_frame_subset(T, N, g).numpy()] += 1
    p = N / T
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.abs(counts - draws * p).max() <= 3 * sigma


def test_gather_frames_shape():
    v = torch.randn(5, 6, 3, 4, 4)
    assert gather_frames(v, 2, torch.Generator().manual_seed(0)).shape == (5, 2, 3, 4, 4)


def test_zero_head_scores_zero():
    disc = tiny_image_disc()
    set_weight(disc.head.linear, torch.zeros(1, 4))
    disc.head.linear.bias.data.zero_()
    set_weight(disc.head.embeddings[0], torch.zeros(3, 4))
    scores = d_image_score(torch.rand(2, 2, 3, 16, 16) * 2 - 1, torch.tensor([0, 2]), disc)
    assert torch.equal(scores, torch.zeros(2))


def test_projection_decomposition():
    torch.manual_seed(0)
    disc = tiny_image_disc().double()
    disc(torch.randn(2, 2, 3, 16, 16, dtype=torch.float64), torch.tensor([0, 1]))
    disc.eval()
    x = torch.randn(1, 2, 3, 16, 16, dtype=torch.float64)
    s1, s2 = disc(x, torch.tensor([0])), disc(x, torch.tensor([2]))
    emb = disc.head.embeddings[0].weight
    phi = disc.features(x[0])
    expected = ((emb[0] - emb[2]) * phi).sum(dim=1).mean()
    torch.testing.assert_close((s1 - s2)[0], expected, rtol=0, atol=1e-10)


def test_opposite_embeddings():
    disc = tiny_image_disc().double()
    raw = torch.randn(4, dtype=torch.float64)
    set_weight(disc.head.embeddings[0], torch.stack([raw, -raw, torch.zeros(4, dtype=torch.float64)]))
    disc(torch.randn(1, 1, 3, 16, 16, dtype=torch.float64), torch.tensor([0]))
    disc.eval()
    x = torch.randn(1, 1, 3, 16, 16, dtype=torch.float64)
    diff = disc(x, torch.tensor([0])) - disc(x, torch.tensor([1]))
    e = disc.head.embeddings[0].weight[0]
    torch.testing.assert_close(diff[0], 2 * (e * disc.features(x[0])[0]).sum(), rtol=0, atol=1e-10)


def test_hand_set_toy_critic():
    disc = ImageDiscriminator(ImageDiscriminatorConfig(base_width=1, widths=(1,), frames_judged=2), (2,)).double()
    block = disc.blocks[0]
    w1 = torch.zeros(1, 3, 3, 3, dtype=torch.float64)
    w1[0, 0, 1, 1] = 2.0
    w2 = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    w2[0, 0, 1, 1] = -3.0
    ws = torch.zeros(1, 3, 1, 1, dtype=torch.float64)
    ws[0, 1] = 0.5
    for conv, w in ((block.conv1, w1), (block.conv2, w2), (block.skip, ws)):
        set_weight(conv, w)
        conv.bias.data.zero_()
    set_weight(disc.head.linear, torch.tensor([[4.0]], dtype=torch.float64))
    disc.head.linear.bias.data.fill_(0.3)
    set_weight(disc.head.embeddings[0], torch.tensor([[2.0], [-1.0]], dtype=torch.float64))
    x = torch.randn(1, 2, 3, 2, 2, dtype=torch.float64)
    score = disc(x, torch.tensor([1]))
    # SN makes each single-entry weight its sign; the embedding column becomes (2, -1)/sqrt(5)
    x0, x1 = x[0, :, 0].numpy(), x[0, :, 1].numpy()
    phi = np.maximum(-np.maximum(x0, 0) + x1, 0).sum(axis=(1, 2))
    expected = np.mean(phi + 0.3 + (-1 / math.sqrt(5)) * phi)
    assert abs(score.item() - expected) < 1e-9


def test_frame_order_invariance():
    torch.manual_seed(1)
    disc = tiny_image_disc().eval()
    x = torch.randn(2, 3, 3, 16, 16)
    y = torch.tensor([0, 1])
    torch.testing.assert_close(disc(x, y), disc(x[:, [2, 0, 1]], y), rtol=1e-6, atol=1e-6)


def test_unknown_label_rejected():
    disc = tiny_image_disc()
    with pytest.raises(ValueError):
        disc(torch.randn(1, 2, 3, 16, 16), torch.tensor([3]))


def test_video_zero_weights():
    disc = tiny_video_disc()
    for conv in disc.convs:
        set_weight(conv, torch.zeros_like(conv.parametrizations.weight.original))
        conv.bias.data.zero_()
    disc.head.linear.bias.data.zero_()
    assert torch.equal(d_video_score(torch.randn(2, 4, 3, 16, 16), torch.tensor([0, 1]), disc), torch.zeros(2))


def test_video_wrong_length():
    with pytest.raises(ValueError):
        tiny_video_disc()(torch.randn(1, 5, 3, 16, 16), torch.tensor([0]))


def test_video_sensitive_to_frame_order():
    torch.manual_seed(2)
    disc = tiny_video_disc().double()
    first = disc.convs[0]
    w = torch.zeros_like(first.parametrizations.weight.original)
    w[:, :, 0, 1, 1] = 1.0
    w[:, :, 1, 1, 1] = -1.0
    set_weight(first, w)
    disc.eval()
    x = torch.randn(1, 4, 3, 16, 16, dtype=torch.float64)
    shuffled = x[:, [2, 0, 3, 1]]
    y = torch.tensor([1])
    assert disc(x, y).item() != disc(shuffled, y).item()


def test_video_finite_difference():
    torch.manual_seed(3)
    disc = tiny_video_disc().double().eval()
    x = torch.randn(1, 4, 3, 16, 16, dtype=torch.float64)
    v = torch.randn_like(x)
    y = torch.tensor([2])
    h = 1e-6
    fd = (disc(x + h * v, y) - disc(x - h * v, y)) / (2 * h)
    _, jvp = torch.autograd.functional.jvp(lambda a: disc(a, y), x, v)
    assert ((fd - jvp).abs() / jvp.abs()).item() <= 1e-5


def test_video_disc_covers_t8_and_t16():
    for frames in (8, 16):
        disc = VideoDiscriminator(VideoDiscriminatorConfig(base_width=2), (2,), frames)
        assert disc(torch.randn(1, frames, 3, 48, 48), torch.tensor([0])).shape == (1,)


def test_sn_identity_unchanged():
    out, _, sigma = spectral_normalize(torch.eye(4, dtype=torch.float64), torch.ones(4, dtype=torch.float64) / 2)
    torch.testing.assert_close(out, torch.eye(4, dtype=torch.float64))
    assert abs(sigma.item() - 1) < 1e-12


def test_sn_diag_converges_to_svd():
    w = torch.diag(torch.tensor([3.0, 1.0], dtype=torch.float64))
    u = torch.tensor([0.6, 0.8], dtype=torch.float64)
    for _ in range(100):
        out, u, _ = spectral_normalize(w, u)
    torch.testing.assert_close(out, torch.diag(torch.tensor([1.0, 1 / 3], dtype=torch.float64)), rtol=0, atol=1e-10)


def test_sn_random_matrix():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(8, 8, generator=g, dtype=torch.float64)
    u = torch.randn(8, generator=g, dtype=torch.float64)
    for _ in range(50):
        out, u, _ = spectral_normalize(w, u)
    top = torch.linalg.svdvals(out)[0].item()
    assert 0.9 <= top <= 1.01


def test_sn_zero_matrix():
    out, _, sigma = spectral_normalize(torch.zeros(3, 5), torch.ones(3))
    assert torch.equal(out, torch.zeros(3, 5)) and sigma.item() == 0


def test_normalized_weights_audit_after_updates():
    torch.manual_seed(5)
    disc = tiny_image_disc()
    for _ in range(30):
        disc(torch.randn(2, 2, 3, 16, 16), torch.tensor([0, 1]))
    mats = normalized_weights(disc)
    assert len(mats) == sum(isinstance(m, (nn.Conv2d, nn.Linear, nn.Embedding)) for m in disc.modules())
    assert max(torch.linalg.svdvals(m)[0].item() for m in mats.values()) <= 1.01


def test_normalized_weights_audit_is_read_only():
    disc = tiny_image_disc().train()
    disc(torch.randn(2, 2, 3, 16, 16), torch.tensor([0, 1]))
    before = {k: v.clone() for k, v in disc.state_dict().items()}
    normalized_weights(disc)
    assert disc.training
    assert all(torch.equal(before[k], v) for k, v in disc.state_dict().items())


def exact_video_disc(labels=(3,), frames=4):
    cfg = VideoDiscriminatorConfig(base_width=2, widths=(1, 2, 2, 2), power_iters=None)
    return VideoDiscriminator(cfg, labels, frames)


def test_sn_exact_top_singular_value_is_one():
    torch.manual_seed(0)
    w = torch.randn(6, 10, dtype=torch.float64)
    # clustered top spectrum: one power iteration would lag here
    u, s, vh = torch.linalg.svd(w, full_matrices=False)
    w = u @ torch.diag(torch.tensor([5.0, 4.99, 1, 0.5, 0.2, 0.1], dtype=torch.float64)) @ vh
    param = SpectralNorm(w, power_iters=None)
    for training in (True, False):
        param.train(training)
        assert abs(torch.linalg.svdvals(param(w))[0].item() - 1) <= 1e-12


def test_sn_exact_gradient_matches_autograd_of_true_norm():
    torch.manual_seed(1)
    w = torch.randn(5, 7, dtype=torch.float64, requires_grad=True)
    g = torch.randn(5, 7, dtype=torch.float64)
    (SpectralNorm(w.detach(), power_iters=None)(w) * g).sum().backward()
    w2 = w.detach().clone().requires_grad_(True)
    (w2 / torch.linalg.matrix_norm(w2, ord=2) * g).sum().backward()
    assert torch.allclose(w.grad, w2.grad, atol=1e-10)


def test_sn_exact_zero_matrix_passthrough():
    w = torch.zeros(3, 4)
    assert torch.equal(SpectralNorm(w, power_iters=None)(w), w)


def test_exact_critic_audit_after_updates():
    torch.manual_seed(2)
    disc = exact_video_disc()
    opt = torch.optim.Adam(disc.parameters(), lr=0.05)
    for _ in range(5):
        opt.zero_grad()
        disc(torch.rand(2, 4, 3, 16, 16) * 2 - 1, torch.tensor([0, 1])).sum().backward()
        opt.step()
    for name, w in normalized_weights(disc).items():
        assert abs(torch.linalg.svdvals(w.double())[0].item() - 1) <= 1e-4, name


def test_exact_mode_reaches_every_layer():
    disc = ImageDiscriminator(ImageDiscriminatorConfig(base_width=2, widths=(1, 2), power_iters=None), (3, 2))
    mods = [m for m in disc.modules() if isinstance(m, SpectralNorm)]
    assert mods and all(m.power_iters is None for m in mods)
