import math

import numpy as np
import pytest
import torch

from midframe.losses import (
    LossWeights,
    PatchDiscriminator,
    adversarial_losses,
    edge_pyramid_features,
    kl_penalty,
    l1_loss,
    perceptual_loss,
    tokenizer_total_loss,
)
from midframe.tokenizer import LatentPosterior

from conftest import rand_frames


class TestL1:
    def test_identical_zero(self):
        x = rand_frames(1, 8, 8)
        assert float(l1_loss(x, x)) == 0.0

    def test_constant_difference(self):
        x = torch.full((8, 8, 3), 0.4)
        y = torch.full((8, 8, 3), 0.5)
        assert float(l1_loss(x, y)) == pytest.approx(0.1)

    def test_extremes(self):
        assert float(l1_loss(torch.zeros(4, 4, 3), torch.ones(4, 4, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            l1_loss(torch.zeros(4, 4, 3), torch.zeros(4, 5, 3))


class TestPerceptual:
    def test_identical_zero(self):
        x = rand_frames(1, 8, 8)
        assert float(perceptual_loss(x, x)) == 0.0

    def test_constant_offset_hits_identity_level_only(self):
        # Hand oracle on 4x4 frames: a constant offset contributes its square
        # through the identity level; all finite-difference levels cancel.
        target = rand_frames(1, 4, 4, seed=3)
        c = 0.125
        pred = target + c
        val = float(perceptual_loss(pred, target))
        assert val == pytest.approx(c**2, rel=1e-6)

    def test_symmetry(self):
        a, b = rand_frames(1, 8, 8, 1), rand_frames(1, 8, 8, 2)
        assert float(perceptual_loss(a, b)) == pytest.approx(float(perceptual_loss(b, a)))

    def test_level_count(self):
        levels = edge_pyramid_features(rand_frames(1, 8, 8))
        assert len(levels) == 5  # identity + (dx, dy) at two scales


class TestKL:
    def test_standard_normal_zero(self):
        post = LatentPosterior(torch.zeros(1, 4, 2), torch.zeros(1, 4, 2))
        assert float(kl_penalty(post)) == 0.0

    def test_unit_mean(self):
        post = LatentPosterior(torch.ones(1, 4, 2), torch.zeros(1, 4, 2))
        assert float(kl_penalty(post)) == pytest.approx(0.5)

    def test_unit_logvar(self):
        post = LatentPosterior(
            torch.zeros(1, 4, 2, dtype=torch.float64),
            torch.ones(1, 4, 2, dtype=torch.float64),
        )
        assert float(kl_penalty(post)) == pytest.approx(0.5 * (math.e - 2.0), abs=1e-12)

    def test_zero_iff_standard_normal(self):
        gen = torch.Generator().manual_seed(0)
        mean = torch.randn(1, 4, 2, generator=gen) * 0.1
        post = LatentPosterior(mean, torch.zeros(1, 4, 2))
        assert float(kl_penalty(post)) > 0.0


class TestDiscriminator:
    def test_logit_map_shape(self):
        torch.manual_seed(0)
        disc = PatchDiscriminator()
        logits = disc(rand_frames(2, 64, 64))
        assert logits.shape == (2, 8, 8)

    def test_zero_weights_bias_everywhere(self):
        disc = PatchDiscriminator()
        with torch.no_grad():
            for conv in disc.stages:
                conv.weight.zero_()
                conv.bias.zero_()
            disc.head.weight.zero_()
            disc.head.bias.fill_(0.7)
        logits = disc(rand_frames(1, 16, 16))
        assert torch.allclose(logits, torch.full_like(logits, 0.7))

    def test_too_small_error(self):
        disc = PatchDiscriminator()
        with pytest.raises(ValueError, match="receptive field"):
            disc(torch.rand(4, 4, 3))

    def test_matches_naive_conv_oracle(self):
        # Brute-force oracle: loop-based strided conv + leaky relu chain.
        torch.manual_seed(1)
        disc = PatchDiscriminator(widths=(4, 8, 8))
        img = torch.zeros(16, 16, 3)
        img[4, 4, 0] = 1.0  # impulse
        logits = disc(img)

        def naive(x):  # x: (C, H, W) numpy
            for conv in disc.stages:
                w = conv.weight.detach().numpy()
                b = conv.bias.detach().numpy()
                co, ci, kh, kw = w.shape
                oh, ow = x.shape[1] // 2, x.shape[2] // 2
                out = np.zeros((co, oh, ow))
                for o in range(co):
                    for yy in range(oh):
                        for xx in range(ow):
                            patch = x[:, 2 * yy : 2 * yy + kh, 2 * xx : 2 * xx + kw]
                            out[o, yy, xx] = (patch * w[o]).sum() + b[o]
                x = np.where(out > 0, out, 0.2 * out)
            wh = disc.head.weight.detach().numpy()[:, :, 0, 0]
            bh = disc.head.bias.detach().numpy()
            return np.einsum("oc,chw->ohw", wh, x)[0] + bh[0]

        oracle = naive(img.permute(2, 0, 1).numpy())
        assert np.allclose(logits[0].detach().numpy(), oracle, atol=1e-5)

    def test_translation_by_stride_cycle_shifts_logits(self):
        # Kernel size equals stride, so an 8px shift moves the logit map by
        # exactly one cell with no boundary effects.
        torch.manual_seed(2)
        disc = PatchDiscriminator(widths=(4, 8, 8))
        img = torch.zeros(16, 16, 3)
        img[3, 5, 1] = 1.0
        shifted = torch.roll(img, shifts=8, dims=0)
        base = disc(img)[0]
        moved = disc(shifted)[0]
        assert torch.allclose(moved[1, :], base[0, :], atol=1e-6)
        assert torch.allclose(moved[0, :], base[1, :], atol=1e-6)


class _ScaledMeanDisc:
    """Stand-in discriminator: logit = 10 * (2 * mean(frame) - 1) per sample."""

    def __call__(self, frames):
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        return 10.0 * (2.0 * frames.mean(dim=(1, 2, 3)) - 1.0)


class _ConstantDisc:
    def __init__(self, value):
        self.value = value

    def __call__(self, frames):
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        out = torch.full((frames.shape[0],), self.value)
        return out + 0.0 * frames.mean(dim=(1, 2, 3))  # keep graph connectivity


class TestAdversarial:
    def test_zero_discriminator(self):
        gen, disc_loss = adversarial_losses(
            rand_frames(1, 8, 8, 1), rand_frames(1, 8, 8, 2), _ConstantDisc(0.0)
        )
        assert float(disc_loss) == pytest.approx(2.0)
        assert float(gen) == pytest.approx(0.0)

    def test_hinge_saturation(self):
        real = torch.ones(1, 8, 8, 3)
        fake = torch.zeros(1, 8, 8, 3)
        _, disc_loss = adversarial_losses(real, fake, _ScaledMeanDisc())
        assert float(disc_loss) == 0.0

    def test_constant_fake_logit(self):
        gen, _ = adversarial_losses(
            rand_frames(1, 8, 8, 1), rand_frames(1, 8, 8, 2), _ConstantDisc(3.0)
        )
        assert float(gen) == pytest.approx(-3.0)

    def test_generator_gradient_flows_only_through_fake(self):
        torch.manual_seed(0)
        disc = PatchDiscriminator(widths=(4, 8, 8))
        real = rand_frames(1, 16, 16, 1).requires_grad_(True)
        fake = rand_frames(1, 16, 16, 2).requires_grad_(True)
        gen, disc_loss = adversarial_losses(real, fake, disc)
        disc_loss.backward(retain_graph=True)
        assert fake.grad is None  # fake entered the disc loss detached
        assert real.grad is not None
        gen.backward()
        assert fake.grad is not None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            adversarial_losses(torch.zeros(4, 8, 3), torch.zeros(8, 8, 3), _ConstantDisc(0.0))


class TestTotalLoss:
    def test_default_weights_match_stated_values(self):
        w = LossWeights()
        assert (w.l1, w.perceptual, w.adversarial, w.kl) == (1.0, 1.0, 0.5, 1.0e-6)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            LossWeights(l1=-1.0)

    def test_perfect_reconstruction_leaves_only_gan_term(self):
        frames = rand_frames(2, 16, 16, 1)
        post = LatentPosterior(torch.zeros(2, 4, 2), torch.zeros(2, 4, 2))
        disc = _ConstantDisc(3.0)
        total, parts = tokenizer_total_loss(frames, frames, post, disc=disc)
        assert parts["l1"] == 0.0
        assert parts["perceptual"] == 0.0
        assert parts["kl"] == 0.0
        assert float(total) == pytest.approx(0.5 * -3.0)

    def test_warmup_ignores_discriminator(self):
        pred, target = rand_frames(1, 16, 16, 1), rand_frames(1, 16, 16, 2)
        post = LatentPosterior(torch.randn(1, 4, 2), torch.randn(1, 4, 2))
        w0 = LossWeights(adversarial=0.0)
        total_no_disc, _ = tokenizer_total_loss(pred, target, post, weights=w0)
        total_with_disc, parts = tokenizer_total_loss(
            pred, target, post, weights=w0, disc=_ConstantDisc(5.0)
        )
        assert float(total_no_disc) == float(total_with_disc)
        assert parts["gen"] == 0.0

    def test_weighted_sum(self):
        pred, target = rand_frames(1, 16, 16, 1), rand_frames(1, 16, 16, 2)
        post = LatentPosterior(torch.randn(1, 4, 2), torch.randn(1, 4, 2))
        total, parts = tokenizer_total_loss(pred, target, post, disc=_ConstantDisc(2.0))
        expected = (
            1.0 * parts["l1"]
            + 1.0 * parts["perceptual"]
            + 0.5 * parts["gen"]
            + 1.0e-6 * parts["kl"]
        )
        assert float(total) == pytest.approx(expected, rel=1e-6)

    def test_total_finite_and_componentwise_nonnegative(self):
        pred, target = rand_frames(1, 16, 16, 1), rand_frames(1, 16, 16, 2)
        post = LatentPosterior(torch.randn(1, 4, 2), torch.randn(1, 4, 2))
        total, parts = tokenizer_total_loss(pred, target, post)
        assert math.isfinite(float(total))
        for key in ("l1", "perceptual", "kl"):
            assert parts[key] >= 0.0
