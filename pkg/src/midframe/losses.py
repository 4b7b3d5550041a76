"""Composite tokenizer objective: L1 + perceptual + patch-adversarial + KL.

The perceptual term is pluggable. The default extractor is a cheap edge
pyramid (identity plus horizontal/vertical finite differences at two scales),
a stand-in for a pretrained perceptual network, which is deliberately not
shipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import LatentPosterior

FeatureExtractor = Callable[[torch.Tensor], Sequence[torch.Tensor]]


@dataclass
class LossWeights:
    l1: float = 1.0
    perceptual: float = 1.0
    adversarial: float = 0.5
    kl: float = 1.0e-6

    def __post_init__(self) -> None:
        for name in ("l1", "perceptual", "adversarial", "kl"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValueError(f"weight {name} must be finite and >= 0, got {v}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def edge_pyramid_features(frames: torch.Tensor) -> list[torch.Tensor]:
    """Default perceptual features: the image itself plus horizontal and
    vertical finite differences at full and half resolution.

    This is a proxy for a learned perceptual metric, not equivalent to one.
    """
    if frames.dim() == 3:
        frames = frames.unsqueeze(0)
    levels = [frames]
    x = frames
    for _ in range(2):
        levels.append(x[:, :, 1:, :] - x[:, :, :-1, :])  # horizontal differences
        levels.append(x[:, 1:, :, :] - x[:, :-1, :, :])  # vertical differences
        hw = x.permute(0, 3, 1, 2)
        hw = F.avg_pool2d(hw, kernel_size=2, ceil_mode=False)
        x = hw.permute(0, 2, 3, 1)
    return levels


def perceptual_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    extractor: FeatureExtractor = edge_pyramid_features,
) -> torch.Tensor:
    """Sum over extractor levels of mean squared feature distance."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    total = pred.new_zeros(())
    for fp, ft in zip(extractor(pred), extractor(target)):
        total = total + ((fp - ft) ** 2).mean()
    return total


def kl_penalty(post: LatentPosterior) -> torch.Tensor:
    """Mean over tokens and channels of KL(q || N(0, 1)) per element."""
    return 0.5 * (post.mean**2 + post.logvar.exp() - 1.0 - post.logvar).mean()


class PatchDiscriminator(nn.Module):
    """Strided conv stack producing one logit per non-overlapping pixel patch.

    Three stride-2 stages (widths 64/128/256) with kernel size equal to the
    stride, so each logit depends on exactly one 8x8 patch and translating the
    input by a full stride cycle shifts the logit map exactly.
    """

    PATCH = 8  # receptive field per logit

    def __init__(self, widths: tuple[int, int, int] = (64, 128, 256)):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], kernel_size=2, stride=2)
            for i in range(3)
        )
        self.head = nn.Conv2d(chans[-1], 1, kernel_size=1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) or (H, W, 3) in [0,1] -> (B, H/8, W/8) patch logits."""
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        h, w = frames.shape[1], frames.shape[2]
        if h < self.PATCH or w < self.PATCH:
            raise ValueError(
                f"frame {h}x{w} smaller than discriminator receptive field "
                f"{self.PATCH}x{self.PATCH}"
            )
        x = frames.permute(0, 3, 1, 2)
        for conv in self.stages:
            x = F.leaky_relu(conv(x), negative_slope=0.2)
        return self.head(x).squeeze(1)


def adversarial_losses(
    real: torch.Tensor, fake: torch.Tensor, disc: PatchDiscriminator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hinge GAN losses: (generator, discriminator).

    The discriminator loss sees the fake detached, so generator gradient flows
    only through the generator term.
    """
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    logits_fake = disc(fake)
    gen = -logits_fake.mean()
    d_real = disc(real)
    d_fake = disc(fake.detach())
    disc_loss = F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()
    return gen, disc_loss


def tokenizer_total_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    post: LatentPosterior,
    weights: LossWeights = LossWeights(),
    extractor: FeatureExtractor = edge_pyramid_features,
    disc: PatchDiscriminator | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the four loss components, with a per-component breakdown.

    With adversarial weight 0 (or no discriminator) the total is independent of
    the discriminator. The returned discriminator loss in the breakdown is
    informational; it is optimized separately.
    """
    l1 = l1_loss(pred, target)
    lp = perceptual_loss(pred, target, extractor)
    kl = kl_penalty(post)
    total = weights.l1 * l1 + weights.perceptual * lp + weights.kl * kl
    parts = {
        "l1": float(l1.detach()),
        "perceptual": float(lp.detach()),
        "kl": float(kl.detach()),
        "gen": 0.0,
    }
    if disc is not None and weights.adversarial > 0.0:
        gen, _ = adversarial_losses(target, pred, disc)
        total = total + weights.adversarial * gen
        parts["gen"] = float(gen.detach())
    parts["total"] = float(total.detach())
    return total, parts
