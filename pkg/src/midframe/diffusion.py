"""Rectified-flow diffusion transformer over latent tokens.

The model predicts the constant velocity of the straight path between data and
noise, x_t = (1 - t) x0 + t eps. Conditioning is dual-stream: temporal
attention to the start/end frames inside every block, plus an adaLN condition
vector built from the timestep embedding and a start-end difference embedding.
Sampling integrates the learned velocity field from t=1 to t=0 with plain
Euler steps; two steps suffice in practice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import (
    FrameTokenizer,
    GridPositionEmbedding,
    MultiHeadAttention,
    TemporalAttention,
    TokenGrid,
    as_frame_batch,
    extract_patches,
    group_context,
)

DEFAULT_SAMPLING_STEPS = 2

VelocityFn = Callable[[torch.Tensor, float], torch.Tensor]


@dataclass
class DiTConfig:
    hidden_dim: int = 768
    n_blocks: int = 12
    heads: int | None = None
    latent_dim: int = 16  # must match the tokenizer
    patch_size: int = 16  # must match the tokenizer
    base_height: int = 256
    base_width: int = 448
    use_difference_embedding: bool = True

    def __post_init__(self) -> None:
        if self.heads is None:
            self.heads = max(1, self.hidden_dim // 64)
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        step = 2 * self.patch_size
        if self.base_height % step or self.base_width % step:
            raise ValueError(
                f"base resolution {self.base_height}x{self.base_width} must be "
                f"divisible by 2*patch_size={step}"
            )


@dataclass
class DatasetStats:
    """Normalization statistics computed once from the training set.

    sim_mean/sim_std describe the cosine similarity of start-end frame pairs;
    latent_std is the global scale of encoder latents, filled by a stats pass
    before diffusion training.
    """

    sim_mean: float
    sim_std: float
    latent_std: float | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.sim_mean):
            raise ValueError(f"sim_mean must be finite, got {self.sim_mean}")
        if not math.isfinite(self.sim_std):
            raise ValueError(f"sim_std must be finite, got {self.sim_std}")
        self.sim_std = max(self.sim_std, 1.0e-6)
        if self.latent_std is not None and not self.latent_std > 0:
            raise ValueError(f"latent_std must be > 0, got {self.latent_std}")


@dataclass
class NoisedLatent:
    """A point on the straight path between data and noise."""

    x_t: torch.Tensor
    t: torch.Tensor  # per-sample times in [0, 1]


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------


def _as_time_tensor(t, reference: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=reference.dtype, device=reference.device)
    if t.dim() == 0:
        t = t.reshape(1)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t.to(reference.dtype)


def sinusoidal_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of t: half sines then half cosines, frequencies
    log-spaced over [1, 1e4]."""
    if dim % 2:
        raise ValueError(f"feature dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.logspace(0.0, 4.0, half, dtype=t.dtype, device=t.device)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedding(nn.Module):
    """Sinusoidal features of the diffusion time followed by a 2-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any(t < 0) or torch.any(t > 1):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return self.mlp(sinusoidal_features(t, self.dim))


def frame_cosine_similarity(i0: torch.Tensor, i1: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of flattened pixel vectors, one value per sample."""
    if i0.shape != i1.shape:
        raise ValueError(f"shape mismatch: {tuple(i0.shape)} vs {tuple(i1.shape)}")
    i0b, squeeze = as_frame_batch(i0)
    i1b, _ = as_frame_batch(i1)
    f0 = i0b.reshape(i0b.shape[0], -1)
    f1 = i1b.reshape(i1b.shape[0], -1)
    n0 = f0.norm(dim=1)
    n1 = f1.norm(dim=1)
    if torch.any(n0 == 0) or torch.any(n1 == 0):
        raise ValueError("cosine similarity undefined for an all-zero frame")
    sim = (f0 * f1).sum(dim=1) / (n0 * n1)
    return sim[0] if squeeze else sim


def difference_context(
    i0: torch.Tensor, i1: torch.Tensor, stats: DatasetStats
) -> torch.Tensor:
    """Normalized cosine similarity of the flattened start/end frames.

    Returns one value per sample: (cos(i0, i1) - sim_mean) / sim_std.
    """
    sim = frame_cosine_similarity(i0, i1)
    return (sim - stats.sim_mean) / stats.sim_std


class DifferenceEmbedding(nn.Module):
    """2-layer MLP from the scalar difference context to the condition dim."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(1, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, ctx: torch.Tensor) -> torch.Tensor:
        if ctx.dim() == 0:
            ctx = ctx.reshape(1)
        return self.mlp(ctx[:, None])


# ---------------------------------------------------------------------------
# adaLN-modulated transformer blocks
# ---------------------------------------------------------------------------


@dataclass
class ModulationParams:
    """The six per-block modulation vectors, shaped (B, d) each."""

    alpha1: torch.Tensor
    beta1: torch.Tensor
    gamma1: torch.Tensor
    alpha2: torch.Tensor
    beta2: torch.Tensor
    gamma2: torch.Tensor


class AdaLNModulation(nn.Module):
    """Condition vector -> (alpha1, beta1, gamma1, alpha2, beta2, gamma2).

    Gate rows (alpha1, alpha2) are zero-initialized so every block starts as an
    identity; gamma is produced as a raw offset and applied as (1 + gamma).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(dim, 6 * dim)
        with torch.no_grad():
            self.proj.weight[0 : dim].zero_()  # alpha1 rows
            self.proj.bias[0 : dim].zero_()
            self.proj.weight[3 * dim : 4 * dim].zero_()  # alpha2 rows
            self.proj.bias[3 * dim : 4 * dim].zero_()

    def forward(self, cond: torch.Tensor) -> ModulationParams:
        parts = self.proj(F.silu(cond)).chunk(6, dim=-1)
        return ModulationParams(*parts)


def modulate(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """x * (1 + gamma) + beta, broadcasting (B, d) vectors over tokens."""
    return x * (1.0 + gamma[:, None, :]) + beta[:, None, :]


class DiTBlock(nn.Module):
    """adaLN-gated self-attention and MLP with an unmodulated temporal-attention
    residual in between. Exactly the identity map at initialization."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.adaln = AdaLNModulation(dim)
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = MultiHeadAttention(dim, heads)
        self.temporal = TemporalAttention(dim, heads, zero_init_out=True)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.ff_in = nn.Linear(dim, dim * 4)
        self.ff_out = nn.Linear(dim * 4, dim)

    def forward(
        self,
        x: torch.Tensor,
        ctx0: torch.Tensor,
        ctx1: torch.Tensor,
        cond: torch.Tensor,
    ) -> torch.Tensor:
        m = self.adaln(cond)
        h = modulate(self.norm1(x), m.gamma1, m.beta1)
        x = x + m.alpha1[:, None, :] * self.attn(h)
        x = self.temporal(x, ctx0, ctx1)
        h = modulate(self.norm2(x), m.gamma2, m.beta2)
        x = x + m.alpha2[:, None, :] * self.ff_out(F.gelu(self.ff_in(h)))
        return x


class VelocityModel(nn.Module):
    """Diffusion transformer predicting the path velocity of latent tokens.

    Latent tokens are embedded to the hidden dim with an interpolatable
    position embedding; start/end frames are patch-embedded at the large scale
    and grouped for temporal attention; the condition vector is the sum of the
    timestep and difference embeddings. The output head is zero-initialized,
    so the model predicts zero velocity at init.
    """

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        p = cfg.patch_size

        self.latent_proj = nn.Linear(cfg.latent_dim, d)
        self.pe_latent = GridPositionEmbedding(
            cfg.base_height // (2 * p), cfg.base_width // (2 * p), d
        )
        self.context_proj = nn.Linear(p * p * 3, d)
        self.pe_context = GridPositionEmbedding(
            cfg.base_height // p, cfg.base_width // p, d
        )
        self.t_embed = TimestepEmbedding(d)
        self.diff_embed = DifferenceEmbedding(d) if cfg.use_difference_embedding else None

        self.blocks = nn.ModuleList(DiTBlock(d, cfg.heads) for _ in range(cfg.n_blocks))

        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_mod = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, cfg.latent_dim)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def embed_context(self, frames: torch.Tensor) -> torch.Tensor:
        """Patch-embed a start/end frame and group it for temporal attention."""
        p = self.cfg.patch_size
        gh, gw = frames.shape[1] // p, frames.shape[2] // p
        tokens = self.context_proj(extract_patches(frames, p)) + self.pe_context(gh, gw)
        return group_context(TokenGrid(tokens, gh, gw))

    def forward(
        self,
        latent: torch.Tensor,
        t,
        i0: torch.Tensor,
        i1: torch.Tensor,
        stats: DatasetStats,
        diff_ctx: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Predict the velocity field at (latent, t) under frame context.

        diff_ctx overrides the computed difference context (ablation hook).
        """
        i0b, _ = as_frame_batch(i0)
        i1b, _ = as_frame_batch(i1)
        if latent.dim() == 2:
            latent = latent.unsqueeze(0)
        if i0b.shape != i1b.shape:
            raise ValueError(
                f"context shape mismatch: {tuple(i0b.shape)} vs {tuple(i1b.shape)}"
            )
        p = self.cfg.patch_size
        h, w = i0b.shape[1], i0b.shape[2]
        if h % (2 * p) or w % (2 * p):
            raise ValueError(f"resolution {h}x{w} not divisible by 2*patch_size={2 * p}")
        sh, sw = h // (2 * p), w // (2 * p)
        if latent.shape[1] != sh * sw or latent.shape[2] != self.cfg.latent_dim:
            raise ValueError(
                f"latent shape {tuple(latent.shape)} does not match {h}x{w} context "
                f"at latent_dim {self.cfg.latent_dim} (expected n={sh * sw})"
            )
        tvec = _as_time_tensor(t, latent)
        if tvec.shape[0] == 1 and latent.shape[0] > 1:
            tvec = tvec.expand(latent.shape[0])

        x = self.latent_proj(latent) + self.pe_latent(sh, sw)
        ctx0 = self.embed_context(i0b)
        ctx1 = self.embed_context(i1b)

        cond = self.t_embed(tvec)
        if self.diff_embed is not None:
            if diff_ctx is None and stats is None:
                raise ValueError("dataset stats required for the difference context")
            ctx = diff_ctx if diff_ctx is not None else difference_context(i0b, i1b, stats)
            cond = cond + self.diff_embed(ctx)

        for block in self.blocks:
            x = block(x, ctx0, ctx1, cond)

        gamma_f, beta_f = self.final_mod(F.silu(cond)).chunk(2, dim=-1)
        h_out = modulate(self.final_norm(x), gamma_f, beta_f)
        return self.head(h_out)


# ---------------------------------------------------------------------------
# Rectified flow
# ---------------------------------------------------------------------------


def forward_sample(x0: torch.Tensor, eps: torch.Tensor, t) -> NoisedLatent:
    """x_t = (1 - t) x0 + t eps, the straight path between data and noise."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    tvec = _as_time_tensor(t, x0)
    if tvec.shape[0] == 1 and x0.shape[0] > 1 and x0.dim() > 1:
        tvec = tvec.expand(x0.shape[0])
    tb = tvec.reshape(-1, *([1] * (x0.dim() - 1)))
    return NoisedLatent((1.0 - tb) * x0 + tb * eps, tvec)


def velocity_target(x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Time derivative of the straight path: eps - x0, constant in t."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    return eps - x0


def flow_loss(v_pred: torch.Tensor, x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error against the straight-path velocity."""
    target = velocity_target(x0, eps)
    if v_pred.shape != target.shape:
        raise ValueError(
            f"prediction shape {tuple(v_pred.shape)} != target {tuple(target.shape)}"
        )
    return ((v_pred - target) ** 2).mean()


def euler_sample(
    velocity_fn: VelocityFn,
    shape: tuple[int, ...],
    steps: int,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Integrate dx = v(x, t) dt from t=1 (pure noise) down to t=0.

    Zero steps returns the raw noise. With the exact constant velocity
    eps - x0 the integration is exact for any positive step count.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    x = torch.randn(shape, generator=generator, dtype=dtype)
    if steps == 0:
        return x
    h = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i / steps
        x = x - h * velocity_fn(x, t)
    return x


def sample_latents(
    model: VelocityModel,
    i0: torch.Tensor,
    i1: torch.Tensor,
    stats: DatasetStats,
    steps: int = DEFAULT_SAMPLING_STEPS,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Generate latent tokens for the frame pair and undo the training-time
    standardization (multiply by latent_std) so they can be decoded."""
    if stats.latent_std is None:
        raise ValueError("stats.latent_std missing; run the latent stats pass first")
    i0b, squeeze = as_frame_batch(i0)
    i1b, _ = as_frame_batch(i1)
    p = model.cfg.patch_size
    b, h, w = i0b.shape[0], i0b.shape[1], i0b.shape[2]
    shape = (b, (h // (2 * p)) * (w // (2 * p)), model.cfg.latent_dim)

    def velocity(x: torch.Tensor, t: float) -> torch.Tensor:
        return model(x, t, i0b, i1b, stats)

    with torch.no_grad():
        z = euler_sample(velocity, shape, steps, generator=generator, dtype=i0b.dtype)
    z = z * stats.latent_std
    return z.squeeze(0) if squeeze else z


def interpolate_frame(
    tokenizer: FrameTokenizer,
    model: VelocityModel,
    stats: DatasetStats,
    i0: torch.Tensor,
    i1: torch.Tensor,
    steps: int = DEFAULT_SAMPLING_STEPS,
    seed: int = 0,
) -> torch.Tensor:
    """Generate the middle frame between i0 and i1.

    Deterministic given the seed: the same (checkpoints, frames, steps, seed)
    produce a bit-identical frame.
    """
    if tokenizer.cfg.latent_dim != model.cfg.latent_dim:
        raise ValueError(
            f"latent_dim mismatch: tokenizer {tokenizer.cfg.latent_dim} vs "
            f"model {model.cfg.latent_dim}"
        )
    if tokenizer.cfg.patch_size != model.cfg.patch_size:
        raise ValueError(
            f"patch_size mismatch: tokenizer {tokenizer.cfg.patch_size} vs "
            f"model {model.cfg.patch_size}"
        )
    generator = torch.Generator().manual_seed(seed)
    z = sample_latents(model, i0, i1, stats, steps=steps, generator=generator)
    with torch.no_grad():
        frame = tokenizer.decode(z, i0, i1)
    return frame
