"""Transformer tokenizer for the middle frame of a triplet.

The encoder compresses the intermediate frame into a 1D sequence of latent
tokens; the decoder reconstructs pixels from those tokens. Both run under
start/end-frame guidance: every block fuses a small-scale token stream with a
large-scale counterpart (pyramid feature fusion) and attends to the start and
end frames through per-position temporal attention over 9-token groups.

Frames are tensors of shape (H, W, 3) or (B, H, W, 3) with values in [0, 1].
Token grids carry an explicit 2D layout so position embeddings can be resized
to any resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass
class TokenizerConfig:
    patch_size: int = 16
    hidden_dim: int = 768
    n_blocks: int = 4
    latent_dim: int = 16
    heads: int | None = None
    base_height: int = 256
    base_width: int = 448
    upsample_mode: str = "nearest"  # large-scale counterpart in decoder blocks

    def __post_init__(self) -> None:
        if self.heads is None:
            self.heads = max(1, self.hidden_dim // 64)
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample_mode {self.upsample_mode!r}")
        step = 2 * self.patch_size
        if self.base_height % step or self.base_width % step:
            raise ValueError(
                f"base resolution {self.base_height}x{self.base_width} must be "
                f"divisible by 2*patch_size={step}"
            )


@dataclass
class TokenGrid:
    """A token sequence with an explicit 2D grid layout.

    tokens: (B, count, dim) with count == grid_h * grid_w.
    """

    tokens: torch.Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        if self.tokens.dim() != 3:
            raise ValueError(f"tokens must be (B, count, dim), got {tuple(self.tokens.shape)}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError(f"grid dims must be positive, got {self.grid_h}x{self.grid_w}")
        if self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ValueError(
                f"token count {self.tokens.shape[1]} != grid {self.grid_h}x{self.grid_w}"
            )

    @property
    def count(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def as_map(self) -> torch.Tensor:
        """Tokens reshaped to (B, grid_h, grid_w, dim)."""
        b = self.tokens.shape[0]
        return self.tokens.reshape(b, self.grid_h, self.grid_w, self.dim)


@dataclass
class LatentPosterior:
    """Diagonal Gaussian over latent tokens; logvar clamped for stability."""

    mean: torch.Tensor  # (B, n, c)
    logvar: torch.Tensor  # (B, n, c)

    def __post_init__(self) -> None:
        if self.mean.shape != self.logvar.shape:
            raise ValueError(
                f"mean/logvar shape mismatch: {tuple(self.mean.shape)} vs "
                f"{tuple(self.logvar.shape)}"
            )
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        noise = torch.empty_like(self.mean).normal_(generator=generator)
        return reparameterize(self, noise)


def reparameterize(post: LatentPosterior, noise: torch.Tensor) -> torch.Tensor:
    """sample = mean + exp(0.5 * logvar) * noise"""
    if noise.shape != post.mean.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != mean shape {tuple(post.mean.shape)}"
        )
    return post.mean + torch.exp(0.5 * post.logvar) * noise


# ---------------------------------------------------------------------------
# Token grid geometry
# ---------------------------------------------------------------------------


def pool_tokens(large: TokenGrid) -> TokenGrid:
    """2x2 average pooling on the grid; output count is large.count / 4."""
    if large.grid_h % 2 or large.grid_w % 2:
        raise ValueError(f"grid {large.grid_h}x{large.grid_w} must be even to pool")
    b = large.tokens.shape[0]
    m = large.as_map().reshape(b, large.grid_h // 2, 2, large.grid_w // 2, 2, large.dim)
    pooled = m.mean(dim=(2, 4))
    return TokenGrid(
        pooled.reshape(b, -1, large.dim), large.grid_h // 2, large.grid_w // 2
    )


def upsample_tokens(small: TokenGrid, mode: str = "nearest") -> TokenGrid:
    """2x upsampling of the grid: nearest replicates each token to its 2x2 block."""
    b = small.tokens.shape[0]
    m = small.as_map()
    if mode == "nearest":
        up = m.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
    elif mode == "bilinear":
        chw = m.permute(0, 3, 1, 2)
        up = F.interpolate(chw, scale_factor=2, mode="bilinear", align_corners=False)
        up = up.permute(0, 2, 3, 1)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return TokenGrid(
        up.reshape(b, -1, small.dim), small.grid_h * 2, small.grid_w * 2
    )


def group_context(ctx: TokenGrid) -> torch.Tensor:
    """Group each 2x2 block of a large-scale grid under its small-scale position.

    Returns (B, n, 4, d) with the block in reading order: top-left, top-right,
    bottom-left, bottom-right.
    """
    if ctx.grid_h % 2 or ctx.grid_w % 2:
        raise ValueError(f"grid {ctx.grid_h}x{ctx.grid_w} must be even to group")
    b = ctx.tokens.shape[0]
    m = ctx.as_map().reshape(b, ctx.grid_h // 2, 2, ctx.grid_w // 2, 2, ctx.dim)
    m = m.permute(0, 1, 3, 2, 4, 5)  # (B, gh/2, gw/2, row-in-block, col-in-block, d)
    return m.reshape(b, (ctx.grid_h // 2) * (ctx.grid_w // 2), 4, ctx.dim)


def interpolate_pos_embed(table: torch.Tensor, new_h: int, new_w: int) -> torch.Tensor:
    """Bilinearly resize a (grid_h, grid_w, d) embedding table to (new_h, new_w, d).

    Resizing at the native size is an exact identity. Endpoints align with the
    table corners (align_corners semantics), so a 2x1 table (a, b) resized to
    3x1 yields (a, (a+b)/2, b).
    """
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target grid must be positive, got {new_h}x{new_w}")
    gh, gw, d = table.shape
    if (gh, gw) == (new_h, new_w):
        return table
    if gh == 1 and gw == 1:
        return table.expand(new_h, new_w, d)
    chw = table.permute(2, 0, 1).unsqueeze(0)  # (1, d, gh, gw)
    resized = F.interpolate(chw, size=(new_h, new_w), mode="bilinear", align_corners=True)
    return resized.squeeze(0).permute(1, 2, 0)


class GridPositionEmbedding(nn.Module):
    """Learnable per-position table for one token scale, resizable on demand."""

    def __init__(self, grid_h: int, grid_w: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.randn(grid_h, grid_w, dim) * 0.02)

    def forward(self, grid_h: int, grid_w: int) -> torch.Tensor:
        """Flattened (grid_h * grid_w, dim) embedding for the requested grid."""
        table = interpolate_pos_embed(self.table, grid_h, grid_w)
        return table.reshape(grid_h * grid_w, -1)


def extract_patches(frames: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Flatten non-overlapping patches: (B, H, W, 3) -> (B, gh*gw, p*p*3)."""
    b, h, w, c = frames.shape
    if h % patch_size or w % patch_size:
        raise ValueError(
            f"frame {h}x{w} not divisible by patch_size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    x = frames.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


# ---------------------------------------------------------------------------
# Attention and block modules
# ---------------------------------------------------------------------------


class MultiHeadAttention(nn.Module):
    """Plain multi-head self-attention over a token sequence."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q(x).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).reshape(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class PyramidFusionAttention(nn.Module):
    """Fuse a small-scale stream with its large-scale counterpart.

    Concatenates [large; stream] (large first), applies self-attention over all
    m+n tokens, and keeps only the last n positions, as a pre-norm residual on
    the stream.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, stream: TokenGrid, large: TokenGrid) -> TokenGrid:
        if large.count != 4 * stream.count:
            raise ValueError(
                f"large count {large.count} != 4 x stream count {stream.count}"
            )
        seq = torch.cat([large.tokens, stream.tokens], dim=1)
        fused = self.attn(self.norm(seq))[:, large.count :, :]
        return TokenGrid(stream.tokens + fused, stream.grid_h, stream.grid_w)


class TemporalAttention(nn.Module):
    """Per-position attention over (4 start, 1 middle, 4 end) token groups.

    Each group attends independently; only the middle token (index 4 of 9) is
    kept and added back to the stream. Groups never exchange information.
    """

    MIDDLE = 4

    def __init__(self, dim: int, heads: int, zero_init_out: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        if zero_init_out:
            nn.init.zeros_(self.attn.out.weight)
            nn.init.zeros_(self.attn.out.bias)

    def forward(
        self, stream: torch.Tensor, ctx0: torch.Tensor, ctx1: torch.Tensor
    ) -> torch.Tensor:
        b, n, d = stream.shape
        for name, ctx in (("ctx0", ctx0), ("ctx1", ctx1)):
            if ctx.shape != (b, n, 4, d):
                raise ValueError(
                    f"{name} shape {tuple(ctx.shape)} != expected {(b, n, 4, d)}"
                )
        seq = torch.cat([ctx0, stream.unsqueeze(2), ctx1], dim=2)  # (B, n, 9, d)
        attended = self.attn(self.norm(seq).reshape(b * n, 9, d))
        return stream + attended[:, self.MIDDLE, :].reshape(b, n, d)


class FeedForward(nn.Module):
    """Pre-norm residual 2-layer MLP with 4x expansion."""

    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.w1 = nn.Linear(dim, dim * mult)
        self.w2 = nn.Linear(dim * mult, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.w2(F.gelu(self.w1(self.norm(x))))


class TokenizerBlock(nn.Module):
    """One encoder/decoder block: pyramid fusion -> temporal attention -> MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.fusion = PyramidFusionAttention(dim, heads)
        self.temporal = TemporalAttention(dim, heads)
        self.ff = FeedForward(dim)

    def forward(
        self,
        stream: TokenGrid,
        large: TokenGrid,
        ctx0: torch.Tensor,
        ctx1: torch.Tensor,
    ) -> TokenGrid:
        stream = self.fusion(stream, large)
        tokens = self.temporal(stream.tokens, ctx0, ctx1)
        tokens = self.ff(tokens)
        return TokenGrid(tokens, stream.grid_h, stream.grid_w)


def zero_residual_projections(module: nn.Module) -> None:
    """Zero every attention output projection and feed-forward output layer.

    Makes all residual-wrapped sublayers exact identities; used by tests and
    available for identity-at-init experiments.
    """
    for m in module.modules():
        if isinstance(m, MultiHeadAttention):
            nn.init.zeros_(m.out.weight)
            nn.init.zeros_(m.out.bias)
        elif isinstance(m, FeedForward):
            nn.init.zeros_(m.w2.weight)
            nn.init.zeros_(m.w2.bias)


# ---------------------------------------------------------------------------
# Frame helpers
# ---------------------------------------------------------------------------


def as_frame_batch(frames: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Accept (H, W, 3) or (B, H, W, 3); return batched tensor and whether a
    batch dim was added."""
    if frames.dim() == 3:
        return frames.unsqueeze(0), True
    if frames.dim() == 4:
        return frames, False
    raise ValueError(f"frames must be (H, W, 3) or (B, H, W, 3), got {tuple(frames.shape)}")


# ---------------------------------------------------------------------------
# The tokenizer
# ---------------------------------------------------------------------------


class FrameTokenizer(nn.Module):
    """Encode a middle frame to latent tokens and decode tokens back to pixels.

    The encoder patch-embeds the middle frame into a large-scale grid, pools it
    to the small-scale stream, and refines the stream through blocks whose
    large-scale counterpart is the fixed patch embedding. Start/end frames are
    embedded once by a shared context projection and attended to in every
    block. The decoder starts from latent tokens at the small scale, re-derives
    the large-scale counterpart per block by upsampling the current stream, and
    ends with a linear head whose output is pixel-shuffled to full resolution.
    """

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        p = cfg.patch_size
        patch_dim = p * p * 3

        self.patch_proj = nn.Linear(patch_dim, d)
        self.context_proj = nn.Linear(patch_dim, d)  # shared by start and end frames

        gh, gw = cfg.base_height // p, cfg.base_width // p
        self.pe_large = GridPositionEmbedding(gh, gw, d)
        self.pe_small = GridPositionEmbedding(gh // 2, gw // 2, d)

        self.encoder_blocks = nn.ModuleList(
            TokenizerBlock(d, cfg.heads) for _ in range(cfg.n_blocks)
        )
        self.decoder_blocks = nn.ModuleList(
            TokenizerBlock(d, cfg.heads) for _ in range(cfg.n_blocks)
        )

        self.enc_norm = nn.LayerNorm(d)
        self.to_latent = nn.Linear(d, 2 * cfg.latent_dim)

        self.from_latent = nn.Linear(cfg.latent_dim, d)
        self.dec_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, (2 * p) ** 2 * 3)
        nn.init.constant_(self.head.bias, 0.5)  # start from mid-gray, inside the clamp

    # -- embedding ---------------------------------------------------------

    def patch_embed_frame(self, frames: torch.Tensor) -> TokenGrid:
        """Patchify the middle frame: linear projection plus large-scale PE."""
        frames, _ = as_frame_batch(frames)
        p = self.cfg.patch_size
        gh, gw = frames.shape[1] // p, frames.shape[2] // p
        tokens = self.patch_proj(extract_patches(frames, p))
        tokens = tokens + self.pe_large(gh, gw)
        return TokenGrid(tokens, gh, gw)

    def embed_context(self, frames: torch.Tensor) -> TokenGrid:
        """Embed a start/end frame with the shared context projection."""
        frames, _ = as_frame_batch(frames)
        p = self.cfg.patch_size
        gh, gw = frames.shape[1] // p, frames.shape[2] // p
        tokens = self.context_proj(extract_patches(frames, p))
        tokens = tokens + self.pe_large(gh, gw)
        return TokenGrid(tokens, gh, gw)

    def _check_triplet(self, i0: torch.Tensor, it_or_none, i1: torch.Tensor) -> None:
        shapes = [tuple(f.shape) for f in (i0, it_or_none, i1) if f is not None]
        if len(set(shapes)) != 1:
            raise ValueError(f"frames must share resolution, got {shapes}")
        h, w = shapes[0][-3], shapes[0][-2]
        step = 2 * self.cfg.patch_size
        if h % step or w % step:
            raise ValueError(
                f"resolution {h}x{w} must be divisible by 2*patch_size={step}"
            )

    # -- encoder -----------------------------------------------------------

    def encode(
        self, i0: torch.Tensor, it: torch.Tensor, i1: torch.Tensor
    ) -> LatentPosterior:
        """Compress the middle frame into a per-token Gaussian posterior."""
        self._check_triplet(i0, it, i1)
        large = self.patch_embed_frame(it)
        stream = pool_tokens(large)
        stream = TokenGrid(
            stream.tokens + self.pe_small(stream.grid_h, stream.grid_w),
            stream.grid_h,
            stream.grid_w,
        )
        # Context tokens are embedded once and held fixed across blocks.
        ctx0 = group_context(self.embed_context(i0))
        ctx1 = group_context(self.embed_context(i1))
        for block in self.encoder_blocks:
            stream = block(stream, large, ctx0, ctx1)
        stats = self.to_latent(self.enc_norm(stream.tokens))
        mean, logvar = stats.chunk(2, dim=-1)
        return LatentPosterior(mean, logvar)

    # -- decoder -----------------------------------------------------------

    def decode(
        self,
        latent: torch.Tensor,
        i0: torch.Tensor,
        i1: torch.Tensor,
        clamp: bool = True,
    ) -> torch.Tensor:
        """Reconstruct the middle frame from latent tokens and the context pair."""
        self._check_triplet(i0, None, i1)
        i0b, squeeze = as_frame_batch(i0)
        i1b, _ = as_frame_batch(i1)
        if latent.dim() == 2:
            latent = latent.unsqueeze(0)
        p = self.cfg.patch_size
        h, w = i0b.shape[1], i0b.shape[2]
        sh, sw = h // (2 * p), w // (2 * p)
        if latent.shape[1] != sh * sw:
            raise ValueError(
                f"latent count {latent.shape[1]} does not match {h}x{w} at "
                f"patch_size {p} (expected {sh * sw})"
            )
        tokens = self.from_latent(latent) + self.pe_small(sh, sw)
        stream = TokenGrid(tokens, sh, sw)
        ctx0 = group_context(self.embed_context(i0b))
        ctx1 = group_context(self.embed_context(i1b))
        for block in self.decoder_blocks:
            large = upsample_tokens(stream, mode=self.cfg.upsample_mode)
            stream = block(stream, large, ctx0, ctx1)
        px = self.head(self.dec_norm(stream.tokens))  # (B, n, (2p)^2 * 3)
        frames = pixel_shuffle_tokens(px, sh, sw, 2 * p)
        if clamp:
            frames = frames.clamp(0.0, 1.0)
        return frames.squeeze(0) if squeeze else frames

    def forward(
        self,
        i0: torch.Tensor,
        it: torch.Tensor,
        i1: torch.Tensor,
        noise: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
        clamp: bool = True,
    ) -> tuple[torch.Tensor, LatentPosterior]:
        """Full reconstruction pass; returns (reconstruction, posterior).

        Training passes clamp=False: a hard clamp zeroes the gradient of every
        saturated pixel and stalls optimization.
        """
        post = self.encode(i0, it, i1)
        if noise is None:
            latent = post.sample(generator)
        else:
            latent = reparameterize(post, noise)
        recon = self.decode(latent, i0, i1, clamp=clamp)
        return recon, post


def pixel_shuffle_tokens(
    px: torch.Tensor, grid_h: int, grid_w: int, block: int
) -> torch.Tensor:
    """Rearrange per-token channel vectors into pixel blocks.

    px: (B, grid_h*grid_w, block*block*3) -> (B, grid_h*block, grid_w*block, 3)
    """
    b, n, ch = px.shape
    if n != grid_h * grid_w or ch != block * block * 3:
        raise ValueError(
            f"cannot shuffle {tuple(px.shape)} into {grid_h}x{grid_w} grid of "
            f"{block}x{block} blocks"
        )
    x = px.reshape(b, grid_h, grid_w, block, block, 3)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid_h * block, grid_w * block, 3)
