import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from midframe.tokenizer import (
    FrameTokenizer,
    LatentPosterior,
    MultiHeadAttention,
    PyramidFusionAttention,
    TemporalAttention,
    TokenGrid,
    group_context,
    interpolate_pos_embed,
    pixel_shuffle_tokens,
    pool_tokens,
    reparameterize,
    upsample_tokens,
    zero_residual_projections,
)

from conftest import rand_frames, tiny_tokenizer_config


def grid(tokens, gh, gw):
    return TokenGrid(tokens, gh, gw)


# ---------------------------------------------------------------------------
# Patch embedding
# ---------------------------------------------------------------------------


class TestPatchEmbed:
    def test_shape_64x64_patch8(self, tiny_tokenizer):
        out = tiny_tokenizer.patch_embed_frame(rand_frames(1, 64, 64))
        assert (out.grid_h, out.grid_w, out.count) == (8, 8, 64)
        assert out.dim == 64

    def test_shape_256x448_patch16(self):
        torch.manual_seed(0)
        tok = FrameTokenizer(
            tiny_tokenizer_config(patch_size=16, hidden_dim=32, base_height=256, base_width=448)
        )
        out = tok.patch_embed_frame(rand_frames(1, 256, 448))
        assert (out.grid_h, out.grid_w, out.count) == (16, 28, 448)

    def test_constant_frame_zero_weights_gives_bias(self, tiny_tokenizer):
        with torch.no_grad():
            tiny_tokenizer.patch_proj.weight.zero_()
            tiny_tokenizer.patch_proj.bias.fill_(0.25)
            tiny_tokenizer.pe_large.table.zero_()
        out = tiny_tokenizer.patch_embed_frame(torch.full((64, 64, 3), 0.7))
        assert torch.allclose(out.tokens, torch.full_like(out.tokens, 0.25))

    def test_divisibility_error(self, tiny_tokenizer):
        with pytest.raises(ValueError, match="divisible"):
            tiny_tokenizer.patch_embed_frame(torch.rand(60, 64, 3))


# ---------------------------------------------------------------------------
# Pool / upsample / group
# ---------------------------------------------------------------------------


class TestGridOps:
    def test_pool_2x2(self):
        a, b, c, d = 1.0, 2.0, 3.0, 4.0
        tokens = torch.tensor([[[a], [b], [c], [d]]])
        out = pool_tokens(grid(tokens, 2, 2))
        assert out.count == 1
        assert torch.allclose(out.tokens, torch.tensor([[[(a + b + c + d) / 4]]]))

    def test_pool_quarters_count(self):
        tokens = torch.randn(2, 8 * 12, 5)
        out = pool_tokens(grid(tokens, 8, 12))
        assert out.count == tokens.shape[1] // 4

    def test_pool_constant_invariance(self):
        tokens = torch.full((1, 16, 3), 0.37)
        out = pool_tokens(grid(tokens, 4, 4))
        assert torch.allclose(out.tokens, torch.full((1, 4, 3), 0.37))

    def test_pool_odd_grid_error(self):
        with pytest.raises(ValueError, match="even"):
            pool_tokens(grid(torch.randn(1, 3, 2), 3, 1))

    def test_upsample_1x1(self):
        v = torch.tensor([[[1.5, -2.0]]])
        out = upsample_tokens(grid(v, 1, 1))
        assert (out.grid_h, out.grid_w) == (2, 2)
        assert torch.equal(out.tokens, v.expand(1, 4, 2))

    def test_upsample_count(self):
        out = upsample_tokens(grid(torch.randn(1, 112, 4), 8, 14))
        assert out.count == 448

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_pool_of_upsample_is_identity(self, gh, gw, seed):
        gen = torch.Generator().manual_seed(seed)
        tokens = torch.randn(1, gh * gw, 3, generator=gen)
        small = grid(tokens, gh, gw)
        back = pool_tokens(upsample_tokens(small))
        assert torch.allclose(back.tokens, small.tokens, atol=1e-6)

    def test_group_2x2(self):
        tokens = torch.arange(4.0).reshape(1, 4, 1)
        groups = group_context(grid(tokens, 2, 2))
        assert groups.shape == (1, 1, 4, 1)
        assert torch.equal(groups[0, 0, :, 0], torch.tensor([0.0, 1.0, 2.0, 3.0]))

    def test_group_of_upsample_replicates(self):
        small = grid(torch.randn(1, 4, 3), 2, 2)
        groups = group_context(upsample_tokens(small))
        for i in range(4):
            for j in range(4):
                assert torch.equal(groups[0, i, j], small.tokens[0, i])

    def test_group_4x4_against_index_oracle(self):
        # Hand oracle: enumerate the expected 2x2 block (reading order) for
        # every small-scale position of a 4x4 grid.
        tokens = torch.arange(16.0).reshape(1, 16, 1)
        groups = group_context(grid(tokens, 4, 4))
        expected = {}
        for by in range(2):
            for bx in range(2):
                tl = (2 * by) * 4 + 2 * bx
                expected[by * 2 + bx] = [tl, tl + 1, tl + 4, tl + 5]
        for g, idxs in expected.items():
            assert groups[0, g, :, 0].tolist() == [float(i) for i in idxs]

    def test_group_odd_grid_error(self):
        with pytest.raises(ValueError, match="even"):
            group_context(grid(torch.randn(1, 2, 2), 2, 1))


# ---------------------------------------------------------------------------
# Pyramid fusion attention
# ---------------------------------------------------------------------------


@torch.no_grad()
def naive_attention(x, attn: MultiHeadAttention):
    """Brute-force single-example softmax attention oracle."""
    q = attn.q(x)
    k = attn.k(x)
    v = attn.v(x)
    n, d = x.shape
    hd = attn.head_dim
    out = torch.zeros_like(x)
    for h in range(attn.heads):
        qs = q[:, h * hd : (h + 1) * hd]
        ks = k[:, h * hd : (h + 1) * hd]
        vs = v[:, h * hd : (h + 1) * hd]
        for i in range(n):
            scores = torch.tensor([float(qs[i] @ ks[j]) * attn.scale for j in range(n)])
            w = torch.softmax(scores, dim=0)
            out[i, h * hd : (h + 1) * hd] = sum(w[j] * vs[j] for j in range(n))
    return attn.out(out)


class TestPyramidFusion:
    def test_zero_out_projection_is_identity(self):
        torch.manual_seed(0)
        fusion = PyramidFusionAttention(8, 2)
        nn.init.zeros_(fusion.attn.out.weight)
        nn.init.zeros_(fusion.attn.out.bias)
        stream = grid(torch.randn(1, 4, 8), 2, 2)
        large = grid(torch.randn(1, 16, 8), 4, 4)
        out = fusion(stream, large)
        assert torch.equal(out.tokens, stream.tokens)

    def test_zero_qk_uniform_attention(self):
        # Zero query/key projections make attention uniform over all m+n
        # tokens: each output is stream + out(mean of value-projected concat).
        torch.manual_seed(1)
        fusion = PyramidFusionAttention(8, 1)
        nn.init.zeros_(fusion.attn.q.weight)
        nn.init.zeros_(fusion.attn.q.bias)
        nn.init.zeros_(fusion.attn.k.weight)
        nn.init.zeros_(fusion.attn.k.bias)
        stream = grid(torch.randn(1, 1, 8), 1, 1)
        large = grid(torch.randn(1, 4, 8), 2, 2)
        out = fusion(stream, large)
        seq = fusion.norm(torch.cat([large.tokens, stream.tokens], dim=1))[0]
        mean_v = fusion.attn.v(seq).mean(dim=0)
        expected = stream.tokens[0, 0] + fusion.attn.out(mean_v)
        assert torch.allclose(out.tokens[0, 0], expected, atol=1e-6)

    def test_matches_naive_softmax_oracle(self):
        torch.manual_seed(2)
        fusion = PyramidFusionAttention(8, 2)
        stream = grid(torch.randn(1, 4, 8), 2, 2)
        large = grid(torch.randn(1, 16, 8), 4, 4)
        out = fusion(stream, large)
        seq = fusion.norm(torch.cat([large.tokens, stream.tokens], dim=1))[0]
        oracle = stream.tokens[0] + naive_attention(seq, fusion.attn)[16:]
        assert torch.allclose(out.tokens[0], oracle, atol=1e-5)

    def test_paper_scale_counts(self):
        # m=448, n=112: attention runs over 560 tokens and returns 112.
        torch.manual_seed(3)
        fusion = PyramidFusionAttention(8, 1)
        stream = grid(torch.randn(1, 112, 8), 8, 14)
        large = grid(torch.randn(1, 448, 8), 16, 28)
        out = fusion(stream, large)
        assert out.count == 112

    def test_count_mismatch_error(self):
        fusion = PyramidFusionAttention(8, 1)
        with pytest.raises(ValueError, match="4 x stream"):
            fusion(grid(torch.randn(1, 4, 8), 2, 2), grid(torch.randn(1, 4, 8), 2, 2))


# ---------------------------------------------------------------------------
# Temporal attention
# ---------------------------------------------------------------------------


class TestTemporalAttention:
    def test_middle_token_index_is_4(self):
        assert TemporalAttention.MIDDLE == 4

    def test_zero_out_projection_is_identity(self):
        torch.manual_seed(0)
        temporal = TemporalAttention(8, 2, zero_init_out=True)
        stream = torch.randn(2, 4, 8)
        ctx = torch.randn(2, 4, 4, 8)
        assert torch.equal(temporal(stream, ctx, ctx), stream)

    def test_group_locality(self):
        torch.manual_seed(1)
        temporal = TemporalAttention(8, 2)
        stream = torch.randn(1, 4, 8)
        ctx0 = torch.randn(1, 4, 4, 8)
        ctx1 = torch.randn(1, 4, 4, 8)
        base = temporal(stream, ctx0, ctx1)
        j = 2
        ctx0_pert = ctx0.clone()
        ctx0_pert[0, j, 0, 0] += 1.0
        pert = temporal(stream, ctx0_pert, ctx1)
        for i in range(4):
            changed = not torch.allclose(base[0, i], pert[0, i], atol=1e-7)
            assert changed == (i == j)

    def test_matches_per_group_oracle(self):
        # Build each 9-token sequence by hand with the stream token at index 4
        # and run a naive attention oracle over it.
        torch.manual_seed(2)
        temporal = TemporalAttention(8, 1)
        stream = torch.randn(1, 2, 8)
        ctx0 = torch.randn(1, 2, 4, 8)
        ctx1 = torch.randn(1, 2, 4, 8)
        out = temporal(stream, ctx0, ctx1)
        for i in range(2):
            seq = torch.cat([ctx0[0, i], stream[0, i : i + 1], ctx1[0, i]], dim=0)
            attended = naive_attention(temporal.norm(seq), temporal.attn)
            expected = stream[0, i] + attended[4]
            assert torch.allclose(out[0, i], expected, atol=1e-5)

    def test_shape_mismatch_error(self):
        temporal = TemporalAttention(8, 1)
        with pytest.raises(ValueError, match="ctx0"):
            temporal(torch.randn(1, 4, 8), torch.randn(1, 3, 4, 8), torch.randn(1, 4, 4, 8))


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------


class TestEncoder:
    def test_shapes_64(self, tiny_tokenizer):
        post = tiny_tokenizer.encode(
            rand_frames(1, 64, 64, 1), rand_frames(1, 64, 64, 2), rand_frames(1, 64, 64, 3)
        )
        assert post.mean.shape == (1, 16, 16)
        assert post.logvar.shape == (1, 16, 16)

    def test_zero_init_gives_zero_posterior(self, tiny_tokenizer):
        zero_residual_projections(tiny_tokenizer)
        with torch.no_grad():
            tiny_tokenizer.to_latent.weight.zero_()
            tiny_tokenizer.to_latent.bias.zero_()
        post = tiny_tokenizer.encode(
            rand_frames(1, 64, 64, 1), rand_frames(1, 64, 64, 2), rand_frames(1, 64, 64, 3)
        )
        assert torch.equal(post.mean, torch.zeros_like(post.mean))
        assert torch.equal(post.logvar, torch.zeros_like(post.logvar))

    def test_paper_scale_token_count(self):
        torch.manual_seed(0)
        tok = FrameTokenizer(
            tiny_tokenizer_config(
                patch_size=16, hidden_dim=32, n_blocks=1, base_height=256, base_width=448
            )
        )
        post = tok.encode(
            rand_frames(1, 256, 448, 1), rand_frames(1, 256, 448, 2), rand_frames(1, 256, 448, 3)
        )
        assert post.mean.shape == (1, 112, 16)

    def test_resolution_mismatch_error(self, tiny_tokenizer):
        with pytest.raises(ValueError, match="share resolution"):
            tiny_tokenizer.encode(
                rand_frames(1, 64, 64), rand_frames(1, 64, 64), rand_frames(1, 32, 32)
            )


class TestReparameterize:
    def test_zero_posterior_returns_noise(self):
        post = LatentPosterior(torch.zeros(1, 4, 2), torch.zeros(1, 4, 2))
        z = torch.randn(1, 4, 2)
        assert torch.equal(reparameterize(post, z), z)

    def test_clamp_floor_collapses_to_mean(self):
        mean = torch.randn(1, 4, 2)
        post = LatentPosterior(mean, torch.full((1, 4, 2), -100.0))
        out = reparameterize(post, torch.randn(1, 4, 2))
        assert torch.allclose(out, mean, atol=1e-6)

    def test_formula(self):
        post = LatentPosterior(torch.ones(1, 1, 1), torch.full((1, 1, 1), math.log(4.0)))
        out = reparameterize(post, torch.full((1, 1, 1), 0.5))
        assert torch.allclose(out, torch.full((1, 1, 1), 2.0))

    def test_shape_mismatch(self):
        post = LatentPosterior(torch.zeros(1, 4, 2), torch.zeros(1, 4, 2))
        with pytest.raises(ValueError, match="noise shape"):
            reparameterize(post, torch.randn(1, 4, 3))


class TestDecoder:
    def test_output_shape(self, tiny_tokenizer):
        frame = tiny_tokenizer.decode(
            torch.randn(16, 16), rand_frames(1, 64, 64, 1)[0], rand_frames(1, 64, 64, 2)[0]
        )
        assert frame.shape == (64, 64, 3)

    def test_zero_head_gives_uniform_gray(self, tiny_tokenizer):
        with torch.no_grad():
            tiny_tokenizer.head.weight.zero_()
            tiny_tokenizer.head.bias.fill_(0.5)
        frame = tiny_tokenizer.decode(
            torch.randn(1, 16, 16), rand_frames(1, 64, 64, 1), rand_frames(1, 64, 64, 2)
        )
        assert torch.equal(frame, torch.full_like(frame, 0.5))

    def test_each_token_decodes_one_block(self, tiny_tokenizer):
        # With all residual sublayers zeroed the stream never mixes across
        # tokens, so latent token i only touches its (2p)x(2p) pixel block.
        zero_residual_projections(tiny_tokenizer)
        i0, i1 = rand_frames(1, 64, 64, 1), rand_frames(1, 64, 64, 2)
        z = torch.randn(1, 16, 16)
        base = tiny_tokenizer.decode(z, i0, i1, clamp=False)
        z2 = z.clone()
        token = 5  # small grid is 4x4; token 5 is block (row 1, col 1)
        z2[0, token] += 1.0
        pert = tiny_tokenizer.decode(z2, i0, i1, clamp=False)
        diff = (base - pert).abs().sum(dim=-1)[0]  # (64, 64)
        block = 16  # 2 * patch_size
        ys, xs = torch.nonzero(diff > 1e-7, as_tuple=True)
        assert ys.min() >= 1 * block and ys.max() < 2 * block
        assert xs.min() >= 1 * block and xs.max() < 2 * block

    def test_residual_identity_bias_image(self, tiny_tokenizer):
        zero_residual_projections(tiny_tokenizer)
        with torch.no_grad():
            tiny_tokenizer.head.weight.zero_()
            tiny_tokenizer.head.bias.fill_(0.25)
        frame = tiny_tokenizer.decode(
            torch.randn(1, 16, 16), rand_frames(1, 64, 64, 1), rand_frames(1, 64, 64, 2)
        )
        assert torch.equal(frame, torch.full_like(frame, 0.25))

    def test_latent_count_mismatch(self, tiny_tokenizer):
        with pytest.raises(ValueError, match="latent count"):
            tiny_tokenizer.decode(
                torch.randn(1, 9, 16), rand_frames(1, 64, 64, 1), rand_frames(1, 64, 64, 2)
            )

    def test_output_clamped(self, tiny_tokenizer):
        with torch.no_grad():
            tiny_tokenizer.head.bias.fill_(3.0)
            frame = tiny_tokenizer.decode(
                torch.randn(1, 16, 16), rand_frames(1, 64, 64, 1), rand_frames(1, 64, 64, 2)
            )
        assert float(frame.max()) <= 1.0
        assert float(frame.min()) >= 0.0


class TestPixelShuffle:
    def test_roundtrip_layout(self):
        px = torch.arange(2 * 2 * 12.0).reshape(1, 4, 12)
        frame = pixel_shuffle_tokens(px, 2, 2, 2)
        assert frame.shape == (1, 4, 4, 3)
        # token 0 fills the top-left 2x2 block in reading order
        assert torch.equal(frame[0, 0, 0], px[0, 0, 0:3])
        assert torch.equal(frame[0, 0, 1], px[0, 0, 3:6])
        assert torch.equal(frame[0, 1, 0], px[0, 0, 6:9])
        assert torch.equal(frame[0, 1, 1], px[0, 0, 9:12])

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="shuffle"):
            pixel_shuffle_tokens(torch.randn(1, 4, 13), 2, 2, 2)


# ---------------------------------------------------------------------------
# Position-embedding interpolation
# ---------------------------------------------------------------------------


class TestPosEmbedInterpolation:
    def test_native_size_identity(self):
        table = torch.randn(4, 6, 8)
        assert interpolate_pos_embed(table, 4, 6) is table

    def test_1x1_broadcast(self):
        table = torch.randn(1, 1, 8)
        out = interpolate_pos_embed(table, 3, 5)
        assert out.shape == (3, 5, 8)
        assert torch.equal(out[2, 4], table[0, 0])

    def test_2x1_to_3x1_bilinear_oracle(self):
        a, b = 1.25, -0.75
        table = torch.tensor([[[a]], [[b]]], dtype=torch.float64)
        out = interpolate_pos_embed(table, 3, 1)
        expected = torch.tensor([[[a]], [[(a + b) / 2]], [[b]]], dtype=torch.float64)
        assert torch.allclose(out, expected, atol=1e-12, rtol=0)

    def test_nonpositive_target_error(self):
        with pytest.raises(ValueError, match="positive"):
            interpolate_pos_embed(torch.randn(2, 2, 4), 0, 3)


# ---------------------------------------------------------------------------
# Full round trip and geometry invariants
# ---------------------------------------------------------------------------


class TestRoundTrip:
    @pytest.mark.parametrize("h,w", [(64, 64), (64, 128)])
    def test_encode_decode_shapes(self, h, w):
        torch.manual_seed(0)
        tok = FrameTokenizer(tiny_tokenizer_config(hidden_dim=32, n_blocks=1))
        i0, it, i1 = (rand_frames(2, h, w, s) for s in (1, 2, 3))
        recon, post = tok(i0, it, i1, generator=torch.Generator().manual_seed(0))
        assert recon.shape == (2, h, w, 3)
        assert post.mean.shape[1] == (h // 16) * (w // 16)

    def test_m_equals_4n_through_pipeline(self):
        torch.manual_seed(0)
        tok = FrameTokenizer(tiny_tokenizer_config(hidden_dim=32, n_blocks=1))
        it = rand_frames(1, 64, 128, 2)
        large = tok.patch_embed_frame(it)
        small = pool_tokens(large)
        assert large.count == 4 * small.count
        up = upsample_tokens(small)
        assert up.count == 4 * small.count

    def test_bilinear_upsample_option(self):
        torch.manual_seed(0)
        tok = FrameTokenizer(
            tiny_tokenizer_config(hidden_dim=32, n_blocks=1, upsample_mode="bilinear")
        )
        frame = tok.decode(
            torch.randn(1, 16, 16), rand_frames(1, 64, 64, 1), rand_frames(1, 64, 64, 2)
        )
        assert frame.shape == (1, 64, 64, 3)
        with pytest.raises(ValueError, match="upsample_mode"):
            tiny_tokenizer_config(upsample_mode="cubic")
