import numpy as np
import pytest
import torch

from midframe.tokenizer import FrameTokenizer, TokenizerConfig


def rand_frames(batch, h, w, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch, h, w, 3, generator=gen, dtype=dtype)


def tiny_tokenizer_config(**overrides) -> TokenizerConfig:
    base = dict(
        patch_size=8, hidden_dim=64, n_blocks=2, latent_dim=16,
        base_height=64, base_width=64,
    )
    base.update(overrides)
    return TokenizerConfig(**base)


@pytest.fixture
def tiny_tokenizer() -> FrameTokenizer:
    torch.manual_seed(0)
    return FrameTokenizer(tiny_tokenizer_config())


def gradient_check(loss_fn, params, n_samples=32, eps=1.0e-6, seed=0):
    """Max relative error between autograd and central finite differences over
    n_samples randomly chosen parameter scalars. loss_fn must be deterministic
    and the params double precision."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        assert p.dtype == torch.float64, "gradient checks run in double precision"
        p.grad = None
    loss = loss_fn()
    loss.backward()
    sizes = np.array([p.numel() for p in params])
    cumulative = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for flat_idx in rng.choice(int(cumulative[-1]), size=n_samples, replace=False):
        pi = int(np.searchsorted(cumulative, flat_idx, side="right"))
        offset = int(flat_idx - (cumulative[pi - 1] if pi else 0))
        p = params[pi]
        with torch.no_grad():
            orig = p.reshape(-1)[offset].item()
            p.reshape(-1)[offset] = orig + eps
            up = float(loss_fn())
            p.reshape(-1)[offset] = orig - eps
            down = float(loss_fn())
            p.reshape(-1)[offset] = orig
        fd = (up - down) / (2.0 * eps)
        analytic = float(p.grad.reshape(-1)[offset])
        denom = max(abs(fd), abs(analytic), 1.0e-8)
        worst = max(worst, abs(fd - analytic) / denom)
        checked += 1
    assert checked == n_samples
    return worst
