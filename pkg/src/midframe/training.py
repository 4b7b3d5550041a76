"""Two-stage training schedules, optimizer policy, and checkpoint persistence.

Stage 1 trains at a fixed resolution with small frame intervals; stage 2
fine-tunes with resolutions and intervals drawn per batch, interpolating
position embeddings on the fly. The tokenizer trains against the composite
reconstruction objective with an adversarial warmup; the diffusion model
trains against the flow-matching loss on standardized encoder latents with the
tokenizer frozen.

Checkpoints are a self-describing binary format: magic "EDENCKPT", a version
word, a JSON metadata blob (kind, config, stats, step), then named float32
parameter records. Round trips are byte-exact.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np
import torch
from torch import nn

from .diffusion import (
    DatasetStats,
    DiTConfig,
    VelocityModel,
    flow_loss,
    forward_sample,
)
from .losses import LossWeights, PatchDiscriminator, adversarial_losses, tokenizer_total_loss
from .seeding import torch_generator
from .tokenizer import FrameTokenizer, TokenizerConfig

CHECKPOINT_MAGIC = b"EDENCKPT"
CHECKPOINT_VERSION = 1
CHECKPOINT_KINDS = ("tokenizer", "dit", "discriminator")


class CheckpointError(RuntimeError):
    pass


class BatchSource(Protocol):
    def batch(self, step: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]: ...


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 256
    lr_start: float = 1.0e-4
    lr_min: float = 1.0e-8
    total_steps: int = 200_000
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 1.0e-4
    intervals: tuple[int, ...] = (1, 2, 3, 4, 5)
    resolutions: tuple[tuple[int, int], ...] = ((256, 448),)
    seed: int = 0
    adv_warmup_frac: float = 0.5  # fraction of steps with the GAN term off
    checkpoint_every: int = 500
    grad_clip: float = 1.0
    use_ema: bool = False  # reserved; no EMA is applied

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr_start >= self.lr_min > 0):
            raise ValueError(
                f"need lr_start >= lr_min > 0, got {self.lr_start}, {self.lr_min}"
            )
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.adv_warmup_frac <= 1.0:
            raise ValueError(f"adv_warmup_frac must be in [0, 1], got {self.adv_warmup_frac}")


def stage2_train_config(**overrides) -> TrainConfig:
    """Multi-resolution / multi-interval fine-tuning defaults."""
    base = dict(
        stage=2,
        batch_size=64,
        lr_start=1.0e-5,
        lr_min=1.25e-8,
        total_steps=50_000,
        intervals=tuple(range(1, 11)),
        adv_warmup_frac=0.0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def cosine_lr(step: int, total: int, lr_start: float, lr_min: float) -> float:
    """Cosine annealing from lr_start at step 0 to lr_min at step = total."""
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_start - lr_min) * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: str
    config: dict
    stats: DatasetStats | None
    step: int
    params: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.kind not in CHECKPOINT_KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")


def checkpoint_from_model(
    kind: str,
    model: nn.Module,
    config,
    stats: DatasetStats | None = None,
    step: int = 0,
) -> Checkpoint:
    params = {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in model.state_dict().items()
    }
    cfg_dict = asdict(config) if not isinstance(config, dict) else dict(config)
    return Checkpoint(kind=kind, config=cfg_dict, stats=stats, step=step, params=params)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    meta = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "stats": asdict(ckpt.stats) if ckpt.stats is not None else None,
        "step": ckpt.step,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for name, arr in ckpt.params.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint while reading record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} dims"))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 4 * count, f"{name} payload")
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    stats = DatasetStats(**meta["stats"]) if meta.get("stats") is not None else None
    return Checkpoint(
        kind=meta["kind"], config=meta["config"], stats=stats,
        step=int(meta["step"]), params=params,
    )


def load_params_into_model(model: nn.Module, ckpt: Checkpoint, strict: bool = True) -> None:
    state = model.state_dict()
    unknown = sorted(set(ckpt.params) - set(state))
    missing = sorted(set(state) - set(ckpt.params))
    if strict and unknown:
        raise CheckpointError(f"unknown parameter names in checkpoint: {unknown[:5]}")
    if strict and missing:
        raise CheckpointError(f"parameters missing from checkpoint: {missing[:5]}")
    new_state = {}
    for name, ref in state.items():
        arr = ckpt.params.get(name)
        if arr is None:
            new_state[name] = ref
            continue
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model "
                f"{tuple(ref.shape)}"
            )
        new_state[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(new_state)


def build_tokenizer(ckpt: Checkpoint) -> FrameTokenizer:
    if ckpt.kind != "tokenizer":
        raise CheckpointError(f"expected a tokenizer checkpoint, got kind {ckpt.kind!r}")
    model = FrameTokenizer(TokenizerConfig(**ckpt.config))
    load_params_into_model(model, ckpt)
    return model


def build_velocity_model(ckpt: Checkpoint) -> VelocityModel:
    if ckpt.kind != "dit":
        raise CheckpointError(f"expected a dit checkpoint, got kind {ckpt.kind!r}")
    model = VelocityModel(DiTConfig(**ckpt.config))
    load_params_into_model(model, ckpt)
    return model


def build_discriminator(ckpt: Checkpoint) -> PatchDiscriminator:
    if ckpt.kind != "discriminator":
        raise CheckpointError(
            f"expected a discriminator checkpoint, got kind {ckpt.kind!r}"
        )
    model = PatchDiscriminator(widths=tuple(ckpt.config.get("widths", (64, 128, 256))))
    load_params_into_model(model, ckpt)
    return model


def load_interpolation_models(
    tokenizer_path: str | Path, dit_path: str | Path
) -> tuple[FrameTokenizer, VelocityModel, DatasetStats]:
    """Load and cross-validate the checkpoint pair needed for inference."""
    tok_ckpt = load_checkpoint(tokenizer_path)
    dit_ckpt = load_checkpoint(dit_path)
    tokenizer = build_tokenizer(tok_ckpt)
    model = build_velocity_model(dit_ckpt)
    if tokenizer.cfg.latent_dim != model.cfg.latent_dim:
        raise CheckpointError(
            f"latent_dim mismatch: tokenizer {tokenizer.cfg.latent_dim} vs "
            f"dit {model.cfg.latent_dim}"
        )
    if tokenizer.cfg.patch_size != model.cfg.patch_size:
        raise CheckpointError(
            f"patch_size mismatch: tokenizer {tokenizer.cfg.patch_size} vs "
            f"dit {model.cfg.patch_size}"
        )
    if dit_ckpt.stats is None or dit_ckpt.stats.latent_std is None:
        raise CheckpointError("dit checkpoint carries no dataset stats")
    tokenizer.eval()
    model.eval()
    return tokenizer, model, dit_ckpt.stats


# ---------------------------------------------------------------------------
# Optimization loops
# ---------------------------------------------------------------------------


def _make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr_start,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _clip_and_step(model: nn.Module, opt: torch.optim.Optimizer, clip: float) -> None:
    if clip > 0:
        nn.utils.clip_grad_norm_(model.parameters(), clip)
    opt.step()
    opt.zero_grad(set_to_none=True)


def _maybe_checkpoint(
    step: int,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None,
    make: Callable[[], Iterable[tuple[str, Checkpoint]]],
) -> None:
    last = step + 1 == cfg.total_steps
    if checkpoint_dir is None:
        return
    if (step + 1) % cfg.checkpoint_every and not last:
        return
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ckpt in make():
        save_checkpoint(ckpt, out / f"{name}_step{step + 1:06d}.ckpt")
        save_checkpoint(ckpt, out / f"{name}_latest.ckpt")


def train_tokenizer(
    cfg: TrainConfig,
    data: BatchSource,
    tokenizer: FrameTokenizer,
    disc: PatchDiscriminator | None = None,
    weights: LossWeights = LossWeights(),
    stats: DatasetStats | None = None,
    start_step: int = 0,
    checkpoint_dir: str | Path | None = None,
) -> list[dict]:
    """Optimize the tokenizer against the composite reconstruction objective.

    Alternates one generator and one discriminator update per iteration once
    the adversarial warmup has elapsed. Returns one loss-log row per step.
    """
    use_gan = disc is not None and weights.adversarial > 0.0
    warmup_steps = int(cfg.adv_warmup_frac * cfg.total_steps)
    opt_g = _make_optimizer(tokenizer, cfg)
    opt_d = _make_optimizer(disc, cfg) if use_gan else None
    noise_gen = torch_generator(cfg.seed, f"tokenizer-noise:{start_step}")
    tokenizer.train()
    if disc is not None:
        disc.train()
    history: list[dict] = []

    for step in range(start_step, cfg.total_steps):
        lr = cosine_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_min)
        _set_lr(opt_g, lr)
        i0, it, i1 = data.batch(step)
        gan_active = use_gan and step >= warmup_steps

        recon, post = tokenizer(i0, it, i1, generator=noise_gen, clamp=False)
        total, parts = tokenizer_total_loss(
            recon, it, post, weights=weights, disc=disc if gan_active else None
        )
        total.backward()
        _clip_and_step(tokenizer, opt_g, cfg.grad_clip)

        disc_loss_val = 0.0
        if gan_active:
            _set_lr(opt_d, lr)
            _, disc_loss = adversarial_losses(it, recon.detach(), disc)
            disc_loss.backward()
            _clip_and_step(disc, opt_d, cfg.grad_clip)
            disc_loss_val = float(disc_loss.detach())

        row = {"step": step, "lr": lr, **parts, "disc": disc_loss_val}
        history.append(row)

        def make_checkpoints(step=step):
            out = [
                (
                    "tokenizer",
                    checkpoint_from_model(
                        "tokenizer", tokenizer, tokenizer.cfg, stats=stats, step=step + 1
                    ),
                )
            ]
            if use_gan:
                out.append(
                    (
                        "discriminator",
                        checkpoint_from_model(
                            "discriminator", disc, {"widths": [64, 128, 256]}, step=step + 1
                        ),
                    )
                )
            return out

        _maybe_checkpoint(step, cfg, checkpoint_dir, make_checkpoints)
    return history


def latent_std_pass(
    tokenizer: FrameTokenizer,
    data: BatchSource,
    n_batches: int = 8,
    seed: int = 0,
) -> float:
    """Global standard deviation of sampled encoder latents over a fixed pass."""
    gen = torch_generator(seed, "latent-stats")
    samples = []
    tokenizer.eval()
    with torch.no_grad():
        for step in range(n_batches):
            i0, it, i1 = data.batch(step)
            post = tokenizer.encode(i0, it, i1)
            samples.append(post.sample(gen).reshape(-1))
    std = float(torch.cat(samples).std())
    if not std > 0:
        raise ValueError(f"degenerate latent std {std}")
    return std


def train_dit(
    cfg: TrainConfig,
    data: BatchSource,
    tokenizer: FrameTokenizer,
    model: VelocityModel,
    stats: DatasetStats,
    start_step: int = 0,
    checkpoint_dir: str | Path | None = None,
) -> list[dict]:
    """Optimize the velocity model on standardized latents of a frozen tokenizer."""
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
    if stats.latent_std is None:
        raise ValueError("stats.latent_std missing; run latent_std_pass first")
    tokenizer.eval()
    tokenizer.requires_grad_(False)
    model.train()
    opt = _make_optimizer(model, cfg)
    enc_gen = torch_generator(cfg.seed, f"dit-enc-noise:{start_step}")
    t_gen = torch_generator(cfg.seed, f"dit-time:{start_step}")
    eps_gen = torch_generator(cfg.seed, f"dit-eps:{start_step}")
    history: list[dict] = []

    for step in range(start_step, cfg.total_steps):
        lr = cosine_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_min)
        _set_lr(opt, lr)
        i0, it, i1 = data.batch(step)
        with torch.no_grad():
            post = tokenizer.encode(i0, it, i1)
            z = post.sample(enc_gen) / stats.latent_std
        t = torch.rand(z.shape[0], generator=t_gen, dtype=z.dtype)
        eps = torch.randn(z.shape, generator=eps_gen, dtype=z.dtype)
        noised = forward_sample(z, eps, t)
        v_pred = model(noised.x_t, noised.t, i0, i1, stats)
        loss = flow_loss(v_pred, z, eps)
        loss.backward()
        _clip_and_step(model, opt, cfg.grad_clip)

        history.append({"step": step, "lr": lr, "flow": float(loss.detach())})
        _maybe_checkpoint(
            step,
            cfg,
            checkpoint_dir,
            lambda step=step: [
                (
                    "dit",
                    checkpoint_from_model("dit", model, model.cfg, stats=stats, step=step + 1),
                )
            ],
        )
    return history


def write_loss_log(rows: list[dict], path: str | Path) -> None:
    """Loss log CSV: step, lr, then one column per loss component."""
    if not rows:
        raise ValueError("no loss rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
