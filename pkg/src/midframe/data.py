"""Synthetic motion corpus, frame-sequence ingestion, and triplet sampling.

The sprite corpus is a desk-scale substitute for a large video dataset: a few
anti-aliased shapes moving on a black canvas along linear or sinusoidal
trajectories. Real footage enters through the same code path via directories
of PNG frames.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .diffusion import DatasetStats, frame_cosine_similarity
from .seeding import derive_seed

SHAPES = ("disc", "rectangle", "triangle")
FRAME_NAME = "frame_{:06d}.png"
FRAME_RE = re.compile(r"^frame_(\d{6})\.png$")


@dataclass
class SpriteSpec:
    shape: str
    color: tuple[float, float, float]
    position: tuple[float, float]  # (row, col) of the center at t=0
    size: float  # radius / half-extent in pixels
    velocity: tuple[float, float]  # (rows, cols) per frame
    trajectory: str = "linear"  # linear | sinusoidal
    wobble_amp: float = 0.0  # sinusoidal offset added to the row coordinate
    wobble_period: float = 8.0
    phase: float = 0.0

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}, expected one of {SHAPES}")
        if self.trajectory not in ("linear", "sinusoidal"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.size <= 0:
            raise ValueError(f"size must be positive, got {self.size}")


@dataclass
class SpriteSceneConfig:
    height: int = 64
    width: int = 64
    n_sprites: int = 3
    shapes: tuple[str, ...] = SHAPES
    speed_range: tuple[float, float] = (0.5, 2.0)  # pixels per frame
    size_range: tuple[float, float] = (5.0, 10.0)
    trajectory: str = "mixed"  # linear | sinusoidal | mixed
    n_frames: int = 25
    seed: int = 0
    sprites: list[SpriteSpec] | None = None  # explicit override, skips sampling

    def __post_init__(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ValueError(f"canvas {self.height}x{self.width} too small")
        if self.n_frames < 2:
            raise ValueError(f"n_frames must be >= 2, got {self.n_frames}")
        if self.trajectory not in ("linear", "sinusoidal", "mixed"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.sprites is None and self.n_sprites < 1:
            raise ValueError("n_sprites must be >= 1")
        if not 0 < self.speed_range[0] <= self.speed_range[1]:
            raise ValueError(f"bad speed range {self.speed_range}")


@dataclass
class TripletRecord:
    i0: torch.Tensor
    it: torch.Tensor
    i1: torch.Tensor
    interval: int
    source_id: str = ""
    crop_origin: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        shapes = {tuple(f.shape) for f in (self.i0, self.it, self.i1)}
        if len(shapes) != 1:
            raise ValueError(f"triplet frames must share resolution, got {shapes}")
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")


# ---------------------------------------------------------------------------
# Sprite rendering
# ---------------------------------------------------------------------------


def sprite_positions(spec: SpriteSpec, n_frames: int) -> np.ndarray:
    """Analytic (row, col) center per frame, shape (n_frames, 2)."""
    t = np.arange(n_frames, dtype=np.float64)
    rows = spec.position[0] + spec.velocity[0] * t
    cols = spec.position[1] + spec.velocity[1] * t
    if spec.trajectory == "sinusoidal":
        rows = rows + spec.wobble_amp * np.sin(
            2.0 * math.pi * t / spec.wobble_period + spec.phase
        )
    return np.stack([rows, cols], axis=1)


def _shape_mask(
    spec: SpriteSpec, center: np.ndarray, rows: np.ndarray, cols: np.ndarray
) -> np.ndarray:
    cy, cx = center
    dy = rows - cy
    dx = cols - cx
    if spec.shape == "disc":
        return dy**2 + dx**2 <= spec.size**2
    if spec.shape == "rectangle":
        return (np.abs(dy) <= spec.size) & (np.abs(dx) <= spec.size)
    # Up-pointing isoceles triangle: apex at (cy - size), base at (cy + size).
    inside_band = (dy >= -spec.size) & (dy <= spec.size)
    half_width = (dy + spec.size) / 2.0  # widens linearly toward the base
    return inside_band & (np.abs(dx) <= half_width)


def render_sprites(
    specs: Sequence[SpriteSpec],
    centers: Sequence[np.ndarray],
    height: int,
    width: int,
    supersample: int = 4,
) -> torch.Tensor:
    """Render sprites (painter's order) onto a black canvas with anti-aliasing
    by supersampled box averaging. Returns a (H, W, 3) float32 frame."""
    s = supersample
    ys = (np.arange(height * s, dtype=np.float64) + 0.5) / s
    xs = (np.arange(width * s, dtype=np.float64) + 0.5) / s
    rows = ys[:, None]
    cols = xs[None, :]
    canvas = np.zeros((height * s, width * s, 3), dtype=np.float64)
    for spec, center in zip(specs, centers):
        mask = _shape_mask(spec, center, rows, cols)
        canvas[mask] = spec.color
    frame = canvas.reshape(height, s, width, s, 3).mean(axis=(1, 3))
    return torch.from_numpy(frame.astype(np.float32))


def _sample_sprites(cfg: SpriteSceneConfig) -> list[SpriteSpec]:
    rng = np.random.default_rng(derive_seed(cfg.seed, "sprites"))
    specs: list[SpriteSpec] = []
    for i in range(cfg.n_sprites):
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        size = float(rng.uniform(*cfg.size_range))
        if cfg.trajectory == "mixed":
            trajectory = "sinusoidal" if i % 2 else "linear"
        else:
            trajectory = cfg.trajectory
        wobble_amp = float(rng.uniform(1.0, 4.0)) if trajectory == "sinusoidal" else 0.0
        margin = size + wobble_amp + 1.0
        lo_r, hi_r = margin, cfg.height - 1 - margin
        lo_c, hi_c = margin, cfg.width - 1 - margin
        if lo_r >= hi_r or lo_c >= hi_c:
            raise ValueError(
                f"canvas {cfg.height}x{cfg.width} too small for sprite size {size:.1f}"
            )
        pos = (float(rng.uniform(lo_r, hi_r)), float(rng.uniform(lo_c, hi_c)))
        speed = float(rng.uniform(*cfg.speed_range))
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        vel = np.array([speed * math.sin(angle), speed * math.cos(angle)])
        # Shrink velocity if the trajectory would leave the safe box.
        span = cfg.n_frames - 1
        scale = 1.0
        for v, p, lo, hi in ((vel[0], pos[0], lo_r, hi_r), (vel[1], pos[1], lo_c, hi_c)):
            end = p + v * span
            if end > hi:
                scale = min(scale, (hi - p) / (v * span))
            elif end < lo:
                scale = min(scale, (lo - p) / (v * span))
        vel = vel * scale
        color = tuple(float(c) for c in rng.uniform(0.25, 1.0, size=3))
        specs.append(
            SpriteSpec(
                shape=shape,
                color=color,
                position=pos,
                size=size,
                velocity=(float(vel[0]), float(vel[1])),
                trajectory=trajectory,
                wobble_amp=wobble_amp,
                wobble_period=float(rng.uniform(6.0, 14.0)),
                phase=float(rng.uniform(0.0, 2.0 * math.pi)),
            )
        )
    return specs


def synth_sequence(cfg: SpriteSceneConfig) -> list[torch.Tensor]:
    """Deterministic sprite sequence: n_frames frames of (H, W, 3) in [0, 1]."""
    specs = cfg.sprites if cfg.sprites is not None else _sample_sprites(cfg)
    all_centers = [sprite_positions(spec, cfg.n_frames) for spec in specs]
    for spec, centers in zip(specs, all_centers):
        rows, cols = centers[:, 0], centers[:, 1]
        if (
            rows.min() < 0
            or rows.max() > cfg.height - 1
            or cols.min() < 0
            or cols.max() > cfg.width - 1
        ):
            raise ValueError(
                f"sprite at {spec.position} with velocity {spec.velocity} leaves "
                f"the {cfg.height}x{cfg.width} canvas"
            )
    return [
        render_sprites(specs, [c[t] for c in all_centers], cfg.height, cfg.width)
        for t in range(cfg.n_frames)
    ]


# ---------------------------------------------------------------------------
# Triplets and crops
# ---------------------------------------------------------------------------


def triplet_sample(
    sequence: Sequence[torch.Tensor], i: int, k: int, source_id: str = ""
) -> TripletRecord:
    """(I0, It, I1) = (frame i, frame i+k, frame i+2k); It is the midpoint."""
    if k < 1:
        raise ValueError(f"interval k must be >= 1, got {k}")
    if i < 0 or i + 2 * k >= len(sequence):
        raise ValueError(
            f"triplet ({i}, {i + k}, {i + 2 * k}) out of range for {len(sequence)} frames"
        )
    return TripletRecord(
        i0=sequence[i], it=sequence[i + k], i1=sequence[i + 2 * k], interval=k,
        source_id=source_id,
    )


def multi_res_crop(
    rec: TripletRecord,
    target_h: int,
    target_w: int,
    origin: tuple[int, int],
    multiple_of: int = 1,
) -> TripletRecord:
    """Aligned spatial crop of all three frames at the same origin."""
    oy, ox = origin
    h, w = rec.i0.shape[0], rec.i0.shape[1]
    if target_h % multiple_of or target_w % multiple_of:
        raise ValueError(
            f"crop {target_h}x{target_w} not divisible by {multiple_of}"
        )
    if oy < 0 or ox < 0 or oy + target_h > h or ox + target_w > w:
        raise ValueError(
            f"crop {target_h}x{target_w} at ({oy}, {ox}) exceeds source {h}x{w}"
        )
    return replace(
        rec,
        i0=rec.i0[oy : oy + target_h, ox : ox + target_w],
        it=rec.it[oy : oy + target_h, ox : ox + target_w],
        i1=rec.i1[oy : oy + target_h, ox : ox + target_w],
        crop_origin=(oy, ox),
    )


def compute_dataset_stats(triplets: Sequence[TripletRecord]) -> DatasetStats:
    """Mean and population std of start-end cosine similarity over the corpus."""
    if not triplets:
        raise ValueError("cannot compute stats from an empty triplet set")
    sims = np.array(
        [float(frame_cosine_similarity(rec.i0, rec.i1)) for rec in triplets]
    )
    return DatasetStats(sim_mean=float(sims.mean()), sim_std=float(sims.std()))


# ---------------------------------------------------------------------------
# PNG frame directories
# ---------------------------------------------------------------------------


def save_frame_png(frame: torch.Tensor, path: str | Path) -> None:
    arr = (frame.detach().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_frame_png(path: str | Path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def write_frame_dir(frames: Sequence[torch.Tensor], path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for idx, frame in enumerate(frames):
        save_frame_png(frame, path / FRAME_NAME.format(idx))


def ingest_frame_dir(path: str | Path) -> list[torch.Tensor]:
    """Load frame_000000.png, frame_000001.png, ... in index order."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"frame directory not found: {path}")
    indexed: dict[int, Path] = {}
    for p in path.iterdir():
        m = FRAME_RE.match(p.name)
        if m:
            indexed[int(m.group(1))] = p
    if not indexed:
        raise ValueError(f"no frames found in {path}")
    expected = range(len(indexed))
    missing = sorted(set(expected) - set(indexed))
    if missing:
        raise ValueError(
            f"frame indices not contiguous in {path}: missing {missing[:5]}"
        )
    frames = [load_frame_png(indexed[i]) for i in expected]
    shapes = {tuple(f.shape) for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent frame resolutions in {path}: {shapes}")
    return frames


# ---------------------------------------------------------------------------
# Triplet list files: "dir_path start_idx mid_idx end_idx" per line
# ---------------------------------------------------------------------------


def write_triplet_list(
    entries: Sequence[tuple[str, int, int, int]], path: str | Path
) -> None:
    lines = [f"{d} {a} {b} {c}" for d, a, b, c in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_triplet_list(path: str | Path) -> list[TripletRecord]:
    """Load triplets from a list file; dir paths resolve against the file's
    parent. Frame directories are read once and cached."""
    path = Path(path)
    records: list[TripletRecord] = []
    cache: dict[Path, list[torch.Tensor]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        dir_path = Path(parts[0])
        if not dir_path.is_absolute():
            dir_path = path.parent / dir_path
        try:
            start, mid, end = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-integer index") from exc
        if mid - start != end - mid or mid <= start:
            raise ValueError(
                f"{path}:{lineno}: ({start}, {mid}, {end}) is not a centered triplet"
            )
        if dir_path not in cache:
            cache[dir_path] = ingest_frame_dir(dir_path)
        frames = cache[dir_path]
        if end >= len(frames):
            raise ValueError(
                f"{path}:{lineno}: index {end} out of range for {len(frames)} frames"
            )
        records.append(
            TripletRecord(
                i0=frames[start], it=frames[mid], i1=frames[end],
                interval=mid - start, source_id=str(dir_path),
            )
        )
    if not records:
        raise ValueError(f"no triplets in {path}")
    return records


# ---------------------------------------------------------------------------
# Training batch sources
# ---------------------------------------------------------------------------


def stack_triplets(
    triplets: Sequence[TripletRecord],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    i0 = torch.stack([rec.i0 for rec in triplets])
    it = torch.stack([rec.it for rec in triplets])
    i1 = torch.stack([rec.i1 for rec in triplets])
    return i0, it, i1


class FixedTripletBatcher:
    """Serves the same fixed triplets every step (overfit experiments)."""

    def __init__(self, triplets: Sequence[TripletRecord]):
        if not triplets:
            raise ValueError("no triplets provided")
        self._batch = stack_triplets(triplets)
        self.triplets = list(triplets)

    def batch(self, step: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self._batch


class TripletSampler:
    """Deterministic triplet batches from frame sequences.

    Every batch is a pure function of (seed, step): the resolution and frame
    interval are drawn per batch from the configured sets, then each sample
    draws a sequence, a start index, and an aligned crop origin.
    """

    def __init__(
        self,
        sequences: Sequence[Sequence[torch.Tensor]],
        intervals: Sequence[int],
        resolutions: Sequence[tuple[int, int]],
        batch_size: int,
        seed: int,
        multiple_of: int = 1,
    ):
        if not sequences:
            raise ValueError("no sequences provided")
        if not intervals or min(intervals) < 1:
            raise ValueError(f"bad interval set {intervals}")
        if not resolutions:
            raise ValueError("no resolutions provided")
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        max_k = max(intervals)
        for idx, seq in enumerate(sequences):
            if len(seq) < 2 * max_k + 1:
                raise ValueError(
                    f"sequence {idx} has {len(seq)} frames; need >= {2 * max_k + 1} "
                    f"for interval {max_k}"
                )
        h, w = sequences[0][0].shape[0], sequences[0][0].shape[1]
        for th, tw in resolutions:
            if th > h or tw > w:
                raise ValueError(f"resolution {th}x{tw} exceeds source {h}x{w}")
            if th % multiple_of or tw % multiple_of:
                raise ValueError(f"resolution {th}x{tw} not divisible by {multiple_of}")
        self.sequences = sequences
        self.intervals = list(intervals)
        self.resolutions = list(resolutions)
        self.batch_size = batch_size
        self.seed = seed
        self.multiple_of = multiple_of

    def sample_records(self, step: int) -> list[TripletRecord]:
        rng = np.random.default_rng(derive_seed(self.seed, f"batch:{step}"))
        th, tw = self.resolutions[int(rng.integers(len(self.resolutions)))]
        k = self.intervals[int(rng.integers(len(self.intervals)))]
        records = []
        for _ in range(self.batch_size):
            s = int(rng.integers(len(self.sequences)))
            seq = self.sequences[s]
            start = int(rng.integers(len(seq) - 2 * k))
            h, w = seq[0].shape[0], seq[0].shape[1]
            oy = int(rng.integers(h - th + 1))
            ox = int(rng.integers(w - tw + 1))
            rec = triplet_sample(seq, start, k, source_id=f"seq{s}")
            records.append(
                multi_res_crop(rec, th, tw, (oy, ox), multiple_of=self.multiple_of)
            )
        return records

    def batch(self, step: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return stack_triplets(self.sample_records(step))
