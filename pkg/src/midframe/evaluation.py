"""Reference-based metrics and sweep harnesses.

PSNR and SSIM are computed on [0,1] frames; perceptual metrics are pluggable
and omitted from reports unless an extractor is supplied. Sweeps vary the
number of denoising steps or the frame interval and report per-sample rows
plus MEAN aggregates, serialized as CSV.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .data import TripletRecord, triplet_sample
from .diffusion import DatasetStats, VelocityModel, interpolate_frame
from .losses import FeatureExtractor, perceptual_loss
from .seeding import derive_seed
from .tokenizer import FrameTokenizer

PSNR_CAP = 99.0
CSV_FIELDS = ("sample_id", "steps", "interval", "psnr", "ssim", "perceptual", "runtime_s")


def psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    """10 log10(1 / MSE) in dB for [0,1] frames, capped at 99 dB."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = float(((pred.double() - target.double()) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return kernel / kernel.sum()


def ssim(pred: torch.Tensor, target: torch.Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over channels and
    positions. Frames must be at least window x window."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() != 3 or pred.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) frames, got {tuple(pred.shape)}")
    h, w = pred.shape[0], pred.shape[1]
    if h < window or w < window:
        raise ValueError(f"frame {h}x{w} smaller than SSIM window {window}")
    c1 = 0.01**2
    c2 = 0.03**2
    kernel = _gaussian_window(window, sigma).expand(3, 1, window, window)
    x = pred.double().permute(2, 0, 1).unsqueeze(0)
    y = target.double().permute(2, 0, 1).unsqueeze(0)
    mu_x = F.conv2d(x, kernel, groups=3)
    mu_y = F.conv2d(y, kernel, groups=3)
    var_x = F.conv2d(x * x, kernel, groups=3) - mu_x**2
    var_y = F.conv2d(y * y, kernel, groups=3) - mu_y**2
    cov = F.conv2d(x * y, kernel, groups=3) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def perceptual_metric_interface(
    pred: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor
) -> float:
    """Report (not optimize) a perceptual distance through a user extractor."""
    return float(perceptual_loss(pred, target, extractor))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class MetricRow:
    sample_id: str
    steps: int
    interval: int
    psnr: float
    ssim: float
    perceptual: float | None
    runtime_s: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def mean_rows(self) -> list[MetricRow]:
        return [r for r in self.rows if r.sample_id == "MEAN"]

    def sample_rows(self) -> list[MetricRow]:
        return [r for r in self.rows if r.sample_id != "MEAN"]


def _mean_row(rows: Sequence[MetricRow]) -> MetricRow:
    perceptuals = [r.perceptual for r in rows if r.perceptual is not None]
    return MetricRow(
        sample_id="MEAN",
        steps=rows[0].steps,
        interval=rows[0].interval,
        psnr=sum(r.psnr for r in rows) / len(rows),
        ssim=sum(r.ssim for r in rows) / len(rows),
        perceptual=sum(perceptuals) / len(perceptuals) if perceptuals else None,
        runtime_s=sum(r.runtime_s for r in rows) / len(rows),
    )


def report_with_mean(rows: Sequence[MetricRow]) -> MetricReport:
    """Per-sample rows followed by their MEAN aggregate."""
    if not rows:
        raise ValueError("no samples to report")
    return MetricReport(rows=list(rows) + [_mean_row(rows)])


def evaluate_triplets(
    tokenizer: FrameTokenizer,
    model: VelocityModel,
    stats: DatasetStats,
    triplets: Sequence[TripletRecord],
    steps: int = 2,
    seed: int = 0,
    extractor: FeatureExtractor | None = None,
) -> list[MetricRow]:
    """Interpolate each triplet's midpoint and score it against ground truth."""
    if not triplets:
        raise ValueError("no samples to evaluate")
    rows = []
    for idx, rec in enumerate(triplets):
        t0 = time.perf_counter()
        pred = interpolate_frame(
            tokenizer, model, stats, rec.i0, rec.i1,
            steps=steps, seed=derive_seed(seed, f"eval:{idx}"),
        )
        runtime = time.perf_counter() - t0
        rows.append(
            MetricRow(
                sample_id=rec.source_id or f"sample{idx}",
                steps=steps,
                interval=rec.interval,
                psnr=psnr(pred, rec.it),
                ssim=ssim(pred, rec.it),
                perceptual=(
                    perceptual_metric_interface(pred, rec.it, extractor)
                    if extractor is not None
                    else None
                ),
                runtime_s=runtime,
            )
        )
    return rows


def sweep_denoising_steps(
    tokenizer: FrameTokenizer,
    model: VelocityModel,
    stats: DatasetStats,
    triplets: Sequence[TripletRecord],
    steps_list: Sequence[int] = (0, 1, 2, 5, 20, 50),
    seed: int = 0,
    extractor: FeatureExtractor | None = None,
) -> MetricReport:
    """Metrics as a function of the number of denoising steps."""
    if not steps_list:
        raise ValueError("steps_list must be non-empty")
    if min(steps_list) < 0:
        raise ValueError(f"step counts must be >= 0, got {min(steps_list)}")
    report = MetricReport()
    for steps in steps_list:
        rows = evaluate_triplets(
            tokenizer, model, stats, triplets, steps=steps, seed=seed, extractor=extractor
        )
        report.rows.extend(rows)
        report.rows.append(_mean_row(rows))
    return report


def sweep_intervals(
    tokenizer: FrameTokenizer,
    model: VelocityModel,
    stats: DatasetStats,
    sequences: Sequence[Sequence[torch.Tensor]],
    intervals: Sequence[int] = (1, 2, 4),
    steps: int = 2,
    seed: int = 0,
    max_per_sequence: int = 4,
    extractor: FeatureExtractor | None = None,
) -> MetricReport:
    """Metrics as a function of the frame interval (temporal downsampling)."""
    if not intervals or min(intervals) < 1:
        raise ValueError(f"bad interval list {intervals}")
    report = MetricReport()
    for k in intervals:
        triplets: list[TripletRecord] = []
        for s, seq in enumerate(sequences):
            last_start = len(seq) - 1 - 2 * k
            if last_start < 0:
                raise ValueError(
                    f"sequence {s} has {len(seq)} frames, too short for interval {k}"
                )
            n = min(max_per_sequence, last_start + 1)
            starts = sorted({round(i * last_start / max(n - 1, 1)) for i in range(n)})
            for i in starts:
                triplets.append(triplet_sample(seq, i, k, source_id=f"seq{s}_i{i}"))
        rows = evaluate_triplets(
            tokenizer, model, stats, triplets, steps=steps, seed=seed, extractor=extractor
        )
        report.rows.extend(rows)
        report.rows.append(_mean_row(rows))
    return report


# ---------------------------------------------------------------------------
# CSV serialization (round-trip exact)
# ---------------------------------------------------------------------------


def write_metric_csv(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in report.rows:
            writer.writerow(
                [
                    r.sample_id,
                    r.steps,
                    r.interval,
                    repr(r.psnr),
                    repr(r.ssim),
                    "" if r.perceptual is None else repr(r.perceptual),
                    repr(r.runtime_s),
                ]
            )


def read_metric_csv(path: str | Path) -> MetricReport:
    report = MetricReport()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {header}")
        for row in reader:
            report.rows.append(
                MetricRow(
                    sample_id=row[0],
                    steps=int(row[1]),
                    interval=int(row[2]),
                    psnr=float(row[3]),
                    ssim=float(row[4]),
                    perceptual=None if row[5] == "" else float(row[5]),
                    runtime_s=float(row[6]),
                )
            )
    return report
