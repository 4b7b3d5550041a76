"""Figure rendering for reports and loss logs.

Every CSV the CLI writes gets a companion PNG rendered here.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricReport  # noqa: E402


def plot_sweep(report: MetricReport, axis: str, path: str | Path, title: str = "") -> None:
    """PSNR and SSIM of the MEAN rows against the sweep axis ('steps' or 'interval')."""
    means = report.mean_rows()
    if not means:
        raise ValueError("report has no MEAN rows to plot")
    xs = [getattr(r, axis) for r in means]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(xs, [r.psnr for r in means], "o-", color="tab:blue", label="PSNR")
    ax1.set_xlabel(axis)
    ax1.set_ylabel("PSNR (dB)", color="tab:blue")
    ax1.tick_params(axis="y", labelcolor="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(xs, [r.ssim for r in means], "s--", color="tab:red", label="SSIM")
    ax2.set_ylabel("SSIM", color="tab:red")
    ax2.tick_params(axis="y", labelcolor="tab:red")
    if title:
        ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sample_metrics(report: MetricReport, path: str | Path, title: str = "") -> None:
    """Per-sample PSNR scatter with the MEAN drawn as a horizontal line."""
    samples = report.sample_rows()
    if not samples:
        raise ValueError("report has no sample rows to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(samples)), [r.psnr for r in samples], "o", color="tab:blue")
    means = report.mean_rows()
    if means:
        ax.axhline(means[0].psnr, color="tab:blue", linestyle="--", linewidth=1,
                   label=f"mean {means[0].psnr:.2f} dB")
        ax.legend(fontsize=8)
    ax.set_xlabel("sample")
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_log(rows: Sequence[dict], path: str | Path, title: str = "") -> None:
    """Loss components against the training step, log-scaled where positive."""
    if not rows:
        raise ValueError("no loss rows to plot")
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    skip = {"step", "lr"}
    for key in rows[0]:
        if key in skip:
            continue
        ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
