"""Figure rendering for training and evaluation outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport

# drop the version-bearing Software tag so reruns are byte-identical
_PNG_META = {"Software": "afflow"}


def _save(fig, out_path):
    fig.savefig(out_path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curve(steps, nlls, out_path, window: int = 50):
    """NLL per step with a moving average overlay."""
    steps = np.asarray(steps)
    nlls = np.asarray(nlls, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, nlls, lw=0.6, alpha=0.5, label="per step")
    if len(nlls) >= window:
        kernel = np.ones(window) / window
        smooth = np.convolve(nlls, kernel, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.6, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("NLL (nats/dim)")
    ax.legend()
    fig.tight_layout()
    _save(fig, out_path)


def plot_loss_csv(csv_path, out_path, window: int = 50):
    rows = Path(csv_path).read_text().splitlines()[1:]
    steps, nlls = [], []
    for row in rows:
        step, nll, _ = row.split(",")
        steps.append(int(step))
        nlls.append(float(nll))
    plot_loss_curve(steps, nlls, out_path, window)


def plot_metric_report(report: MetricReport, out_path):
    """Per-image PSNR/SSIM/UQI panels with mean lines."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    idx = np.arange(len(report))
    panels = [
        ("PSNR (dB)", report.psnr_values, report.mean_psnr),
        ("SSIM", report.ssim_values, report.mean_ssim),
        ("UQI", report.uqi_values, report.mean_uqi),
    ]
    for ax, (label, values, mean) in zip(axes, panels):
        ax.bar(idx, values, width=0.8)
        ax.axhline(mean, color="k", ls="--", lw=1, label=f"mean {mean:.3g}")
        ax.set_xlabel("image")
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path)
