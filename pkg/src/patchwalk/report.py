"""Figure rendering for run artifacts.

Every CSV a run emits gets a matplotlib companion so results can be eyeballed
without loading anything into a notebook.  The Agg backend is forced because
runs are headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["training_curves", "eval_scatter", "ablation_bars"]


def training_curves(rows, out_path) -> None:
    """Reward/baseline and validation quality against epoch."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r["mean_reward"] for r in rows], marker="o",
             label="mean reward")
    ax1.plot(epochs, [r["baseline_b"] for r in rows], linestyle="--",
             label="baseline b")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("reward")
    ax1.legend()
    ax1.grid(True, alpha=0.3)
    ax2.plot(epochs, [r["val_psnr"] for r in rows], marker="o", color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val PSNR (dB)")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def eval_scatter(rows, out_path) -> None:
    """Per-image PSNR of the model against the bicubic reference."""
    ref = np.array([r["psnr_ref"] for r in rows])
    model = np.array([r["psnr"] for r in rows])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    lo = min(ref.min(), model.min()) - 0.5
    hi = max(ref.max(), model.max()) + 0.5
    ax.plot([lo, hi], [lo, hi], color="gray", linewidth=1, label="y = x")
    ax.scatter(ref, model, s=28, color="tab:blue", zorder=3)
    ax.set_xlabel("bicubic PSNR (dB)")
    ax.set_ylabel("model PSNR (dB)")
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def ablation_bars(means: dict, out_path) -> None:
    """Mean PSNR per action-source variant."""
    names = list(means)
    values = [means[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names)), 3.5))
    ax.bar(names, values, color="tab:blue", width=0.6)
    ax.set_ylabel("mean PSNR (dB)")
    lo = min(values)
    hi = max(values)
    pad = max(0.5, 0.1 * (hi - lo))
    ax.set_ylim(lo - pad, hi + pad)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
