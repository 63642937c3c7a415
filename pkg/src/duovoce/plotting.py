"""Figures written next to the CSV outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_CHANNEL_STYLE = {"mic": ("tab:red", "o"), "vib": ("tab:green", "s"), "enhanced": ("tab:blue", "^")}


def plot_report(report, path) -> Path:
    """One row per mode, one column per metric, a line per channel over noise level."""
    metrics = [("si_sdr_db", "SI-SDR (dB)"), ("stoi", "STOI"), ("wer", "WER"), ("cer", "CER")]
    modes = report.modes or ["normal"]
    fig, axes = plt.subplots(len(modes), len(metrics), figsize=(3.2 * len(metrics), 2.8 * len(modes)),
                             squeeze=False)
    channels = sorted({r["channel"] for r in report.records}, key=list(_CHANNEL_STYLE).index)
    for row, mode in enumerate(modes):
        for col, (key, label) in enumerate(metrics):
            ax = axes[row][col]
            for ch in channels:
                agg = report.aggregates(ch)
                levels = [lv for (m, lv) in agg if m == mode]
                vals = [agg[(mode, lv)][key] for lv in levels]
                colour, marker = _CHANNEL_STYLE[ch]
                ax.plot(levels, vals, marker=marker, color=colour, label=ch)
            ax.set_xlabel("noise level (dB re clean)")
            ax.set_title(f"{label}, {mode}", fontsize=9)
            ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_curve(history: list, path) -> Path:
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "ae", "kd"):
        ax.plot(steps, [h[key] for h in history], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_logmel(logmel: np.ndarray, path, hop_s: float = 100 / 16000) -> Path:
    """(frames, mels) log-mel matrix as an image with time on x."""
    fig, ax = plt.subplots(figsize=(7, 3))
    extent = (0, logmel.shape[0] * hop_s, 0, logmel.shape[1])
    im = ax.imshow(logmel.T, origin="lower", aspect="auto", extent=extent, cmap="magma")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mel band")
    fig.colorbar(im, ax=ax, label="log power")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
