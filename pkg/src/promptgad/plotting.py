"""Figures written next to the text reports. Always uses the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 4.5

params = {
    "axes.labelsize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "axes.grid": True,
    "grid.linestyle": "--",
    "grid.linewidth": 0.4,
    "figure.max_open_warning": 0,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_per_class_ap(per_class: dict, frequencies, path, threshold_key: str = "0.5") -> Path:
    """Bars of AP per activity class, with the GT class frequency as a line on a twin axis."""
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        aps = per_class.get(threshold_key, {})
        classes = np.arange(len(frequencies))
        ax.bar(classes, [aps.get(int(c), 0.0) for c in classes], color="#4eb3d3")
        ax.set_xticks(classes)
        ax.set_xticklabels([f"c{c}" for c in classes])
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("activity class")
        ax.set_ylabel(f"AP@{threshold_key}")
        twin = ax.twinx()
        twin.plot(classes, frequencies, "o-", color="#08589e")
        twin.set_ylabel("GT groups")
        twin.grid(False)
        return _save(fig, path)


def plot_training_curves(history: list[dict], path) -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        epochs = [h["epoch"] for h in history]
        for key in ("total", "ind", "group", "mem", "con"):
            ax.plot(epochs, [h[key] for h in history], label=key)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(ncol=5, loc="upper center", bbox_to_anchor=(0.5, -0.22))
        return _save(fig, path)


def plot_attention_overlay(frame: np.ndarray, heatmaps: np.ndarray, path, title: str = "") -> Path:
    """One panel per group token: the frame with that token's patch attention on top."""
    k = heatmaps.shape[0]
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, k, figsize=(1.3 * k, 1.5), squeeze=False)
        size = frame.shape[0]
        for i, ax in enumerate(axes[0]):
            ax.imshow(frame)
            ax.imshow(heatmaps[i], cmap="magma", alpha=0.55, extent=(-0.5, size - 0.5, size - 0.5, -0.5),
                      interpolation="nearest")
            ax.set_title(f"g{i}", fontsize=7)
            ax.axis("off")
        if title:
            fig.suptitle(title, fontsize=8)
        return _save(fig, path)


def plot_prompt_comparison(rows: list[dict], metrics, path) -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        width = 0.8 / max(len(rows), 1)
        x = np.arange(len(metrics))
        for i, row in enumerate(rows):
            ax.bar(x + i * width, [row[m] for m in metrics], width, label=row["prompt_mode"])
        ax.set_xticks(x + width * (len(rows) - 1) / 2)
        ax.set_xticklabels(metrics, rotation=20, ha="right")
        ax.set_ylim(0, 1.05)
        ax.legend()
        return _save(fig, path)
