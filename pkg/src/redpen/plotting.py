"""Report figures: token-count histograms, training curves, threshold sweeps.

Every function writes one image file and returns its path.  The Agg backend
is selected on import so nothing needs a display.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .tokenizer import VocabStats  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_vocab_stats(stats_by_size: Mapping[int, VocabStats], path, max_tokens: int = 40) -> Path:
    """Overlaid tokens-per-correction histograms, one line per vocabulary size."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for size, st in sorted(stats_by_size.items()):
            n = st.count
            xs = [k for k in sorted(st.histogram) if k <= max_tokens]
            ys = [st.histogram[k] / n for k in xs]
            ax.plot(xs, ys, marker=".", lw=1, label=f"{size} (mean {st.mean:.2f})")
        ax.set_xlabel("tokens per correction")
        ax.set_ylabel("fraction of sentences")
        ax.legend(title="vocabulary size")
        return _save(fig, path)


def plot_training(rows: Sequence[dict], path) -> Path:
    """Loss, accuracies and dev scores (when logged) against the epoch."""
    epochs = [r["epoch"] for r in rows]
    dev = [r for r in rows if r.get("dev_F05") not in ("", None)]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(11.0, 3.2), layout="constrained")
        ax1.plot(epochs, [r["loss"] for r in rows], color="k", lw=1)
        ax1.set_ylabel("training loss")
        ax2.plot(epochs, [r["tok_acc"] for r in rows], lw=1, label="token")
        ax2.plot(epochs, [r["span_acc"] for r in rows], lw=1, label="span")
        ax2.set_ylabel("training accuracy")
        ax2.set_ylim(0, 1.02)
        ax2.legend()
        if dev:
            x = [r["epoch"] for r in dev]
            for key, label in (("dev_P", "P"), ("dev_R", "R"), ("dev_F05", "F0.5")):
                ax3.plot(x, [float(r[key]) for r in dev], lw=1, label=label)
            ax3.legend()
        else:
            ax3.text(0.5, 0.5, "no dev evaluation", ha="center", va="center",
                     transform=ax3.transAxes)
        ax3.set_ylim(0, 1.02)
        ax3.set_ylabel("dev score")
        for ax in (ax1, ax2, ax3):
            ax.set_xlabel("epoch")
        return _save(fig, path)


def plot_threshold_sweep(rows: Sequence[tuple], best: float, path) -> Path:
    """P, R and F0.5 against the minimum edit probability."""
    ts = [r[0] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, label in ((1, "P"), (2, "R"), (3, "F0.5")):
            ax.plot(ts, [r[i] for r in rows], lw=1.2 if i == 3 else 0.8, label=label)
        ax.axvline(best, color="k", ls="--", lw=0.8, label=f"chosen {best:g}")
        ax.set_xlabel("minimum edit probability")
        ax.set_ylabel("score")
        ax.set_ylim(0, 1.02)
        ax.legend()
        return _save(fig, path)
