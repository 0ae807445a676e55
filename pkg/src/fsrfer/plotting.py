"""Figures for reports: accuracy-vs-scale curves, training curves, degradation strips."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import SCALES, LabeledImage, downsample  # noqa: E402
from .evaluation import DISPLAY, ScaleReport, write_csv  # noqa: E402

_STYLE = {
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "fsrfer",
}
_MARKERS = "osD^v<>ph*"


def _save(fig, out: Path) -> None:
    # fixed metadata so re-renders are stable
    meta = {"Software": None} if out.suffix == ".png" else {"Date": None} if out.suffix in (".svg", ".pdf") else None
    fig.savefig(out, bbox_inches="tight", metadata=meta)
    plt.close(fig)


def plot_curves(report: ScaleReport, out: str | Path) -> Path:
    """Accuracy vs down-sample factor, one line per method; writes ``<out>.csv`` alongside."""
    if not report.rows:
        raise ValueError("cannot plot an empty report")
    out = Path(out)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, (m, cells) in enumerate(report.rows.items()):
            xs = sorted(cells)
            ax.plot(xs, [cells[s] for s in xs], marker=_MARKERS[i % len(_MARKERS)],
                    label=DISPLAY.get(m, m))
        ax.set_xlim(SCALES[0] - 0.3, SCALES[-1] + 0.3)
        ax.set_xticks(list(SCALES))
        ax.set_xticklabels([f"x{s}" for s in SCALES])
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("down-sample factor")
        ax.set_ylabel("total accuracy")
        ax.legend(loc="lower left", frameon=False)
        _save(fig, out)
    write_csv(report, out.with_suffix(".csv"))
    return out


def plot_training(records: Sequence[dict], out: str | Path, label: str = "") -> Path:
    """Generator/critic losses and validation accuracy against iteration."""
    out = Path(out)
    train = [r for r in records if r.get("event") == "train"]
    val = [r for r in records if r.get("event") == "val"]
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
        it = [r["iteration"] for r in train]
        for key in ("l_feat_l2", "l_perceptual", "l_total_g"):
            ax1.plot(it, [r[key] for r in train], lw=1, label=key)
        ax1.set_yscale("log")
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("generator loss")
        ax1.legend(frameon=False)
        ax2.plot([r["iteration"] for r in val], [r["val_acc"] for r in val], marker="o", ms=3)
        ax2.set_xlabel("iteration")
        ax2.set_ylabel("mean val accuracy")
        if label:
            fig.suptitle(label)
        _save(fig, out)
    return out


def plot_degradation(image: LabeledImage, out: str | Path, scales: Sequence[int] = SCALES) -> Path:
    """Strip of an HR image next to its bicubic-downsampled copies at native size."""
    out = Path(out)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(scales) + 1, figsize=(1.6 * (len(scales) + 1), 1.9))
        panels = [("HR", image.pixels)] + [(f"x{s}", downsample(image, s).pixels) for s in scales]
        for ax, (title, px) in zip(axes, panels):
            ax.imshow(np.clip(px, 0, 1).squeeze(), cmap="gray" if px.shape[2] == 1 else None,
                      interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        _save(fig, out)
    return out
