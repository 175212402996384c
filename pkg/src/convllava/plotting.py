"""Figures for the analyze and train report paths."""

from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = {"vit": "tab:red", "convnext4": "tab:blue", "convnext5": "tab:green"}
LABELS = {"vit": "ViT-L/14", "convnext4": "ConvNeXt-L", "convnext5": "ConvNeXt-L + stage 5"}

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width: float = 4.5):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return plt.subplots(figsize=(width, width * golden))


def plot_flops_curves(rows, path) -> None:
    """Total FLOPs against resolution, one line per encoder kind.

    ``rows`` are the tuples produced by :func:`convllava.analysis.curve_rows`.
    """
    series = defaultdict(list)
    for kind, res, _tokens, _enc, _llm, total in rows:
        series[kind].append((res, total / 1e12))
    with plt.rc_context(_RC):
        fig, ax = _figure()
        for kind, pts in sorted(series.items()):
            xs, ys = zip(*sorted(pts))
            ax.plot(xs, ys, marker="o", ms=3, color=COLORS.get(kind), label=LABELS.get(kind, kind))
        ax.set_xlabel("resolution (px)")
        ax.set_ylabel("total TFLOPs (encoder + LLM prefill)")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_loss_curve(records, path, window: int = 20) -> None:
    from .trainer import smoothed

    by_stage = defaultdict(list)
    for r in records:
        by_stage[r.stage].append(r)
    with plt.rc_context(_RC):
        fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(4.5, 4.0), sharex=True)
        offset = 0
        for stage, recs in sorted(by_stage.items()):
            xs = [offset + r.step for r in recs]
            losses = [r.loss for r in recs]
            line, = ax.plot(xs, losses, lw=0.6, alpha=0.4)
            ax.plot(xs, smoothed(losses, window), lw=1.2, color=line.get_color(), label=f"stage {stage}")
            ax_lr.plot(xs, [r.lr for r in recs], lw=1.0, color=line.get_color())
            offset = xs[-1]
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("optimizer step")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
