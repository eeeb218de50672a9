"""Figures written next to evaluation reports (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date chunks so reruns give identical bytes
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def segmentation_figure(report, path, example=None):
    """Per-class precision, CNN alone vs CNN + Viterbi; optional probability track below."""
    with plt.rc_context(STYLE):
        rows = 2 if example is not None else 1
        fig, axes = plt.subplots(rows, 1, figsize=(6, 2.6 * rows), squeeze=False)
        ax = axes[0, 0]
        keys = ["non_vocal", "vocal", "mean"]
        x = np.arange(len(keys))
        for off, block, color in ((-0.18, "cnn", "0.6"), (0.18, "cnn_viterbi", "C0")):
            vals = [report[block][k] for k in keys]
            ax.bar(x + off, vals, width=0.36, color=color, label=block.replace("_", " + "))
        ax.set_xticks(x, keys)
        lo = min(min(report[b][k] for k in keys) for b in ("cnn", "cnn_viterbi"))
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        ax.set_ylabel("precision")
        ax.legend(loc="lower right", frameon=False)
        if example is not None:
            ax = axes[1, 0]
            p, smoothed, truth = (np.asarray(v) for v in example)
            t = np.arange(len(p)) * 0.01
            ax.plot(t, p, lw=0.8, color="0.5", label="p(vocal)")
            ax.step(t, smoothed * 0.96 + 0.02, where="post", lw=1.0, color="C0", label="viterbi")
            ax.fill_between(t, 0, truth, step="post", color="C2", alpha=0.15, label="truth")
            ax.set_xlabel("time (s)")
            ax.set_ylim(-0.05, 1.05)
            ax.legend(loc="upper right", frameon=False, ncol=3)
        fig.tight_layout()
        return _save(fig, path)


def separation_figure(report, path):
    """Model SI-SDR against mixture baseline per track."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        base = np.array([t["baseline"] for t in report["per_track"]])
        est = np.array([t["si_sdr"] for t in report["per_track"]])
        lo = float(min(base.min(), est.min())) - 1
        hi = float(max(base.max(), est.max())) + 1
        ax.plot([lo, hi], [lo, hi], color="0.7", lw=0.8, ls="--")
        ax.scatter(base, est, s=14, color="C0")
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_xlabel("mixture SI-SDR (dB)")
        ax.set_ylabel(f"{report.get('skip_kind', 'model')} skip SI-SDR (dB)")
        ax.set_title(f"median improvement {report['median_improvement']:.2f} dB")
        fig.tight_layout()
        return _save(fig, path)


def confusion_figure(predictions, truths, names, path, title=""):
    with plt.rc_context(STYLE):
        n = len(names)
        cm = np.zeros((n, n), dtype=int)
        for p, t in zip(predictions, truths):
            cm[t, p] += 1
        fig, ax = plt.subplots(figsize=(1.2 + 0.5 * n, 1.0 + 0.5 * n))
        ax.imshow(cm, cmap="Blues")
        for i in range(n):
            for j in range(n):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                        color="white" if cm[i, j] > cm.max() / 2 else "black", fontsize=7)
        ax.set_xticks(range(n), names, rotation=45, ha="right")
        ax.set_yticks(range(n), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def fold_figure(blocks, path):
    """Song-level macro F1 per fold for each feature mode ({mode: cv report})."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 2.8))
        modes = list(blocks)
        k = len(next(iter(blocks.values()))["folds"])
        width = 0.8 / len(modes)
        for i, mode in enumerate(modes):
            f1 = [f["song"]["f1"] for f in blocks[mode]["folds"]]
            ax.bar(np.arange(k) + (i - (len(modes) - 1) / 2) * width, f1, width=width, label=mode)
        ax.set_xticks(range(k), [f"fold {i + 1}" for i in range(k)])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("macro F1 (songs)")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def loss_figure(losses, path, title=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        ax.plot(np.arange(1, len(losses) + 1), losses, marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
