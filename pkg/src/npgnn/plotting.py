"""Figures for training histories and experiment summaries (files only, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def figsize(scale: float = 1.0, ratio: float = 0.62) -> tuple[float, float]:
    width = 6.0 * scale
    return width, width * ratio


def plot_history(histories, path, title: str = "") -> Path:
    """ELBO per iteration (left) and validation AUC/AP at evaluation points (right).

    ``histories`` is a list of per-seed record lists as produced by training.
    """
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=figsize(1.3, 0.4))
        for k, hist in enumerate(histories):
            it = [r["iteration"] for r in hist]
            ax_l.plot(it, [r["elbo"] for r in hist], lw=0.8, alpha=0.8, label=f"run {k}" if k < 10 else None)
            ev = [r for r in hist if r.get("val_auc") is not None]
            if ev:
                x = [r["iteration"] + 1 for r in ev]
                ax_r.plot(x, [r["val_auc"] for r in ev], "-o", ms=2, lw=0.8, color=f"C{k % 10}")
                ax_r.plot(x, [r["val_ap"] for r in ev], "--", lw=0.8, color=f"C{k % 10}")
        ax_l.set_xlabel("iteration")
        ax_l.set_ylabel("ELBO")
        ax_r.set_xlabel("iteration")
        ax_r.set_ylabel("validation AUC (solid) / AP (dashed)")
        if not ax_r.lines:
            ax_r.text(0.5, 0.5, "no validation pairs", ha="center", va="center", transform=ax_r.transAxes)
        if len(histories) > 1:
            ax_l.legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path


def plot_summary(rows, path, title: str = "") -> Path:
    """Bar chart of mean AUC and AP (in percent) with standard-error bars.

    ``rows`` holds dicts with ``label``, ``auc_mean``, ``auc_se``, ``ap_mean``
    and ``ap_se`` (fractions in [0, 1]).
    """
    path = Path(path)
    labels = [r["label"] for r in rows]
    x = np.arange(len(rows))
    w = 0.38
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(max(1.0, 0.25 * len(rows) + 0.5)))
        for off, key, name in ((-w / 2, "auc", "AUC"), (w / 2, "ap", "AP")):
            means = np.array([100 * r[f"{key}_mean"] for r in rows], dtype=float)
            errs = np.array([100 * r[f"{key}_se"] for r in rows], dtype=float)
            ax.bar(x + off, means, w, yerr=errs, capsize=3, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel("score (%)")
        finite = [100 * r[k] for r in rows for k in ("auc_mean", "ap_mean") if np.isfinite(r[k])]
        if finite:
            ax.set_ylim(max(0.0, min(finite) - 10), 100)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path
