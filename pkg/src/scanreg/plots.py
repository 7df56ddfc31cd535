"""Figure rendering for training histories and evaluation reports.

Figures are written next to the delimited outputs (history.csv, metrics JSON)
so reports can be consumed offline. matplotlib is imported lazily with the Agg
backend; nothing here opens a window.
"""

from __future__ import annotations

import csv
from pathlib import Path


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_history(history_csv, out_png) -> None:
    """Loss curves and validation Dice from a history.csv file."""
    rows = []
    with open(history_csv) as fh:
        for row in csv.DictReader(fh):
            rows.append({k: float(v) for k, v in row.items()})
    if not rows:
        return
    plt = _plt()
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [r["train_loss"] for r in rows], label="train loss", color="tab:blue")
    ax.plot(epochs, [r["val_loss"] for r in rows], label="val loss", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["val_dice"] for r in rows], label="val dice",
             color="tab:green", linestyle="--")
    ax2.set_ylabel("val dice (%)")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="center right", fontsize=8)
    ax.set_title("training history")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_eval_report(report: dict, out_png) -> None:
    """Per-pair Dice before/after registration, with aggregate annotations."""
    pairs = report.get("pairs", [])
    if not pairs:
        return
    plt = _plt()
    idx = range(len(pairs))
    initial = [p["initial"]["dice_pct"] for p in pairs]
    registered = [p["registered"]["dice_pct"] for p in pairs]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    width = 0.38
    ax.bar([i - width / 2 for i in idx], initial, width, label="initial", color="0.7")
    ax.bar([i + width / 2 for i in idx], registered, width,
           label=f"registered (k={report.get('k')})", color="tab:blue")
    ax.set_xlabel("pair")
    ax.set_ylabel("dice (%)")
    ax.set_xticks(list(idx))
    agg = report.get("registered", {})
    ini = report.get("initial", {})
    ax.set_title(f"dice {ini.get('dice_pct_mean', 0):.1f} -> {agg.get('dice_pct_mean', 0):.1f} %"
                 f"   hd95 {agg.get('hd95_vox_mean', float('nan')):.2f} vox"
                 f"   njd {agg.get('njd_pct_mean', float('nan')):.2f} %", fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
