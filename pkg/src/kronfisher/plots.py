"""Figure renderers for the CLI report paths. Matplotlib stays out of the core;
every function here takes already-computed data and writes a file next to the
delimited output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_training_curves(rows, path):
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    by_split: dict[str, list] = {}
    for row in rows:
        by_split.setdefault(row["split"], []).append(row)
    for split, items in by_split.items():
        steps = [r["step"] for r in items]
        ax_loss.plot(steps, [r["loss"] for r in items], label=split)
        ax_acc.plot(steps, [r["accuracy"] for r in items], label=split)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("accuracy")
    ax_loss.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_comparison(results, path):
    """Bar chart of best test accuracy and mean step time per optimizer."""
    names = [r["optimizer"] for r in results]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(names, [r["best_test_accuracy"] for r in results], color="#4477aa")
    ax1.set_ylabel("best test accuracy")
    ax2.bar(names, [r["mean_step_time_ms"] for r in results], color="#ee6677")
    ax2.set_ylabel("mean step time (ms)")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_gershgorin(reports, path):
    """Disc plot per layer/factor: circles at (center, 0), eigenvalues as crosses."""
    items = list(reports.items())
    n = max(len(items), 1)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.6), squeeze=False)
    for ax, (label, rep) in zip(axes[0], items):
        for c, r in zip(rep.centers, rep.radii):
            ax.add_patch(plt.Circle((c, 0.0), max(r, 1e-12), fill=False, color="black", lw=0.6))
        ax.plot(rep.eigenvalues, np.zeros_like(rep.eigenvalues), "rx", ms=5)
        lo = float(min(rep.centers.min() - rep.radii.max(), rep.eigenvalues.min()))
        hi = float(max(rep.centers.max() + rep.radii.max(), rep.eigenvalues.max()))
        span = max(hi - lo, 1e-6)
        ax.set_xlim(lo - 0.05 * span, hi + 0.05 * span)
        ax.set_ylim(-0.6 * span, 0.6 * span)
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("Re")
        ax.set_ylabel("Im")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_landscape(export, path):
    """Trajectory over the loss-colored path inside the export's bounding box."""
    fig, ax = plt.subplots(figsize=(5, 4))
    w = export.trajectory
    sc = ax.scatter(w[:, 0], w[:, 1], c=export.losses, cmap="viridis", zorder=3)
    ax.plot(w[:, 0], w[:, 1], color="gray", lw=0.8, zorder=2)
    ax.plot(w[0, 0], w[0, 1], "ko", label="start")
    ax.plot(w[-1, 0], w[-1, 1], "r*", ms=10, label="end")
    ax.set_xlim(export.grid_bounds["xmin"], export.grid_bounds["xmax"])
    ax.set_ylim(export.grid_bounds["ymin"], export.grid_bounds["ymax"])
    ax.set_xlabel("w1")
    ax.set_ylabel("w2")
    ax.legend(fontsize=8)
    fig.colorbar(sc, ax=ax, label="loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_fim_histograms(hists, path):
    items = list(hists.items())
    n = max(len(items), 1)
    fig, axes = plt.subplots(1, n, figsize=(3.5 * n, 3.2), squeeze=False)
    for ax, (lid, (counts, edges)) in zip(axes[0], items):
        ax.stairs(counts, edges, fill=True, color="#4477aa")
        ax.set_title(f"layer {lid}", fontsize=9)
        ax.set_xlabel("curvature diagonal")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
