"""Figures written to files by the CLI.  Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .depth_model import DepthMixture, integration_bounds, pdf  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}
# no timestamp or version in the file, so reruns are byte-identical
_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_auc_curve(curve, path, label=None):
    """Fraction of pixel-depth mass below each flow threshold."""
    curve = np.asarray(curve, dtype=float).reshape(-1, 2)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(curve[:, 0], 100.0 * curve[:, 1], lw=1.5, label=label)
        ax.fill_between(curve[:, 0], 100.0 * curve[:, 1], alpha=0.15)
        ax.set_xlim(curve[0, 0], curve[-1, 0])
        ax.set_ylim(0, 100)
        ax.set_xlabel("induced flow threshold (px)")
        ax.set_ylabel("mass below threshold (%)")
        if label:
            ax.legend()
        return _save(fig, path)


def plot_trajectories(gt, est, path):
    """Top view (x, y) of two camera-to-world trajectories."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        g, e = gt.positions(), est.positions()
        ax.plot(g[:, 0], g[:, 1], "k-", lw=1.0, label="ground truth")
        ax.plot(e[:, 0], e[:, 1], "-", color="tab:red", lw=1.0, label="estimate")
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.legend()
        return _save(fig, path)


def plot_board_graph(graph, path):
    """Board centres and pose-graph edges, top view."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pos = {b: p.translation for b, p in graph.nodes.items()}
        for e in graph.edges:
            if e.board_i in pos and e.board_j in pos:
                a, b = pos[e.board_i], pos[e.board_j]
                ax.plot([a[0], b[0]], [a[1], b[1]], "-", color="0.7", lw=0.5 + 0.02 * min(e.support_count, 100))
        xy = np.array([pos[b] for b in sorted(pos)])
        ax.scatter(xy[:, 0], xy[:, 1], s=30, zorder=3)
        for b in sorted(pos):
            ax.annotate(str(b), pos[b][:2], textcoords="offset points", xytext=(4, 4), fontsize=8)
        ref = pos[graph.reference_board]
        ax.scatter([ref[0]], [ref[1]], s=80, marker="s", facecolor="none", edgecolor="k", zorder=4)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        return _save(fig, path)


def plot_depth_fit(samples, mixture: DepthMixture, path, bins: int = 60):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        lo, hi = integration_bounds(mixture)
        ax.hist(samples, bins=bins, density=True, color="0.75", label="samples")
        d = np.linspace(lo, hi, 400)
        ax.plot(d, pdf(mixture, d), lw=1.5, label=f"{mixture.family}, k={mixture.k}")
        ax.set_xlabel("depth (m)")
        ax.set_ylabel("density")
        ax.legend()
        return _save(fig, path)


def plot_ablation(summary, path):
    """Median ATE per ablation row."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [s["row"] for s in summary]
        vals = [1000.0 * s["median_ate"] for s in summary]
        ax.bar(range(len(vals)), vals, color="tab:blue")
        ax.set_xticks(range(len(vals)), labels, rotation=30, ha="right")
        ax.set_ylabel("median ATE (mm)")
        ax.set_yscale("log")
        return _save(fig, path)
