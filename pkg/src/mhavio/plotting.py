"""Matplotlib figures for report directories (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import COMPONENTS, MetricReport  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_trajectory(gt_xy: np.ndarray, pred_xy: np.ndarray, path, sigma: np.ndarray | None = None,
                    title: str = "") -> Path:
    """Top-down x/y paths; a 1-sigma band of circles around the prediction when ``sigma`` is given."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt_xy[:, 0], gt_xy[:, 1], "k-", lw=1.2, label="ground truth")
    ax.plot(pred_xy[:, 0], pred_xy[:, 1], "C0-", lw=1.2, label="prediction")
    if sigma is not None:
        for k in range(0, len(pred_xy), max(1, len(pred_xy) // 200)):
            ax.add_patch(plt.Circle(tuple(pred_xy[k]), sigma[k], color="C0", alpha=0.08, lw=0))
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_uncertainty_boxes(summary: dict, path) -> Path:
    """Per-component sigma distributions over error-quantile bins."""
    fig, axes = plt.subplots(2, 3, figsize=(10, 5.5))
    for ax, name in zip(axes.ravel(), COMPONENTS):
        rows = [r for r in summary["boxes"] if r["component"] == name]
        stats = [{"med": r["sigma_median"], "q1": r["sigma_q1"], "q3": r["sigma_q3"],
                  "whislo": r["sigma_min"], "whishi": r["sigma_max"], "label": str(r["bin"] + 1)}
                 for r in rows if r["count"]]
        if stats:
            ax.bxp(stats, showfliers=False)
        rho = summary["components"][name]["spearman"]
        ax.set_title(f"{name}  rho={rho:.2f}", fontsize=9)
        ax.set_xlabel("error quantile bin", fontsize=8)
        ax.set_ylabel("sigma", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_errors_per_length(report: MetricReport, path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    L = [r["length"] for r in report.per_length]
    a.plot(L, [r["t_rel"] for r in report.per_length], "o-")
    a.set_xlabel("sub-sequence length [m]")
    a.set_ylabel("translation error [%]")
    b.plot(L, [r["r_rel"] for r in report.per_length], "o-", color="C1")
    b.set_xlabel("sub-sequence length [m]")
    b.set_ylabel("rotation error [deg/100 m]")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curve(records: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy([r["epoch"] for r in records], [r["loss"] for r in records])
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    return _save(fig, path)
