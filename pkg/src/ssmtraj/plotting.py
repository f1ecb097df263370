"""Figure rendering for reports: trajectory overlays and training curves.

Figures are written next to the delimited outputs; the data files remain the
canonical artifact and the images are derived views of the same arrays.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Ellipse


def ellipse_parameters(cov: np.ndarray, n_sigma: float = 2.0):
    """(major, minor, angle_rad) of the n-sigma ellipse of a 2x2 covariance.

    Axis lengths are the eigenvalue square roots scaled by n_sigma; the angle
    orients the major axis.
    """
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    major, minor = n_sigma * np.sqrt(np.maximum(vals, 0.0))
    angle = float(np.arctan2(vecs[1, 0], vecs[0, 0]))
    return float(major), float(minor), angle


def plot_scene(observed, truth, predicted, covariances, path,
               title: str = "") -> None:
    """One figure per scene: history, ground truth, forecast, 2-sigma ellipses.

    observed: (A, T, 2); truth/predicted: (A, H, 2);
    covariances: (A, H, 2, 2) or None.
    """
    fig, ax = plt.subplots(figsize=(7, 6))
    colors = plt.cm.tab10(np.linspace(0, 1, max(observed.shape[0], 1)))
    for i in range(observed.shape[0]):
        c = colors[i % len(colors)]
        ax.plot(observed[i, :, 0], observed[i, :, 1], "-", color=c, alpha=0.5,
                label="observed" if i == 0 else None)
        ax.plot(truth[i, :, 0], truth[i, :, 1], "--", color=c,
                label="ground truth" if i == 0 else None)
        ax.plot(predicted[i, :, 0], predicted[i, :, 1], "-", color=c, lw=2,
                label="predicted" if i == 0 else None)
        if covariances is not None:
            for k in range(predicted.shape[1]):
                major, minor, angle = ellipse_parameters(covariances[i, k])
                ax.add_patch(Ellipse(predicted[i, k], 2 * major, 2 * minor,
                                     angle=np.degrees(angle), facecolor=c,
                                     alpha=0.08, edgecolor="none"))
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curve(log_rows, path) -> None:
    """Training loss and validation ADE per epoch on twin axes."""
    rows = np.array([[r[0], r[1], r[2]] for r in log_rows], dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(rows[:, 0], rows[:, 1], "-o", ms=3, color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    if np.isfinite(rows[:, 2]).any():
        ax2 = ax.twinx()
        ax2.plot(rows[:, 0], rows[:, 2], "-s", ms=3, color="tab:red",
                 label="validation ADE")
        ax2.set_ylabel("validation ADE [m]", color="tab:red")
        ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(rows, path) -> None:
    """Bar chart over the displacement metrics for each report row."""
    labels = [label for label, _ in rows]
    metrics = ("ade", "fde", "apde")
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(metrics))
    width = 0.8 / max(len(rows), 1)
    for i, (label, report) in enumerate(rows):
        values = [getattr(report, m) for m in metrics]
        ax.bar(x + i * width, values, width, label=label)
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels([m.upper() for m in metrics])
    ax.set_ylabel("meters")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
