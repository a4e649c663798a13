"""Figures for training logs, generated samples and the subinterval diagnostic."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "font.size": 9,
    "lines.linewidth": 1.0,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}
# dropping the version stamp keeps PNG bytes stable across reruns
PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def plot_training_log(rows, path) -> None:
    """Loss curves and, when present, the oracle score MSE and accuracy."""
    it = np.array([r["iter"] for r in rows])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.0))
        axes[0].plot(it, [r["loss_gen"] for r in rows], label="generative")
        axes[0].plot(it, [r["loss_cls"] for r in rows], label="classification")
        axes[0].set_xlabel("iteration")
        axes[0].set_ylabel("loss")
        axes[0].legend()
        mse = [r.get("score_mse_vs_oracle") for r in rows]
        if any(v is not None for v in mse):
            axes[1].plot(it, [np.nan if v is None else v for v in mse], color="C2", label="score MSE")
            axes[1].set_yscale("log")
            axes[1].set_ylabel("score MSE vs oracle")
        acc = [r.get("cls_acc") for r in rows]
        if any(v is not None for v in acc):
            twin = axes[1].twinx()
            twin.plot(it, [np.nan if v is None else v for v in acc], color="C3", label="accuracy")
            twin.set_ylabel("accuracy")
        axes[1].set_xlabel("iteration")
        _save(fig, path)


def plot_samples(batches, path, reference=None) -> None:
    """Scatter of generated points per class (first two coordinates)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if reference is not None:
            ax.scatter(reference[:, 0], reference[:, 1 if reference.shape[1] > 1 else 0],
                       s=2, c="0.8", label="data")
        for b in batches:
            pts = np.asarray(b.points)
            ys = pts[:, 1] if pts.shape[1] > 1 else np.zeros(len(pts))
            ax.scatter(pts[:, 0], ys, s=3, label=f"class {b.y}")
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend(markerscale=3)
        _save(fig, path)


def plot_err_violin(err_by_class, path) -> None:
    """Violin plot of per-sample Err values for each class."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        data = [np.asarray(e, dtype=float) for e in err_by_class]
        keep = [i for i, e in enumerate(data) if len(e) > 1]
        if keep:
            ax.violinplot([data[i] for i in keep], positions=keep, showmedians=True)
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks(range(len(data)))
        ax.set_xlabel("class")
        ax.set_ylabel("Err")
        _save(fig, path)
