"""Figure output: label-map slices, log-likelihood traces and sweep summaries.

All figures are written straight to files through the Agg backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

# fixed 40-colour categorical palette, cycled by label id
PALETTE = np.vstack([plt.get_cmap("tab20").colors, plt.get_cmap("tab20b").colors])


def label_grid(labels: np.ndarray, vol) -> np.ndarray:
    """Label volume on the voxel grid; 0 where masked out."""
    rows = vol.row_index_grid()
    grid = np.zeros(rows.shape, dtype=int)
    grid[rows >= 0] = np.asarray(labels)[rows[rows >= 0]]
    return grid


def label_rgb(grid2d: np.ndarray) -> np.ndarray:
    rgb = np.zeros(grid2d.shape + (3,))
    inside = grid2d > 0
    rgb[inside] = PALETTE[(grid2d[inside] - 1) % len(PALETTE)]
    return rgb


def render_label_slices(labels, vol, out_dir, truth=None, prefix: str = "labels",
                        dpi: int = 100) -> list[Path]:
    """Write one PNG per axial slice; ``truth`` (boolean per row) is drawn as a
    white contour when given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = getattr(labels, "labels", labels)
    grid = label_grid(labels, vol)
    tgrid = None
    if truth is not None:
        tgrid = label_grid(np.asarray(truth, dtype=int), vol) > 0
    paths = []
    for z in range(grid.shape[2]):
        fig, ax = plt.subplots(figsize=(4, 4))
        # transpose so x runs left-right and y top-down
        ax.imshow(label_rgb(grid[:, :, z].T), interpolation="nearest")
        if tgrid is not None and tgrid[:, :, z].any():
            ax.contour(tgrid[:, :, z].T.astype(float), levels=[0.5], colors="white",
                       linewidths=1.2)
        ax.set_title(f"slice z={z}")
        ax.set_axis_off()
        path = out_dir / f"{prefix}_z{z:03d}.png"
        fig.savefig(path, dpi=dpi, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def plot_loglik_trace(trace, path, title: str = "EM log-likelihood") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(len(trace)), trace, marker=".", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("log-likelihood")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_sweep(rows: list[dict], path) -> Path:
    """Dice against lambda (per round with fixed K) and against K."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for rnd in sorted({r["round"] for r in rows}):
        sub = [r for r in rows if r["round"] == rnd]
        varied = sub[0]["varied"]
        ax = axes[0] if varied == "lambda" else axes[1]
        xs = [r["lambda"] if varied == "lambda" else r["K"] for r in sub]
        fixed = f"K={sub[0]['K']}" if varied == "lambda" else f"lambda={sub[0]['lambda']:g}"
        ax.plot(xs, [r["dice"] for r in sub], marker="o", label=f"round {rnd} ({fixed})")
    axes[0].set_xlabel("lambda")
    axes[0].set_xscale("log")
    axes[1].set_xlabel("K")
    for ax in axes:
        ax.set_ylabel("Dice")
        ax.set_ylim(0, 1.02)
        if ax.lines:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
