"""Static PNG emission: intensity-density overlays and pairwise-metric heatmaps."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def density_overlay(groups_pre: dict, groups_post: dict | None, path) -> None:
    """Mean voxel-intensity distributions per scanner, before/after harmonization."""
    n_panels = 2 if groups_post else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(6 * n_panels, 4), squeeze=False)
    panels = [("before", groups_pre)] + ([("after", groups_post)] if groups_post else [])
    for ax, (title, groups) in zip(axes[0], panels):
        for name in sorted(groups):
            dist = groups[name]
            ax.plot(dist.centers, dist.probabilities, label=name, linewidth=1.2)
        ax.set_title(f"Mean voxel intensity distributions ({title})")
        ax.set_xlabel("intensity")
        ax.set_ylabel("probability")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def pairwise_heatmap(matrix, names, path, title: str) -> None:
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(names), 1.0 + 0.6 * len(names)))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{matrix[i, j]:.3f}", ha="center", va="center", fontsize=6, color="white")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
