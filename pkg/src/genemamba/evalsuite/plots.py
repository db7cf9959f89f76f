"""Optional PNG rendering of evaluation tables (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    # drop the version stamp so renders are byte-identical across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def plot_histograms(path, table) -> Path:
    header, rows = table
    plt = _pyplot()
    arr = np.array(rows, dtype=float)
    centers = (arr[:, 0] + arr[:, 1]) / 2
    width = arr[0, 1] - arr[0, 0]
    kinds = sorted({h.rsplit("_", 1)[0] for h in header[2:]})
    fig, axes = plt.subplots(1, len(kinds), figsize=(5 * len(kinds), 3.5), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        for label in ("pos", "neg"):
            col = header.index(f"{kind}_{label}")
            ax.bar(centers, arr[:, col], width=width, alpha=0.5, label=label)
        ax.set_xlabel(f"{kind} similarity")
        ax.set_ylabel("fraction of pairs")
        ax.legend()
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_rank_density(path, table) -> Path:
    _, rows = table
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    if arr.size:
        top = int(arr.max())
        ax.hist2d(arr[:, 0], arr[:, 1], bins=min(top, 50), cmap="viridis")
    ax.set_xlabel("input rank")
    ax.set_ylabel("output rank")
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_venn_bars(path, table) -> Path:
    header, rows = table
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(header, rows[0], color=["tab:blue", "tab:purple", "tab:red"])
    ax.set_ylabel("genes")
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


RENDERERS = {"hist": plot_histograms, "ranks": plot_rank_density, "venn": plot_venn_bars}
