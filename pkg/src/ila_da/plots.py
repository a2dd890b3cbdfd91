"""Optional figures from the text exports (needs matplotlib, and scikit-learn for t-SNE).

Run as ``python -m ila_da.plots tsne features.csv out.png`` or
``python -m ila_da.plots affinity grid_dir out.png``.
"""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Union

import numpy as np

from .report import GRID_KINDS, read_embeddings, read_grid


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_affinity_dir(grid_dir: Union[str, Path], out_png: Union[str, Path]) -> Path:
    """Side-by-side panels of every grid found in an affinity export directory."""
    plt = _pyplot()
    grid_dir = Path(grid_dir)
    panels = [(kind, read_grid(grid_dir / f"{kind}.txt")) for kind in GRID_KINDS
              if (grid_dir / f"{kind}.txt").is_file()]
    if not panels:
        raise FileNotFoundError(f"no affinity grids in {grid_dir}")
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
    for ax, (kind, (header, grid)) in zip(axes[0], panels):
        ax.imshow(grid, cmap="coolwarm", vmin=-1, vmax=1, interpolation="nearest")
        ax.set_title(kind.replace("_", " "), fontsize=9)
        ax.set_xlabel("target")
        ax.set_ylabel("source")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def project_2d(features: np.ndarray, seed: int = 0) -> np.ndarray:
    from sklearn.manifold import TSNE

    perplexity = float(min(30, max(2, (len(features) - 1) // 3)))
    return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(features)


def plot_tsne(csv_path: Union[str, Path], out_png: Union[str, Path], seed: int = 0) -> Path:
    """Scatter of a 2-D t-SNE projection, colored by class and marked by domain."""
    plt = _pyplot()
    domains, labels, feats = read_embeddings(csv_path)
    xy = project_2d(feats, seed)
    domains = np.asarray(domains)
    fig, ax = plt.subplots(figsize=(6, 6))
    for marker, tag in zip(("o", "x", "^", "s"), sorted(set(domains))):
        sel = domains == tag
        ax.scatter(xy[sel, 0], xy[sel, 1], c=labels[sel], cmap="tab10", vmin=0, vmax=9,
                   marker=marker, s=8, label=tag)
    ax.legend()
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 3 or argv[0] not in ("tsne", "affinity"):
        print("usage: python -m ila_da.plots {tsne CSV|affinity DIR} OUT.png", file=sys.stderr)
        return 2
    kind, src, out = argv
    (plot_tsne if kind == "tsne" else plot_affinity_dir)(src, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
