"""Optional figures for ``report``; matplotlib is imported only when a figure is drawn."""
from __future__ import annotations

from pathlib import Path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def best_value_figure(series: dict, path, ylabel="best f~"):
    """``series`` maps run name to ``(work, best_value)`` sequences; one step curve per run."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, (work, best) in series.items():
        ax.step(work, best, where="post", label=name)
    ax.set_xscale("symlog")
    ax.set_yscale("log")
    ax.set_xlabel("cumulative lower-level iterations")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def sweep_figure(rows, path):
    plt = _pyplot()
    sig = [r[0] for r in rows]
    alpha = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(sig, alpha, "o-")
    ax.set_xlabel("sigma")
    ax.set_ylabel("learned alpha")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
