"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

# deterministic PNG bytes across runs
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    return Path(path)


def f1_heatmap(table, gamma: float, path, best=None) -> Path:
    """F1 over (alpha, beta) at one gamma slice of a sweep table."""
    sel = np.isclose(table.gamma, gamma)
    alphas = np.unique(table.alpha[sel])
    betas = np.unique(table.beta[sel])
    grid = np.full((len(betas), len(alphas)), np.nan)
    ai = np.searchsorted(alphas, table.alpha[sel])
    bi = np.searchsorted(betas, table.beta[sel])
    grid[bi, ai] = table.f1[sel]
    fig = Figure(figsize=(5.5, 4.5))
    ax = fig.add_subplot()
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis",
                   extent=[alphas[0], alphas[-1], betas[0], betas[-1]])
    fig.colorbar(im, ax=ax, label="F1")
    if best is not None:
        ax.plot(best["alpha"], best["beta"], "r+", ms=12, mew=2)
    ax.set_xlabel("alpha (penalty threshold)")
    ax.set_ylabel("beta (incentive threshold)")
    ax.set_title(f"F1 at gamma = {gamma:g}")
    return _save(fig, path)


def baseline_curve(btable, path) -> Path:
    """Precision, recall and F1 of the threshold-only rule."""
    fig = Figure(figsize=(5.5, 4))
    ax = fig.add_subplot()
    ax.plot(btable.threshold, btable.precision, label="precision")
    ax.plot(btable.threshold, btable.recall, label="recall")
    ax.plot(btable.threshold, btable.f1, label="F1", lw=2)
    k = btable.best_f1()
    ax.axvline(btable.threshold[k], color="grey", ls=":")
    ax.set_xlabel("recommendation threshold")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)


def frontier(rows: list[dict], path) -> Path:
    """Recall at matched precision, baseline vs clustered rule."""
    rows = [r for r in rows if r.get("proposed_recall") is not None]
    fig = Figure(figsize=(5.5, 4))
    ax = fig.add_subplot()
    if rows:
        p = [r["precision"] for r in rows]
        ax.plot(p, [r["baseline_recall"] for r in rows], "o-", label="baseline")
        ax.plot(p, [r["proposed_recall"] for r in rows], "s-", label="clustered")
    ax.set_xlabel("precision")
    ax.set_ylabel("max recall")
    ax.legend(frameon=False)
    return _save(fig, path)


def validity_bars(validity: dict, path) -> Path:
    """Per-cluster intra distance against mean inter-cluster distance."""
    cl = [c for c in validity["clusters"] if not c["empty"]]
    x = np.arange(len(cl))
    fig = Figure(figsize=(6, 3.5))
    ax = fig.add_subplot()
    ax.bar(x - 0.2, [c["intra"] for c in cl], 0.4, label="intra")
    ax.bar(x + 0.2, [c["mean_inter"] or 0.0 for c in cl], 0.4, label="inter (mean)")
    ax.set_xticks(x, [str(c["cluster"]) for c in cl])
    ax.set_xlabel("cluster")
    ax.set_ylabel("shifted-PCC distance")
    ax.legend(frameon=False)
    return _save(fig, path)
