"""Report figures, written as PNG next to the JSON/TSV they summarise.

Uses the object-oriented Figure API with the Agg canvas so nothing touches
pyplot's global state or needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

RC = dict(figsize=(5.0, 3.4), dpi=110)
# fixed metadata keeps the PNG bytes independent of matplotlib's version string
_META = {"Software": None}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    return path


def plot_cmc(curves: dict[str, list[float]], path: str | Path, max_rank: int = 20) -> Path:
    """CMC curves, one line per named report."""
    fig = Figure(**RC)
    ax = fig.add_subplot()
    for name, cmc in curves.items():
        cmc = np.asarray(cmc)[:max_rank]
        ax.plot(np.arange(1, len(cmc) + 1), cmc, marker=".", label=name)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_losses(history: list[dict], path: str | Path, smooth: int = 10) -> Path:
    """Per-step loss terms (moving average over ``smooth`` steps)."""
    fig = Figure(**RC)
    ax = fig.add_subplot()
    steps = np.array([r["step"] for r in history])
    for key in ("overall", "lm_nll", "id_loss", "triplet_loss"):
        vals = [r.get(key) for r in history]
        if any(v is None for v in vals) or not vals:
            continue
        y = np.asarray(vals, dtype=float)
        w = max(1, min(smooth, len(y) // 5))
        y = np.convolve(y, np.ones(w) / w, mode="valid")
        ax.plot(steps[w - 1:], y, label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ablation(rows: list[dict], path: str | Path) -> Path:
    """Grouped bars of mean mAP and Rank-1 with one-sd error bars."""
    fig = Figure(**RC)
    ax = fig.add_subplot()
    x = np.arange(len(rows))
    w = 0.38
    ax.bar(x - w / 2, [100 * r["map_mean"] for r in rows], w, yerr=[100 * r["map_sd"] for r in rows],
           capsize=3, label="mAP")
    ax.bar(x + w / 2, [100 * r["rank1_mean"] for r in rows], w, yerr=[100 * r["rank1_sd"] for r in rows],
           capsize=3, label="Rank-1")
    ax.set_xticks(x, [r["label"] for r in rows])
    ax.set_ylabel("%")
    ax.set_ylim(bottom=0)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_cross(rows: list[dict], path: str | Path) -> Path:
    """In-domain versus shifted-domain metrics."""
    fig = Figure(**RC)
    ax = fig.add_subplot()
    x = np.arange(len(rows))
    w = 0.38
    ax.bar(x - w / 2, [100 * r["map"] for r in rows], w, label="mAP")
    ax.bar(x + w / 2, [100 * r["rank1"] for r in rows], w, label="Rank-1")
    ax.set_xticks(x, [r["eval_on"] for r in rows])
    ax.set_ylabel("%")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)
