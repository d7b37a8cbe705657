"""Static PNG figures for training histories and GA results."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _series(history: Sequence[dict], key: str):
    xs, ys = [], []
    for row in history:
        v = row.get(key)
        if v is not None and v != "":
            xs.append(int(row["epoch"]))
            ys.append(float(v))
    return xs, ys


def plot_accuracy(history: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("overall", "many", "medium", "few"):
        xs, ys = _series(history, key)
        if xs:
            ax.plot(xs, [100 * y for y in ys], label=key, lw=2 if key == "overall" else 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.grid(alpha=0.3)
    if history:
        ax.legend()
    return _save(fig, path)


def plot_losses(history: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("scl", "ldam", "cesc", "mv", "total"):
        xs, ys = _series(history, key)
        if xs and any(y > 0 for y in ys):
            ax.plot(xs, ys, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.grid(alpha=0.3)
    if ax.lines:
        ax.legend()
    return _save(fig, path)


def plot_ga_top(rows: Sequence[tuple[float, float, float]], path: str | Path) -> Path:
    """Bar chart of the best (alpha, lambda) combinations by fitness."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [f"({a:.2f}, {l:.2f})" for a, l, _ in rows]
    ax.bar(range(len(rows)), [f for _, _, f in rows])
    ax.set_xticks(range(len(rows)), labels, rotation=45, ha="right", fontsize=8)
    ax.set_xlabel("(alpha, lambda)")
    ax.set_ylabel("fitness")
    return _save(fig, path)
