"""Deterministic matplotlib figures (no timestamps in PNG/SVG metadata)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None}}


def _save(fig, path: Path) -> None:
    fmt = path.suffix.lstrip(".")
    fig.savefig(path, dpi=100, metadata=_META.get(fmt))
    plt.close(fig)


def tradeoff_plot(privacy: Sequence[float], utility: Sequence[float], labels: Sequence[str], path: Path) -> None:
    """Utility (mean MCC) against privacy leakage (face similarity)."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(privacy, utility, "o-")
    for x, y, lab in zip(privacy, utility, labels):
        ax.annotate(lab, (x, y), textcoords="offset points", xytext=(4, 4), fontsize=7)
    ax.set_xlabel("face similarity (lower = more private)")
    ax.set_ylabel("mean MCC")
    fig.tight_layout()
    _save(fig, path)


def projection_plot(coords: np.ndarray, attributes: np.ndarray, path: Path, title: str = "",
                    pair: tuple[int, int] = (0, 1)) -> None:
    """2-D feature projection coloured by the four combinations of two binary attributes."""
    a, b = pair
    colors = ["tab:blue", "tab:green", "tab:red", "tab:cyan"]
    fig, ax = plt.subplots(figsize=(4, 4))
    b_col = attributes[:, b] if attributes.shape[1] > b else np.zeros(len(attributes), dtype=int)
    code = attributes[:, a].astype(int) * 2 + b_col.astype(int)
    for v in range(4):
        m = code == v
        if m.any():
            ax.scatter(coords[m, 0], coords[m, 1], s=6, c=colors[v],
                       label=f"attr{a}{'+' if v >= 2 else '-'} attr{b}{'+' if v % 2 else '-'}")
    ax.legend(fontsize=6, loc="best")
    ax.set_title(title, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
