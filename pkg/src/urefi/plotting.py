"""Figures written next to the delimited report files."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no timestamps/version strings, so reruns produce identical files
_PNG_METADATA = {"Software": None}

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 10,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_afd_histogram(edges: Sequence[float], counts: Sequence[int], path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        widths = [hi - lo for lo, hi in zip(edges[:-1], edges[1:])]
        ax.bar(edges[:-1], counts, width=widths, align="edge", color="#4c72b0", edgecolor="white", linewidth=0.3)
        ax.set_xlabel("faulty distance")
        ax.set_ylabel("records")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_propagation(cells: Iterable[tuple[int, int, int]], grid: tuple[int, int], path, title: str = "") -> Path:
    """Space-time view of an expanded fault: one marker per ``(cycle, x, y)``.

    PEs are flattened row-major onto the vertical axis.
    """
    cells = sorted(cells)
    rows, cols = grid
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if cells:
            ts = [c[0] for c in cells]
            pes = [c[1] * cols + c[2] for c in cells]
            ax.scatter(ts, pes, marker="s", s=60, color="#c44e52")
        ax.set_xlabel("cycle")
        ax.set_ylabel("PE (row-major index)")
        ax.set_ylim(rows * cols - 0.5, -0.5)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
