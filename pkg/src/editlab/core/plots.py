"""SVG figures for key projections and concentration profiles."""

import io
from typing import Dict, Mapping, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams.update(
    {
        "font.family": "DejaVu Sans",
        "axes.unicode_minus": False,
        "svg.hashsalt": "editlab",
        "svg.fonttype": "none",
    }
)
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (5.0, 3.8)


def _to_svg(fig) -> str:
    buffer = io.StringIO()
    # No date stamp, so reruns produce identical files.
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buffer.getvalue()


def scatter_svg(populations: Mapping[str, Sequence[Sequence[float]]], title: str) -> str:
    """One colored point set per population on shared 2-D axes."""
    fig, ax = plt.subplots(figsize=FIGSIZE, constrained_layout=True)
    for name, coords in populations.items():
        if len(coords) == 0:
            continue
        xs = [float(p[0]) for p in coords]
        ys = [float(p[1]) for p in coords]
        ax.scatter(xs, ys, s=14, alpha=0.7, label=name)
    ax.set_title(title)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.grid(True, alpha=0.3)
    if populations:
        ax.legend(loc="best", fontsize=8)
    return _to_svg(fig)


def line_svg(series: Dict[str, Sequence[Tuple[float, float]]], title: str, x_label: str, y_label: str) -> str:
    """Polylines with point markers, one per series."""
    fig, ax = plt.subplots(figsize=FIGSIZE, constrained_layout=True)
    for name, points in series.items():
        if not points:
            continue
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=name)
    ax.set_title(title)
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend(loc="best", fontsize=8)
    return _to_svg(fig)
