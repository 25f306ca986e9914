"""Static SVG figures for evaluation and mapping reports.

Files are byte-stable across runs: the SVG hash salt is fixed and the date
metadata is dropped.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "tactile-map",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue()


def median_bars(medians: dict, title: str = "") -> str:
    """Grouped bars, ``medians[object][method] -> mm``."""
    with plt.rc_context(STYLE):
        objects = list(medians)
        methods = sorted({m for v in medians.values() for m in v}, key=_method_order)
        fig, ax = plt.subplots(figsize=(1.2 + 1.4 * len(objects), 3.0))
        width = 0.8 / max(len(methods), 1)
        x = np.arange(len(objects))
        for k, m in enumerate(methods):
            vals = [medians[o].get(m, np.nan) for o in objects]
            ax.bar(x + (k - (len(methods) - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x, objects)
        ax.set_ylabel("median RMSE (mm)")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, fontsize=7)
        return _svg(fig)


def error_histograms(errors: dict, bin_width: float = 5.0, value_range: float = 80.0, title: str = "") -> str:
    """Step histograms of per-trial errors, one line per method label."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        edges = np.arange(0.0, value_range + bin_width, bin_width)
        for label in sorted(errors, key=_method_order):
            e = np.minimum(np.asarray(errors[label], dtype=float), value_range)
            ax.hist(e, bins=edges, histtype="step", label=label)
        ax.set_xlabel("RMSE (mm)")
        ax.set_ylabel("trials")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, fontsize=7)
        return _svg(fig)


def fraction_curves(curves: dict, title: str = "") -> str:
    """Median error against map fraction; ``curves[label] = [(fraction, median), ...]``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for label in sorted(curves, key=_method_order):
            f, m = zip(*curves[label])
            ax.plot(np.array(f) * 100, m, marker="o", label=label)
        ax.set_xlabel("map size (% of entries)")
        ax.set_ylabel("median RMSE (mm)")
        ax.set_ylim(bottom=0)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, fontsize=7)
        return _svg(fig)


def cloud_views(points: np.ndarray, title: str = "", max_points: int = 20000) -> str:
    """Front and side scatter views of an object-frame cloud."""
    p = np.asarray(points)
    if len(p) > max_points:
        p = p[:: int(np.ceil(len(p) / max_points))]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.0, 4.0))
        for ax, (i, j), names in zip(axes, ((0, 2), (1, 2)), (("x", "z"), ("y", "z"))):
            ax.scatter(p[:, i], p[:, j], s=0.2, c=p[:, 1 - i if i < 2 else 0], cmap="viridis", rasterized=False, linewidths=0)
            ax.set_aspect("equal")
            ax.set_xlabel(f"{names[0]} (mm)")
            ax.set_ylabel(f"{names[1]} (mm)")
        if title:
            fig.suptitle(title)
        return _svg(fig)


def _method_order(label: str):
    order = {"RANDOM": 0, "CTI": 1}
    if label in order:
        return (order[label], 0)
    try:
        return (2, int(label.rsplit("-", 1)[1]))
    except (IndexError, ValueError):
        return (3, 0)
