"""Matplotlib helpers shared by the report-producing paths.

SVG output is kept byte-reproducible: the backend's hash salt is pinned
and the embedded creation date is suppressed, so rendering the same data
twice yields identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

HASH_SALT = "convkit"

_KIND_COLORS = {
    "conv": "#1f77b4",
    "fc": "#ff7f0e",
    "pool": "#2ca02c",
    "neuron": "#d62728",
    "other": "#7f7f7f",
}


def kind_color(kind):
    return _KIND_COLORS.get(kind, "#7f7f7f")


def new_figure(figsize=(6.4, 4.8)):
    fig, ax = plt.subplots(figsize=figsize)
    return fig, ax


def group_colors(n):
    """Deterministic distinct colors for n groups."""
    if n <= 10:
        cmap = plt.get_cmap("tab10")
        return [cmap(i) for i in range(n)]
    if n <= 20:
        cmap = plt.get_cmap("tab20")
        return [cmap(i) for i in range(n)]
    cmap = plt.get_cmap("hsv")
    return [cmap(i / n) for i in range(n)]


def save_figure(fig, path):
    """Write the figure and release it; SVG output is byte-reproducible."""
    path = str(path)
    with plt.rc_context({"svg.hashsalt": HASH_SALT}):
        if path.endswith(".svg"):
            fig.savefig(path, metadata={"Date": None})
        else:
            fig.savefig(path)
    plt.close(fig)


def render_curve(sizes, scores, path, title=None, ylabel="mean per-class accuracy",
                 baseline=None, baseline_label="baseline"):
    """Learning curve: mean accuracy with a std band versus training size."""
    sizes = np.asarray(sizes)
    scores = np.asarray(scores)
    mean = scores.mean(axis=1)
    std = scores.std(axis=1)
    fig, ax = new_figure()
    ax.errorbar(sizes, mean, yerr=std, marker="o", capsize=3)
    if baseline is not None:
        ax.axhline(baseline, linestyle="--", color="#7f7f7f",
                   label=baseline_label)
        ax.legend(loc="lower right")
    ax.set_xlabel("training samples per class")
    ax.set_ylabel(ylabel)
    ax.set_xticks(sizes)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    save_figure(fig, path)
