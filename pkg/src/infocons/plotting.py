"""Static SVG figures: score-colored cloud projections and accuracy curves.

Colors come from a 256-step linear ramp from pure blue (score 0) to pure red
(score 1).  Files are byte-stable for fixed inputs: the SVG id salt is fixed
and no date is written.
"""

from __future__ import annotations

import matplotlib
import numpy as np
from matplotlib.colors import ListedColormap
from matplotlib.figure import Figure

RAMP = ListedColormap(np.column_stack([np.linspace(0, 1, 256), np.zeros(256), np.linspace(1, 0, 256)]), name="blue_red")
PROJECTIONS = (("x", "y", 0, 1), ("x", "z", 0, 2), ("y", "z", 1, 2))


def _save(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "infocons", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def ramp_color(score):
    """RGB of ``score`` on the 256-step ramp."""
    return RAMP(int(np.clip(np.floor(score * 256), 0, 255)))[:3]


def plot_score_map(points, scores, path, top=None, title=""):
    """Three orthographic projections colored by score; the ``top`` indices are circled."""
    points = np.asarray(points)
    scores = np.asarray(scores)
    fig = Figure(figsize=(9, 3.2))
    for k, (a, b, i, j) in enumerate(PROJECTIONS):
        ax = fig.add_subplot(1, 3, k + 1)
        ax.scatter(points[:, i], points[:, j], c=scores, cmap=RAMP, vmin=0, vmax=1, s=6, linewidths=0)
        if top is not None and len(top):
            ax.scatter(points[top, i], points[top, j], s=40, facecolors="none", edgecolors="black", linewidths=0.6)
        ax.set_xlabel(a)
        ax.set_ylabel(b)
        ax.set_aspect("equal")
        ax.set_xlim(-1.05, 1.05)
        ax.set_ylim(-1.05, 1.05)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_attack_curves(reports, path, title="Point-drop attack"):
    fig = Figure(figsize=(5, 3.6))
    ax = fig.add_subplot(1, 1, 1)
    for r in reports:
        style = "-" if r.mode == "MCD" else "--"
        ax.plot(r.budgets, r.accuracy, style, marker="o", ms=3, label=f"{r.scorer} {r.mode}")
    ax.set_xlabel("dropped points")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_series(x, y, path, xlabel, ylabel, logx=False, title=""):
    fig = Figure(figsize=(5, 3.6))
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(x, y, marker="o")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
