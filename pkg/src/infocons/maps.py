"""The per-point score map shared by every attribution method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ScoreMap:
    """Scores in [0, 1], index-aligned with the explained cloud."""

    scores: np.ndarray
    method: str = ""
    iterations: int = 1
    dropped: list = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ValueError(f"scores must be 1-D, got shape {self.scores.shape}")
        if np.any(self.scores < 0) or np.any(self.scores > 1) or not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must lie in [0, 1]")

    def __len__(self):
        return self.scores.shape[0]

    def top(self, b):
        """Indices of the ``b`` highest scores, ties to the lower index."""
        return descending_order(self.scores)[:b]


def descending_order(scores):
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.size), -scores))


def ascending_order(scores):
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.size), scores))


def minmax(values, constant=0.5):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.full_like(values, constant)
    return (values - lo) / (hi - lo)


def rank_scores(n, drop_order, survivor_scores):
    """Fold an iterative drop sequence into one map.

    The j-th dropped point (0-based, in drop order) of ``M`` gets
    ``1 - 0.5 * j / M``, so earlier drops score higher and all drops lie in
    (0.5, 1].  Survivors keep their last computed score min-max rescaled into
    [0, 0.5] (0.25 when those scores are constant).
    """
    drop_order = np.asarray(drop_order, dtype=np.int64)
    m = drop_order.size
    out = np.empty(n, dtype=np.float64)
    survivors = np.setdiff1d(np.arange(n), drop_order)
    if survivors.size:
        out[survivors] = 0.5 * minmax(np.asarray(survivor_scores, dtype=np.float64)[survivors])
    if m:
        out[drop_order] = 1.0 - 0.5 * np.arange(m) / m
    return out
