"""Point-drop attacks, score-driven subset hierarchies and efficiency accounting."""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .baselines import Lime3DConfig, PCSAMConfig, cppp_meanpool, lime3d, pcsam
from .bottleneck import dynamic_score_map, score_map
from .maps import ScoreMap, ascending_order, descending_order
from .pcmodel import PointClassifier

DEFAULT_BUDGETS = (4, 8, 16, 32, 64)
MODES = ("mcd", "lcd")
METHODS = ("infocons", "infocons-dyn", "cp", "cp++", "pcsam", "lime3d", "random")


@dataclass
class DropAttackReport:
    scorer: str
    mode: str
    budgets: list
    accuracy: list
    dataset_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ValueError(f"budgets must be strictly increasing, got {self.budgets}")
        if any(not 0 <= a <= 1 for a in self.accuracy):
            raise ValueError("accuracies must lie in [0, 1]")

    def at(self, budget):
        return self.accuracy[self.budgets.index(budget)]


def _scores_of(m):
    return m.scores if isinstance(m, ScoreMap) else np.asarray(m, dtype=np.float64)


def drop_attack(model, points, labels, maps, mode="mcd", budgets=DEFAULT_BUDGETS, scorer="", dataset_id="", seed=0):
    """Accuracy after removing the top-b (MCD) or bottom-b (LCD) scored points, per budget.

    Score ties are broken by point index, so only each map's ranking matters.
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    n = points.shape[1]
    budgets = [int(b) for b in budgets]
    if any(b < 0 or b >= n for b in budgets):
        raise ValueError(f"every budget must lie in [0, {n}), got {budgets}")
    if len(maps) != len(points):
        raise ValueError(f"{len(maps)} score maps for {len(points)} clouds")
    order = descending_order if mode == "mcd" else ascending_order
    ranked = np.stack([order(_scores_of(m)) for m in maps])
    acc = []
    for b in budgets:
        keep = np.sort(ranked[:, b:], axis=1)
        reduced = np.take_along_axis(points, keep[..., None], axis=1)
        acc.append(float((model.predict(reduced) == labels).mean()))
    return DropAttackReport(scorer, mode.upper(), budgets, acc, dataset_id, seed)


def cp_scores(model, pc):
    """Share of pooled channels each point wins, scaled so the top point scores 1."""
    counts = np.bincount(model.critical_indices(pc.points), minlength=pc.n).astype(np.float64)
    return ScoreMap(counts / counts.max(), method="cp")


def make_scorer(method, model, theta=None, seed=0, iters=20, drop_per_iter=10, lime_queries=100, alpha=1.0):
    """Callable ``(pc, index) -> ScoreMap``; ``index`` seeds the per-cloud randomness."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    if method.startswith("infocons") and theta is None:
        raise ValueError(f"method {method!r} needs a trained explainer")
    if method == "infocons":
        return lambda pc, i: score_map(theta, model, pc)
    if method == "infocons-dyn":
        return lambda pc, i: dynamic_score_map(theta, model, pc, iters, drop_per_iter)
    if method == "cp":
        return lambda pc, i: cp_scores(model, pc)
    if method == "cp++":
        return lambda pc, i: cppp_meanpool(model, pc)
    if method == "pcsam":
        cfg = PCSAMConfig(alpha, iters, drop_per_iter)
        return lambda pc, i: pcsam(model, pc, pc.label, cfg)
    if method == "lime3d":
        return lambda pc, i: lime3d(model, pc, Lime3DConfig(n_queries=lime_queries, seed=seed * 100003 + i))
    return lambda pc, i: ScoreMap(dc.make_rng(np.random.SeedSequence(seed, spawn_key=(i,))).random(pc.n),
                                  method="random")


def compute_maps(scorer, clouds):
    return [scorer(pc, i) for i, pc in enumerate(clouds)]


def subset_hierarchy(scores, k=4, max_iter=100, tol=1e-9):
    """Split points into ``k`` groups by 1-D K-Means on their scores, highest centroid first."""
    if k < 2:
        raise ValueError(f"subset_hierarchy needs k >= 2, got {k}")
    s = _scores_of(scores)
    distinct = np.unique(s).size
    if distinct < k:
        warnings.warn(f"only {distinct} distinct scores; reducing k from {k} to {distinct}", stacklevel=2)
        k = distinct
    centroids = np.unique(np.quantile(s, (np.arange(k) + 0.5) / k))
    for _ in range(max_iter):
        assign = np.argmin(np.abs(s[:, None] - centroids[None, :]), axis=1)
        new = np.array([s[assign == j].mean() if np.any(assign == j) else centroids[j] for j in range(len(centroids))])
        shift = np.max(np.abs(new - centroids))
        centroids = new
        if shift < tol:
            break
    assign = np.argmin(np.abs(s[:, None] - centroids[None, :]), axis=1)
    groups = [np.flatnonzero(assign == j) for j in np.argsort(-centroids, kind="stable")]
    return [g for g in groups if g.size]


def within_variance(scores, groups):
    s = _scores_of(scores)
    return float(sum(((s[g] - s[g].mean()) ** 2).sum() for g in groups) / s.size)


def score_variance(maps):
    """Mean over clouds of the per-cloud score variance."""
    return float(np.mean([np.var(_scores_of(m)) for m in maps]))


@dataclass
class EfficiencyReport:
    scorer: str
    forwards: int
    backwards: int
    ms_per_cloud: float
    params: int = 0
    per_cloud: list = field(default_factory=list, repr=False)


def efficiency_report(name, scorer, model, clouds, params=0):
    """Exact per-cloud forward/backward counts and median wall time per cloud.

    Raises if the counts differ between clouds, since then no single figure is exact.
    """
    counts, times = [], []
    for i, pc in enumerate(clouds):
        model.counter.reset()
        t0 = time.perf_counter()
        scorer(pc, i)
        times.append(time.perf_counter() - t0)
        counts.append((model.counter.forwards, model.counter.backwards))
    if len(set(counts)) != 1:
        raise RuntimeError(f"{name}: forward/backward counts vary across clouds: {sorted(set(counts))}")
    fwd, bwd = counts[0]
    return EfficiencyReport(name, fwd, bwd, 1000 * float(np.median(times)), params, counts)


def _fmt(x):
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_attack_reports(directory, reports, meta=None):
    """One CSV per curve plus ``attack_report.txt`` with key/value header and an aligned table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in reports:
        p = directory / f"attack_{r.scorer}_{r.mode.lower()}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["budget", "accuracy"])
            w.writerows([b, _fmt(a)] for b, a in zip(r.budgets, r.accuracy))
        paths.append(p)
    lines = [f"{k} = {v}" for k, v in (meta or {}).items()]
    if reports:
        budgets = reports[0].budgets
        head = ["scorer", "mode"] + [f"b={b}" for b in budgets]
        rows = [[r.scorer, r.mode] + [f"{a:.4f}" for a in r.accuracy] for r in reports]
        widths = [max(len(str(c)) for c in col) for col in zip(head, *rows)]
        lines.append("")
        for row in [head] + rows:
            lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
    txt = directory / "attack_report.txt"
    txt.write_text("\n".join(lines) + "\n")
    return paths + [txt]


def write_efficiency_csv(path, reports):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scorer", "forwards", "backwards", "params", "ms_per_cloud"])
        w.writerows([r.scorer, r.forwards, r.backwards, r.params, f"{r.ms_per_cloud:.3f}"] for r in reports)


def write_rows_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(c) for c in row] for row in rows])


def ensure_classifier(model):
    return model if isinstance(model, PointClassifier) else PointClassifier(model)
