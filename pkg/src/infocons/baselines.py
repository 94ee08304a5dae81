"""Comparison attribution methods sharing the ScoreMap contract.

``cp_maxpool``      argmax points of the global max-pool (a set, not a map)
``cppp_meanpool``   channel mean of |z| at the tap layer
``pcsam``           iterative radial-gradient saliency
``lime3d``          ridge surrogate fitted on random point-drop queries
``random_scores``   i.i.d. uniform control
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .bottleneck import interpolate_scores
from .maps import ScoreMap, descending_order, minmax, rank_scores
from .pcmodel import tap_has_anchors


def cp_maxpool(model, pc):
    """Sorted distinct indices of the points that win at least one pooled channel."""
    return np.unique(model.critical_indices(pc.points))


def meanpool_scores(z):
    """Channel mean of |z| per point, min-max normalised (0.5 everywhere when constant)."""
    return minmax(np.abs(z).mean(axis=1))


def cppp_meanpool(model, pc, layer=None):
    layer = model.params.tap_layer if layer is None else layer
    z, ctx = model.features(pc.points, layer)
    s = meanpool_scores(z[0])
    if tap_has_anchors(model.params, layer):
        s = interpolate_scores(ctx.anchors()[0], s, pc.points)
    return ScoreMap(s, method="cp++")


@dataclass
class PCSAMConfig:
    alpha: float = 1.0
    iters: int = 20
    drop_per_iter: int = 10

    def __post_init__(self):
        if self.alpha < 0 or self.iters < 1 or self.drop_per_iter < 1:
            raise ValueError("PCSAM needs alpha >= 0 and positive iters and drop_per_iter")


def radial_scores(points, grad, center, alpha=1.0):
    """``-dL/dr * r**(1 + alpha)`` with ``dL/dr`` the gradient's projection on the radial unit vector.

    Points sitting exactly on the center have no radial direction and score 0.
    """
    offset = np.asarray(points, dtype=np.float64) - center
    r = np.sqrt((offset**2).sum(axis=1))
    out = np.zeros(len(r))
    ok = r > 0
    dl_dr = (np.asarray(grad)[ok] * offset[ok]).sum(axis=1) / r[ok]
    out[ok] = -dl_dr * r[ok] ** (1 + alpha)
    return out


def pcsam(model, pc, label, config=None):
    """Iterative point-shifting saliency: each round scores the survivors and drops the top ones.

    ``model`` only needs ``loss_and_input_grad(points, labels)``.
    """
    config = config or PCSAMConfig()
    if config.iters * config.drop_per_iter >= pc.n:
        raise ValueError(f"PCSAM would drop {config.iters * config.drop_per_iter} of {pc.n} points")
    alive = np.arange(pc.n)
    last = np.zeros(pc.n)
    dropped = []
    for _ in range(config.iters):
        pts = pc.points[alive]
        _, grad = model.loss_and_input_grad(pts, label)
        s = radial_scores(pts, grad[0], np.median(pts, axis=0), config.alpha)
        last[alive] = s
        top = alive[descending_order(s)[:config.drop_per_iter]]
        dropped.extend(top.tolist())
        alive = np.setdiff1d(alive, top, assume_unique=True)
    scores = rank_scores(pc.n, np.array(dropped), last)
    return ScoreMap(scores, method="pcsam", iterations=config.iters, dropped=np.array(dropped))


@dataclass
class Lime3DConfig:
    n_queries: int = 100
    drop_prob: float = 0.2
    ridge: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 10:
            raise ValueError(f"LIME3D needs at least 10 queries, got {self.n_queries}")
        if not 0 < self.drop_prob < 1 or self.ridge < 0:
            raise ValueError("drop_prob must lie in (0, 1) and ridge must be >= 0")


def lime_masks(n, config, rng):
    """Query masks; row 0 keeps every point, rows with nothing kept are redrawn."""
    masks = np.ones((config.n_queries, n), dtype=bool)
    for q in range(1, config.n_queries):
        while True:
            row = rng.random(n) >= config.drop_prob
            if row.any():
                masks[q] = row
                break
    return masks


def ridge_coefficients(X, y, lam):
    """Slopes of ``y ~ X`` with an unpenalised intercept."""
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    gram = Xc.T @ Xc
    eye = np.eye(gram.shape[0])
    for attempt in range(2):
        try:
            if np.linalg.cond(gram + lam * eye) > 1e14:
                raise np.linalg.LinAlgError("ill-conditioned normal equations")
            return np.linalg.solve(gram + lam * eye, Xc.T @ yc)
        except np.linalg.LinAlgError:
            if attempt:
                raise
            lam = max(lam, 1e-8) * 1e3


def lime3d(model, pc, config=None):
    """Surrogate-model scores from ``n_queries`` model calls.

    The first query is the intact cloud; its argmax class is the one tracked
    across every perturbed query.
    """
    config = config or Lime3DConfig()
    rng = dc.make_rng(config.seed)
    masks = lime_masks(pc.n, config, rng)
    probs = np.empty(config.n_queries)
    target = None
    for q, keep in enumerate(masks):
        p = model.predict_proba(pc.points[keep])[0]
        if target is None:
            target = int(np.argmax(p))
        probs[q] = p[target]
    coef = ridge_coefficients(masks.astype(np.float64), probs, config.ridge)
    return ScoreMap(minmax(coef), method=f"lime3d({config.n_queries})")


def random_scores(pc, rng):
    return ScoreMap(rng.random(pc.n), method="random")
