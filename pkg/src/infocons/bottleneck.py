"""Attention bottleneck explainer trained with a consistency-constrained IB loss.

The explainer reads tap-layer features ``z`` of a frozen classifier and
predicts a soft mask ``m`` of the same shape.  Two objectives are offered:

``infocons``
    masked entries are replaced by Gaussian noise drawn from the feature prior,
    and the information term is the closed-form KL between the perturbed
    feature distribution and that prior.
``selective-cp``
    features are multiplied by the mask (no noise) and every mask entry is
    regularised towards a uniform relaxed-Bernoulli prior.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, parse_floats, save_checkpoint
from .maps import ScoreMap, descending_order, rank_scores
from .optim import make_optimizer
from .pcmodel import SIGMA_FLOOR, Counter, PointClassifier, _check_tap, feature_prior, tap_has_anchors

log = logging.getLogger(__name__)

OBJECTIVES = ("infocons", "selective-cp")
_ARRAY_NAMES = ("W_q", "W_v", "W_1", "b_1", "W_2", "b_2")


@dataclass
class BottleneckParams:
    W_q: np.ndarray  # (D, D_r)
    W_v: np.ndarray  # (D, D)
    W_1: np.ndarray  # (D_r, D_r)
    b_1: np.ndarray
    W_2: np.ndarray  # (D_r, D)
    b_2: np.ndarray
    beta: float = 1e-3
    tau: float = 0.7
    k: int = 32
    objective: str = "infocons"
    tap_layer: int = 3
    seed: int = 0
    prior_mu: np.ndarray | None = None
    prior_sigma: np.ndarray | None = None
    counter: Counter = field(default_factory=Counter, compare=False, repr=False)

    @property
    def d(self):
        return self.W_q.shape[0]

    @property
    def d_r(self):
        return self.W_q.shape[1]

    def arrays(self):
        return [getattr(self, n) for n in _ARRAY_NAMES]


def init_bottleneck(d, d_r=64, seed=0, mask_bias=0.0, **hyper):
    """Random attention weights and a zero expansion layer.

    The initial mask is ``sigmoid(mask_bias)`` everywhere.
    """
    if d_r < 1 or d < 1:
        raise ValueError(f"bottleneck dims must be positive, got D={d}, D_r={d_r}")
    rng = dc.make_rng(seed)
    return BottleneckParams(
        W_q=rng.standard_normal((d, d_r)) / d,
        W_v=rng.standard_normal((d, d)) * np.sqrt(1.0 / d),
        W_1=rng.standard_normal((d_r, d_r)) * np.sqrt(2.0 / d_r),
        b_1=np.zeros(d_r),
        W_2=np.zeros((d_r, d)),
        b_2=np.full(d, float(mask_bias)),
        seed=seed,
        **hyper,
    )


def attention_bottleneck(theta, z, weights=None):
    """Mask ``(B, N', D)`` in (0, 1) from features ``z`` ``(B, N', D)``.

    Queries are per-point projections to ``D_r`` rows; each row attends over the
    ``D`` feature channels, then reads the ELU-projected values back out per
    point, and a small MLP expands ``D_r`` to ``D`` before the sigmoid.
    """
    z = z if isinstance(z, dc.Value) else dc.constant(z)
    if z.data.ndim != 3 or z.shape[-1] != theta.d:
        raise ValueError(f"attention_bottleneck: expected (B, N', {theta.d}) features, got {z.shape}")
    W_q, W_v, W_1, b_1, W_2, b_2 = weights or [dc.constant(a) for a in theta.arrays()]
    q = dc.matmul(z, W_q)                                  # (B, N', D_r)
    v = dc.elu(dc.matmul(z, W_v))                          # (B, N', D)
    att = dc.matmul(dc.transpose(q, (0, 2, 1)), z)         # (B, D_r, D)
    att = dc.softmax(dc.scale(att, 1.0 / np.sqrt(theta.d)), axis=-1)
    read = dc.matmul(att, dc.transpose(v, (0, 2, 1)))      # (B, D_r, N')
    h = dc.elu(dc.affine(dc.transpose(read, (0, 2, 1)), W_1, b_1))
    # keep the mask in the open interval even where float64 sigmoid saturates
    return _clip_open(dc.sigmoid(dc.affine(h, W_2, b_2)), eps=2.0**-53)


def _labels(labels, n):
    return np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))


def infocons_loss(theta, z, labels, head, mu, sigma, rng, weights=None, mask=None):
    """Returns ``(total, ce, info, mask)`` as diffcore values.

    ``head`` maps perturbed features to logits.  ``mask`` overrides the
    bottleneck output; used to probe the loss at fixed masks.
    """
    z = dc.constant(z)
    if mask is None:
        m = _clip_open(attention_bottleneck(theta, z, weights), lo=0.0)
    else:
        m = dc.constant(np.broadcast_to(mask, z.shape))
    keep = dc.sub(1.0, m)
    eps = mu + sigma * rng.standard_normal(z.shape)
    zhat = dc.add(dc.mul(m, z), dc.mul(dc.stop_gradient(keep), eps))
    ce = dc.cross_entropy(head(zhat), _labels(labels, z.shape[0]))
    mu_p = dc.add(dc.mul(m, z), dc.mul(keep, mu))
    info = dc.gaussian_kl(mu_p, dc.mul(keep, sigma), mu, sigma)
    return dc.add(ce, dc.scale(info, theta.beta)), ce, info, m


def selective_cp_loss(theta, z, labels, head, rng, weights=None, mask=None):
    """Multiplicative masking with a relaxed-Bernoulli uniform prior on every mask entry."""
    z = dc.constant(z)
    m = attention_bottleneck(theta, z, weights) if mask is None else dc.constant(np.broadcast_to(mask, z.shape))
    ce = dc.cross_entropy(head(dc.mul(m, z)), _labels(labels, z.shape[0]))
    info = dc.mean_reduce(dc.relaxed_bernoulli_kl_uniform(_clip_open(m), theta.tau, theta.k, rng))
    return dc.add(ce, dc.scale(info, theta.beta)), ce, info, m


def _clip_open(m, eps=1e-6, lo=None):
    # a float64 sigmoid can round to exactly 0 or 1; the info terms diverge there
    data = np.clip(m.data, eps if lo is None else lo, 1 - eps)
    if np.array_equal(data, m.data):
        return m
    return dc.add(m, dc.constant(data - m.data))


def batch_prior(z):
    """Per-channel mean and floored std of features pooled over batch and points."""
    flat = z.reshape(-1, z.shape[-1])
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), SIGMA_FLOOR)


@dataclass
class ExplainerConfig:
    beta: float = 1e-3
    d_r: int = 64
    tau: float = 0.7
    k: int = 32
    objective: str = "infocons"
    tap_layer: int | None = None
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    clouds_per_epoch: int | None = None
    # start near the identity mask: the stop-gradient surrogate is only
    # informative while the injected noise is small
    mask_bias: float = 3.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.beta < 0 or self.epochs < 1 or self.batch_size < 1 or self.d_r < 1:
            raise ValueError("beta must be >= 0; epochs, batch_size and d_r must be positive")


class ExplainerDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


def _snapshot(theta):
    return BottleneckParams(*[a.copy() for a in theta.arrays()], beta=theta.beta, tau=theta.tau, k=theta.k,
                            objective=theta.objective, tap_layer=theta.tap_layer, seed=theta.seed,
                            prior_mu=theta.prior_mu, prior_sigma=theta.prior_sigma)


def train_explainer(model, dataset, config=None, log_fn=None):
    """Fit a bottleneck on a frozen classifier; returns ``(theta, history)``.

    When ``clouds_per_epoch`` is set, each epoch visits a fresh random subset
    of that many training clouds instead of the whole split.
    """
    config = config or ExplainerConfig()
    model = model if isinstance(model, PointClassifier) else PointClassifier(model)
    layer = model.params.tap_layer if config.tap_layer is None else config.tap_layer
    _check_tap(model.params, layer)
    theta = init_bottleneck(model.params.layer_dim(layer), config.d_r, config.seed, config.mask_bias, beta=config.beta,
                            tau=config.tau, k=config.k, objective=config.objective, tap_layer=layer)
    rng = dc.make_rng(config.seed)
    weights = [dc.param(a) for a in theta.arrays()]
    opt = make_optimizer("adam", theta.arrays(), config.lr)
    points, labels = dataset.train_points, dataset.train_labels
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(points))
        if config.clouds_per_epoch is not None:
            order = order[:config.clouds_per_epoch]
        sums = np.zeros(3)
        batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            z, ctx = model.features(points[idx], layer)
            head = lambda zhat, ctx=ctx: model.head_from(layer, zhat, ctx)  # noqa: E731
            if theta.objective == "infocons":
                mu, sigma = batch_prior(z)
                total, ce, info, _ = infocons_loss(theta, z, labels[idx], head, mu, sigma, rng, weights)
            else:
                total, ce, info, _ = selective_cp_loss(theta, z, labels[idx], head, rng, weights)
            if not np.isfinite(total.data):
                raise ExplainerDiverged(f"non-finite explainer loss at epoch {epoch + 1}", _snapshot(theta))
            grads = dc.backward(total)
            opt.step([grads[w] for w in weights])
            sums += (float(total.data), float(ce.data), float(info.data))
            batches += 1
        loss, ce, info = sums / max(batches, 1)
        row = {"epoch": epoch + 1, "loss": loss, "ce": ce, "info": info, "seconds": time.perf_counter() - t0}
        history.append(row)
        (log_fn or log.info)(f"explainer epoch {epoch + 1}/{config.epochs} loss={loss:.4f} ce={ce:.4f} info={info:.4f}")
    theta.prior_mu, theta.prior_sigma = feature_prior(model.params, points, layer)
    return theta, history


def interpolate_scores(anchors, anchor_scores, targets, k=3):
    """Inverse-distance weighted mean over the ``k`` nearest anchors of every target.

    A target that coincides with an anchor takes that anchor's score exactly.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    anchor_scores = np.asarray(anchor_scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(anchors) < k:
        warnings.warn(f"only {len(anchors)} anchors for {k}-NN interpolation; using all of them", stacklevel=2)
        k = len(anchors)
    d = np.sqrt(((targets[:, None, :] - anchors[None, :, :]) ** 2).sum(-1))
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    dist = np.take_along_axis(d, nn, axis=1)
    w = 1.0 / np.maximum(dist, 1e-300)
    out = (w * anchor_scores[nn]).sum(1) / w.sum(1)
    exact = dist[:, 0] == 0
    out[exact] = anchor_scores[nn[exact, 0]]
    return out


def _scores(theta, model, points):
    z, ctx = model.features(points, theta.tap_layer)
    m = attention_bottleneck(theta, z)
    theta.counter.add(forwards=1)
    s = m.data[0].mean(axis=1)
    if tap_has_anchors(model.params, theta.tap_layer):
        s = interpolate_scores(ctx.anchors()[0], s, points)
    return np.clip(s, 0.0, 1.0)


def score_map(theta, model, pc):
    """One-shot importance map: a single classifier pass plus a single bottleneck pass."""
    model = model if isinstance(model, PointClassifier) else PointClassifier(model)
    return ScoreMap(_scores(theta, model, pc.points), method="infocons")


def dynamic_score_map(theta, model, pc, iters=20, drop_per_iter=10):
    """Re-explain the surviving cloud ``iters`` times, dropping its top points each round."""
    model = model if isinstance(model, PointClassifier) else PointClassifier(model)
    if iters * drop_per_iter >= pc.n:
        raise ValueError(f"dynamic map would drop {iters * drop_per_iter} of {pc.n} points")
    alive = np.arange(pc.n)
    last = np.zeros(pc.n)
    dropped = []
    for _ in range(iters):
        s = _scores(theta, model, pc.points[alive])
        last[alive] = s
        top = alive[descending_order(s)[:drop_per_iter]]
        dropped.extend(top.tolist())
        alive = np.setdiff1d(alive, top, assume_unique=True)
    scores = rank_scores(pc.n, np.array(dropped), last)
    return ScoreMap(scores, method="infocons-dyn", iterations=iters, dropped=np.array(dropped))


def save_explainer(path, theta, extra=None):
    meta = {
        "kind": "explainer", "beta": theta.beta, "tau": theta.tau, "k": theta.k, "objective": theta.objective,
        "tap_layer": theta.tap_layer, "seed": theta.seed, "d": theta.d, "d_r": theta.d_r,
    }
    if theta.prior_mu is not None:
        meta["prior_mu"] = list(theta.prior_mu)
        meta["prior_sigma"] = list(theta.prior_sigma)
    meta.update(extra or {})
    save_checkpoint(path, dict(zip(_ARRAY_NAMES, theta.arrays())), meta)


def load_explainer(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "explainer":
        raise ValueError(f"{path}: not an explainer checkpoint (kind={meta.get('kind')!r})")
    missing = [n for n in _ARRAY_NAMES if n not in arrays]
    if missing:
        raise ValueError(f"{path}: missing arrays {missing}")
    return BottleneckParams(
        *[arrays[n] for n in _ARRAY_NAMES], beta=float(meta["beta"]), tau=float(meta["tau"]), k=int(meta["k"]),
        objective=meta["objective"], tap_layer=int(meta["tap_layer"]), seed=int(meta["seed"]),
        prior_mu=parse_floats(meta.get("prior_mu", "")), prior_sigma=parse_floats(meta.get("prior_sigma", "")),
    )
