"""Toy point-cloud classifiers split into a per-point encoder and a pooled head.

Two variants share one parameter layout:

``pointnet-lite``
    per-point affine+ELU layers 3 -> 64 -> 128 -> 256, max-pool over points,
    head 256 -> 64 -> classes.
``hier-lite``
    the same first two per-point layers, then farthest-point sampling to 64
    anchors, max-grouping of each anchor's 8 nearest points, and a per-anchor
    128 -> 256 layer before the pool.

Arrays are point-major: a batch of clouds is ``(B, N, 3)`` and features are
``(B, N', D)``.  Layer ``l`` (1-based) is the output of the ``l``-th encoder
layer; the explainer taps features there.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, parse_floats, save_checkpoint
from .optim import make_optimizer

KINDS = ("pointnet-lite", "hier-lite")
ENCODER_DIMS = (64, 128, 256)
HEAD_HIDDEN = 64
SIGMA_FLOOR = 1e-4


@dataclass
class ModelParams:
    kind: str
    encoder: list
    head: list
    tap_layer: int = 3
    n_anchors: int = 64
    k_group: int = 8
    seed: int = 0
    prior_mu: np.ndarray | None = None
    prior_sigma: np.ndarray | None = None

    @property
    def n_layers(self):
        return len(self.encoder)

    @property
    def n_classes(self):
        return self.head[-1][0].shape[1]

    def layer_dim(self, layer):
        return self.encoder[layer - 1][0].shape[1]

    @property
    def group_layer(self):
        """Encoder layer whose input is anchor-grouped (hier-lite only)."""
        return 3 if self.kind == "hier-lite" else None

    def arrays(self):
        out = {}
        for i, (w, b) in enumerate(self.encoder, 1):
            out[f"encoder.{i}.weight"], out[f"encoder.{i}.bias"] = w, b
        for i, (w, b) in enumerate(self.head, 1):
            out[f"head.{i}.weight"], out[f"head.{i}.bias"] = w, b
        return out

    def checksum(self):
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def n_parameters(self):
        return int(sum(a.size for a in self.arrays().values()))


def init_params(kind="pointnet-lite", n_classes=6, seed=0, tap_layer=3, zero_head=False):
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; known: {', '.join(KINDS)}")
    rng = dc.make_rng(seed)

    def layer(d_in, d_out):
        return rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in), np.zeros(d_out)

    dims = (3,) + ENCODER_DIMS
    encoder = [layer(a, b) for a, b in zip(dims[:-1], dims[1:])]
    head = [layer(ENCODER_DIMS[-1], HEAD_HIDDEN), layer(HEAD_HIDDEN, n_classes)]
    if zero_head:
        head[-1] = (np.zeros_like(head[-1][0]), np.zeros_like(head[-1][1]))
    params = ModelParams(kind, encoder, head, tap_layer, seed=seed)
    _check_tap(params, tap_layer)
    return params


def _check_tap(params, layer):
    if not 1 <= layer <= params.n_layers:
        raise ValueError(f"tap layer must be in 1..{params.n_layers}, got {layer}")


# -- sampling and grouping -------------------------------------------------------

def fps(points, m, rng=None):
    """Greedy farthest-point sampling; the first index comes from ``rng`` (0 if None).

    Each next pick maximises the distance to the chosen set, ties to the
    lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if m > n:
        raise ValueError(f"cannot sample {m} of {n} points")
    chosen = np.empty(m, dtype=np.int64)
    if m == 0:
        return chosen
    chosen[0] = 0 if rng is None else int(rng.integers(n))
    dist = np.full(n, np.inf)
    for i in range(1, m):
        d = ((points - points[chosen[i - 1]]) ** 2).sum(axis=1)
        np.minimum(dist, d, out=dist)
        dist[chosen[:i]] = -1.0
        chosen[i] = int(np.argmax(dist))
    return chosen


def knn(queries, points, k):
    """Indices of the ``k`` nearest ``points`` to each query, ties to the lower index."""
    d = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


@dataclass
class Context:
    """Per-batch geometry the encoder needs past the grouping layer."""

    points: np.ndarray
    anchor_idx: np.ndarray | None = None
    group_idx: np.ndarray | None = None
    pooled: object = None

    def anchors(self):
        if self.anchor_idx is None:
            return self.points
        return np.take_along_axis(self.points, self.anchor_idx[..., None], axis=1)


def _context(params, points):
    ctx = Context(points)
    if params.kind == "hier-lite":
        b, n, _ = points.shape
        if n < params.n_anchors:
            raise ValueError(f"hier-lite needs N >= {params.n_anchors} points, got {n}")
        ctx.anchor_idx = np.stack([fps(p, params.n_anchors) for p in points])
        ctx.group_idx = np.stack([knn(p[a], p, min(params.k_group, n))
                                  for p, a in zip(points, ctx.anchor_idx)])
    return ctx


# -- forward pieces --------------------------------------------------------------

def _weights(params, track):
    wrap = dc.param if track else dc.constant
    enc = [(wrap(w), wrap(b)) for w, b in params.encoder]
    head = [(wrap(w), wrap(b)) for w, b in params.head]
    return enc, head


def _layer(params, weights, i, h, ctx):
    if i == params.group_layer:
        grouped = dc.gather(h, ctx.group_idx, axis=1)  # (B, N', K, D)
        h = dc.max_reduce(grouped, axis=2)
    w, b = weights[0][i - 1]
    return dc.elu(dc.affine(h, w, b))


def run_encoder(params, weights, points, ctx, upto):
    h = points
    for i in range(1, upto + 1):
        h = _layer(params, weights, i, h, ctx)
    return h


def run_rest(params, weights, layer, h, ctx):
    """Layers after ``layer``, max-pool, head; returns logits. The pool is kept on ``ctx``."""
    for i in range(layer + 1, params.n_layers + 1):
        h = _layer(params, weights, i, h, ctx)
    pooled = dc.max_reduce(h, axis=1)
    ctx.pooled = pooled
    g = pooled
    head = weights[1]
    for j, (w, b) in enumerate(head):
        g = dc.affine(g, w, b)
        if j < len(head) - 1:
            g = dc.elu(g)
    return g


def _batch(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 2:
        points = points[None]
    if points.ndim != 3 or points.shape[-1] != 3:
        raise ValueError(f"points must be (N, 3) or (B, N, 3), got {points.shape}")
    return points


def encoder_forward(params, points, layer=None):
    """Tap-layer features, their anchor coordinates, and the pooled global feature.

    Returns ``(z, anchors, z_global)`` for a single cloud with ``z`` shaped
    ``(N', D)`` (the transpose of the D x N' convention) and ``z_global``
    the max over all points of the final encoder layer.
    """
    layer = params.tap_layer if layer is None else layer
    _check_tap(params, layer)
    pts = _batch(points)
    ctx = _context(params, pts)
    weights = _weights(params, track=False)
    z = run_encoder(params, weights, pts, ctx, layer)
    last = run_encoder_from(params, weights, layer, z, ctx)
    g = dc.max_reduce(last, axis=1)
    anchors = ctx.anchors() if tap_has_anchors(params, layer) else pts
    return z.data[0], anchors[0], g.data[0]


def run_encoder_from(params, weights, layer, h, ctx):
    for i in range(layer + 1, params.n_layers + 1):
        h = _layer(params, weights, i, h, ctx)
    return h


def tap_has_anchors(params, layer):
    return params.group_layer is not None and layer >= params.group_layer


# -- instrumented model ------------------------------------------------------------

@dataclass
class Counter:
    forwards: int = 0
    backwards: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, forwards=0, backwards=0):
        with self._lock:
            self.forwards += forwards
            self.backwards += backwards

    def reset(self):
        with self._lock:
            self.forwards = self.backwards = 0


class PointClassifier:
    """Frozen classifier with forward/backward counters on every public entry point.

    One forward (or backward) is counted per cloud in the batch.
    """

    def __init__(self, params):
        self.params = params
        self.counter = Counter()
        self._const = _weights(params, track=False)

    def logits(self, points):
        pts = _batch(points)
        ctx = _context(self.params, pts)
        out = run_rest(self.params, self._const, 0, dc.constant(pts), ctx)
        self.counter.add(forwards=len(pts))
        return out.data, ctx

    def predict_proba(self, points):
        logits, _ = self.logits(points)
        return dc.softmax(dc.constant(logits), axis=-1).data

    def predict(self, points):
        return np.argmax(self.predict_proba(points), axis=-1)

    def features(self, points, layer=None):
        """Tap-layer features ``(B, N', D)`` and the batch context."""
        layer = self.params.tap_layer if layer is None else layer
        _check_tap(self.params, layer)
        pts = _batch(points)
        ctx = _context(self.params, pts)
        z = run_encoder(self.params, self._const, pts, ctx, layer)
        self.counter.add(forwards=len(pts))
        return z.data, ctx

    def critical_indices(self, points):
        """Argmax point (or anchor) index of every pooled channel for one cloud."""
        pts = _batch(points)
        ctx = _context(self.params, pts)
        run_rest(self.params, self._const, 0, dc.constant(pts), ctx)
        self.counter.add(forwards=len(pts))
        idx = ctx.pooled.aux[0]
        if ctx.anchor_idx is not None:
            idx = ctx.anchor_idx[0][idx]
        return idx

    def head_from(self, layer, zhat, ctx):
        """Logits from (possibly masked) tap features; used inside explainer graphs."""
        return run_rest(self.params, self._const, layer, zhat, ctx)

    def loss_and_input_grad(self, points, labels):
        """Cross-entropy and its gradient with respect to the input coordinates."""
        pts = _batch(points)
        ctx = _context(self.params, pts)
        x = dc.param(pts)
        loss = dc.cross_entropy(run_rest(self.params, self._const, 0, x, ctx), np.atleast_1d(labels))
        self.counter.add(forwards=len(pts))
        dc.backward(loss)
        self.counter.add(backwards=len(pts))
        return float(loss.data), x.grad


def classify(params, points):
    return PointClassifier(params).predict_proba(points)


# -- training ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    kind: str = "pointnet-lite"
    tap_layer: int = 3

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def accuracy(params, points, labels, batch=200):
    model = PointClassifier(params)
    correct = 0
    for s in range(0, len(points), batch):
        correct += int((model.predict(points[s:s + batch]) == labels[s:s + batch]).sum())
    return correct / max(len(points), 1)


def train_classifier(dataset, config=None, log=None):
    """Minimise cross-entropy with shuffled mini-batches.

    Returns ``(params, history)``; ``history`` holds one dict per epoch with
    ``loss``, ``train_acc`` (running, over the epoch's batches) and ``test_acc``.
    """
    config = config or TrainConfig()
    if len(dataset.train_labels) == 0:
        raise ValueError("empty training set")
    params = init_params(config.kind, len(dataset.class_names), config.seed, config.tap_layer)
    arrays = [a for pair in params.encoder + params.head for a in pair]
    opt = make_optimizer(config.optimizer, arrays, config.lr)
    rng = dc.make_rng(config.seed + 1)
    x_all, y_all = dataset.train_points, dataset.train_labels
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(y_all))
        loss_sum, correct = 0.0, 0
        for step, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            pts = x_all[idx]
            weights = _weights(params, track=True)
            ctx = _context(params, pts)
            logits = run_rest(params, weights, 0, dc.constant(pts), ctx)
            loss = dc.cross_entropy(logits, y_all[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"classifier loss diverged at epoch {epoch + 1}, step {step + 1}")
            dc.backward(loss)
            opt.step([v.grad for pair in weights[0] + weights[1] for v in pair])
            loss_sum += float(loss.data) * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == y_all[idx]).sum())
        record = {
            "epoch": epoch + 1,
            "loss": loss_sum / len(y_all),
            "train_acc": correct / len(y_all),
            "test_acc": accuracy(params, dataset.test_points, dataset.test_labels)
            if len(dataset.test_labels) else float("nan"),
        }
        history.append(record)
        if log:
            log(record)
    params.prior_mu, params.prior_sigma = feature_prior(params, x_all)
    return params, history


def feature_prior(params, points, layer=None, batch=200):
    """Per-channel mean and floored standard deviation of tap features over a dataset."""
    layer = params.tap_layer if layer is None else layer
    model = PointClassifier(params)
    total, sq, count = 0.0, 0.0, 0
    for s in range(0, len(points), batch):
        z, _ = model.features(points[s:s + batch], layer)
        flat = z.reshape(-1, z.shape[-1])
        total = total + flat.sum(axis=0)
        sq = sq + (flat**2).sum(axis=0)
        count += flat.shape[0]
    mu = total / count
    sigma = np.sqrt(np.maximum(sq / count - mu**2, 0.0))
    return mu, np.maximum(sigma, SIGMA_FLOOR)


# -- persistence ---------------------------------------------------------------

def save_model(path, params, extra=None):
    meta = {
        "kind": "model",
        "architecture": params.kind,
        "dims": [3, *[w.shape[1] for w, _ in params.encoder]],
        "head_dims": [w.shape[1] for w, _ in params.head],
        "tap_layer": params.tap_layer,
        "n_anchors": params.n_anchors,
        "k_group": params.k_group,
        "seed": params.seed,
        "prior_mu": [] if params.prior_mu is None else [float(v) for v in params.prior_mu],
        "prior_sigma": [] if params.prior_sigma is None else [float(v) for v in params.prior_sigma],
    }
    meta.update(extra or {})
    save_checkpoint(path, params.arrays(), meta)


def load_model(path):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: not a model checkpoint")
    n_enc = len(meta["dims"].split(",")) - 1
    n_head = len(meta["head_dims"].split(","))
    encoder = [(arrays[f"encoder.{i}.weight"], arrays[f"encoder.{i}.bias"]) for i in range(1, n_enc + 1)]
    head = [(arrays[f"head.{i}.weight"], arrays[f"head.{i}.bias"]) for i in range(1, n_head + 1)]
    return ModelParams(meta["architecture"], encoder, head, int(meta["tap_layer"]),
                       int(meta["n_anchors"]), int(meta["k_group"]), int(meta["seed"]),
                       parse_floats(meta.get("prior_mu", "")), parse_floats(meta.get("prior_sigma", "")))
