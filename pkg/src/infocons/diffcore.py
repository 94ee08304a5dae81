"""Minimal define-by-run reverse-mode differentiation on float64 numpy arrays.

Every operation builds a fresh :class:`Value` node that remembers its parents
and a closure that pushes the output adjoint back to them.  Graphs are rebuilt
on every forward pass and discarded after one :func:`backward`.

Random streams everywhere in the package come from :func:`make_rng`, a numpy
``Generator`` over the PCG64 bit generator, which is specified to produce the
same stream for the same seed on every platform.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Value", "constant", "param", "make_rng", "backward", "forward",
    "add", "sub", "mul", "div", "neg", "scale", "square", "exp", "log", "softplus",
    "matmul", "affine", "elu", "sigmoid", "softmax", "log_softmax",
    "max_reduce", "mean_reduce", "sum_reduce", "batch_moments", "cross_entropy",
    "gather", "reshape", "transpose", "stop_gradient",
    "gumbel_samples", "gumbel_softmax", "gaussian_kl", "relaxed_bernoulli_kl_uniform",
]


def make_rng(seed):
    """Return the package-wide deterministic generator (numpy PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


class Value:
    """A node of the computation graph.

    ``data`` holds the forward result, ``grad`` the adjoint of the final scalar
    with respect to it.  ``requires_grad`` is False for constants and for any
    node whose parents are all constants, which lets backward skip whole
    subgraphs (frozen model weights, cached features).
    """

    __slots__ = ("data", "_grad", "op", "parents", "requires_grad", "_backward", "aux")

    def __init__(self, data, parents=(), op="leaf", requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = None
        self.aux = None

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ValueError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Value(op={self.op}, shape={self.data.shape})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data):
    return Value(data)


def param(data):
    return Value(data, requires_grad=True)


def _lift(x):
    return x if isinstance(x, Value) else Value(x)


def _node(data, parents, op):
    out = Value(data, parents, op, any(p.requires_grad for p in parents))
    return out


def _accumulate(node, g):
    if not node.requires_grad:
        return
    if node._grad is None:
        node._grad = np.array(g, dtype=np.float64, copy=True).reshape(node.data.shape)
    else:
        node._grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    out = _node(a.data + b.data, (a, b), "add")

    def _bw(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    out._backward = _bw
    return out


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    out = _node(a.data - b.data, (a, b), "sub")

    def _bw(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(-out.grad, b.shape))

    out._backward = _bw
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    out = _node(a.data * b.data, (a, b), "mul")

    def _bw(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    out._backward = _bw
    return out


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = _node(a.data / b.data, (a, b), "div")

    def _bw(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad * a.data / b.data**2, b.shape))

    out._backward = _bw
    return out


def neg(a):
    a = _lift(a)
    out = _node(-a.data, (a,), "neg")
    out._backward = lambda out: _accumulate(a, -out.grad)
    return out


def scale(a, c):
    """Multiply by a python scalar."""
    a = _lift(a)
    c = float(c)
    out = _node(a.data * c, (a,), "scale")
    out._backward = lambda out: _accumulate(a, out.grad * c)
    return out


def square(a):
    a = _lift(a)
    out = _node(a.data * a.data, (a,), "square")
    out._backward = lambda out: _accumulate(a, 2.0 * a.data * out.grad)
    return out


def exp(a):
    a = _lift(a)
    out = _node(np.exp(a.data), (a,), "exp")
    out._backward = lambda out: _accumulate(a, out.grad * out.data)
    return out


def log(a):
    a = _lift(a)
    out = _node(np.log(a.data), (a,), "log")
    out._backward = lambda out: _accumulate(a, out.grad / a.data)
    return out


def softplus(a):
    """log(1 + e^a), evaluated without overflow."""
    a = _lift(a)
    out = _node(np.logaddexp(0.0, a.data), (a,), "softplus")
    out._backward = lambda out: _accumulate(a, out.grad * _sigmoid(a.data))
    return out


def _sigmoid(x):
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = _lift(a)
    out = _node(_sigmoid(a.data), (a,), "sigmoid")
    out._backward = lambda out: _accumulate(a, out.grad * out.data * (1.0 - out.data))
    return out


def elu(a, alpha=1.0):
    a = _lift(a)
    pos = a.data > 0
    e = np.expm1(np.minimum(a.data, 0.0))
    out = _node(np.where(pos, a.data, alpha * e), (a,), "elu")

    def _bw(out):
        _accumulate(a, out.grad * np.where(pos, 1.0, alpha * (e + 1.0)))

    out._backward = _bw
    return out


def stop_gradient(a):
    """Forward identity that contributes no adjoint to ``a``."""
    a = _lift(a)
    out = Value(a.data, (a,), "stop_gradient", requires_grad=False)
    return out


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """``a @ b`` for ``(..., n, k) @ (k, m)`` or matching batched operands."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")

    def _bw(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accumulate(b, gb)

    out._backward = _bw
    return out


def affine(x, w, b):
    return add(matmul(x, w), b)


def reshape(a, shape):
    a = _lift(a)
    out = _node(a.data.reshape(shape), (a,), "reshape")
    out._backward = lambda out: _accumulate(a, out.grad.reshape(a.shape))
    return out


def transpose(a, axes):
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _node(np.transpose(a.data, axes), (a,), "transpose")
    out._backward = lambda out: _accumulate(a, np.transpose(out.grad, inv))
    return out


def gather(a, index, axis):
    """Select entries of ``a`` along ``axis`` with an integer index array.

    ``index`` may carry extra leading batch dimensions matching ``a``; it is
    applied with ``np.take_along_axis`` semantics after expanding to ``a``'s
    trailing dimensions.
    """
    a = _lift(a)
    index = np.asarray(index)
    if index.ndim == 1:
        data = np.take(a.data, index, axis=axis)

        def _bw(out):
            g = np.zeros_like(a.data)
            np.add.at(g, (slice(None),) * (axis % a.data.ndim) + (index,), out.grad)
            _accumulate(a, g)
    else:
        # index: (B, ...) selecting rows of a (B, N, C) along axis 1
        if axis != 1 or a.data.ndim != 3 or index.shape[0] != a.shape[0]:
            raise ValueError(f"gather: unsupported index {index.shape} for {a.shape}")
        batch = np.arange(a.shape[0]).reshape((-1,) + (1,) * (index.ndim - 1))
        data = a.data[batch, index]

        def _bw(out):
            g = np.zeros_like(a.data)
            np.add.at(g, (batch, index), out.grad)
            _accumulate(a, g)

    out = _node(data, (a,), "gather")
    out._backward = _bw
    return out


# -- reductions ------------------------------------------------------------

def sum_reduce(a, axis=None, keepdims=False):
    a = _lift(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")

    def _bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out._backward = _bw
    return out


def mean_reduce(a, axis=None, keepdims=False):
    a = _lift(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")

    def _bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    out._backward = _bw
    return out


def max_reduce(a, axis):
    """Max over ``axis``; the argmax (first occurrence on ties) is kept in ``out.aux``."""
    a = _lift(a)
    idx = np.argmax(a.data, axis=axis)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out = _node(np.squeeze(vals, axis=axis), (a,), "max")
    out.aux = idx

    def _bw(out):
        g = np.zeros_like(a.data)
        np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis)
        _accumulate(a, g)

    out._backward = _bw
    return out


def batch_moments(a, axis):
    """Mean and (biased) variance over ``axis``, both differentiable."""
    mu = mean_reduce(a, axis=axis, keepdims=True)
    var = mean_reduce(square(sub(a, mu)), axis=axis, keepdims=True)
    return mu, var


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = _node(e / e.sum(axis=axis, keepdims=True), (a,), "softmax")

    def _bw(out):
        s = out.data
        g = out.grad
        _accumulate(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    out._backward = _bw
    return out


def log_softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _node(shifted - lse, (a,), "log_softmax")

    def _bw(out):
        g = out.grad
        _accumulate(a, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    out._backward = _bw
    return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, C)."""
    logits = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"cross_entropy: shape mismatch {logits.shape} vs {labels.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = gather_rows(logp, labels)
    return neg(mean_reduce(picked))


def gather_rows(a, cols):
    """``a[i, cols[i]]`` for a 2-D value."""
    rows = np.arange(a.shape[0])
    out = _node(a.data[rows, cols], (a,), "pick")

    def _bw(out):
        g = np.zeros_like(a.data)
        g[rows, cols] = out.grad
        _accumulate(a, g)

    out._backward = _bw
    return out


# -- graph traversal -------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def forward(root):
    """Values are computed eagerly; this only validates and returns ``root``."""
    if not np.all(np.isfinite(root.data)):
        raise FloatingPointError(f"non-finite values in {root!r}")
    return root


def backward(loss):
    """Populate adjoints of every node reachable from the scalar ``loss``.

    Returns a dict mapping each gradient-requiring leaf to its adjoint.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node._grad = None
    loss._grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
        elif node.requires_grad:
            leaves[node] = node.grad
    return leaves


# -- stochastic and divergence primitives ------------------------------------

def gumbel_samples(logits, tau, k, rng):
    """``k`` relaxed one-hot samples over the last axis, stacked on a new axis 0."""
    logits = _lift(logits)
    if tau <= 0 or k < 1:
        raise ValueError("gumbel_softmax needs tau > 0 and k >= 1")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("gumbel_softmax: non-finite logits")
    u = rng.random((k,) + logits.shape)
    g = -np.log(-np.log(u))
    logp = log_softmax(logits, axis=-1)
    return softmax(scale(add(logp, g), 1.0 / tau), axis=-1)


def gumbel_softmax(logits, tau=0.7, k=32, rng=None):
    """Mean over ``k`` Gumbel-perturbed tempered softmax draws."""
    if rng is None:
        rng = make_rng(0)
    return mean_reduce(gumbel_samples(logits, tau, k, rng), axis=0)


def gaussian_kl(mu_p, sigma_p, mu_q, sigma_q):
    """Mean over dimensions of KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2))."""
    mu_p, sigma_p, mu_q, sigma_q = map(_lift, (mu_p, sigma_p, mu_q, sigma_q))
    if np.any(sigma_p.data <= 0) or np.any(sigma_q.data <= 0):
        raise ValueError("gaussian_kl: every sigma must be > 0")
    var_q = square(sigma_q)
    per_dim = sub(
        add(sub(log(sigma_q), log(sigma_p)),
            div(add(square(sigma_p), square(sub(mu_p, mu_q))), scale(var_q, 2.0))),
        0.5,
    )
    return mean_reduce(per_dim)


def relaxed_bernoulli_kl_uniform(p, tau=0.7, k=32, rng=None):
    """Per-entry Monte Carlo estimate of KL(RelaxedBernoulli(p, tau) || U(0, 1)).

    Each entry of ``p`` in (0, 1) parameterises the two-class Gumbel-softmax
    relaxation with logits ``[log p, log(1 - p)]``.  The difference of its two
    Gumbel draws is logistic, ``L = log u - log(1 - u)``, and the relaxed
    sample has logit ``y = (logit p + L) / tau``.  Its log density is

        log tau + log u + log(1 - u) + softplus(y) + softplus(-y)

    and the uniform prior's is 0, so the estimate averages that over ``k``
    draws.  Draws are looped rather than stacked, keeping memory at the size
    of ``p``.  The backward pass is the pathwise derivative
    ``mean_k tanh(y_k / 2) / tau`` with respect to logit p.
    """
    p = _lift(p)
    if tau <= 0 or k < 1:
        raise ValueError("relaxed_bernoulli_kl_uniform needs tau > 0 and k >= 1")
    if np.any(p.data <= 0) or np.any(p.data >= 1):
        raise ValueError("relaxed_bernoulli_kl_uniform: probabilities must lie in (0, 1)")
    rng = make_rng(0) if rng is None else rng
    logit = np.log(p.data) - np.log1p(-p.data)
    total = np.zeros_like(p.data)
    slope = np.zeros_like(p.data)
    for _ in range(k):
        u = rng.random(p.shape)
        log_u, log_v = np.log(u), np.log1p(-u)
        y = (logit + log_u - log_v) / tau
        ay = np.abs(y)
        total += log_u + log_v + ay + 2 * np.log1p(np.exp(-ay))
        slope += np.tanh(y / 2)
    total += np.log(tau) * k
    out = _node(total / k, (p,), "relaxed_bernoulli_kl")
    dlogit = slope / (k * tau)

    def _bw(out):
        _accumulate(p, out.grad * dlogit / (p.data * (1 - p.data)))

    out._backward = _bw
    return out
