"""First-order optimizers updating numpy arrays in place."""

import numpy as np


class SGD:
    def __init__(self, arrays, lr=1e-2):
        self.arrays = list(arrays)
        self.lr = lr

    def step(self, grads):
        for a, g in zip(self.arrays, grads):
            a -= self.lr * g


class Adam:
    def __init__(self, arrays, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.arrays = list(arrays)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in self.arrays]
        self.v = [np.zeros_like(a) for a in self.arrays]

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, arrays, lr):
    if kind == "adam":
        return Adam(arrays, lr)
    if kind == "sgd":
        return SGD(arrays, lr)
    raise ValueError(f"unknown optimizer {kind!r}; use 'adam' or 'sgd'")
