"""Adaptive-moment optimizer."""

from __future__ import annotations

import numpy as np

from .nn import Parameter


class Adam:
    """Bias-corrected adaptive moment estimation.

    ``step`` consumes the accumulated gradients and zeroes them afterwards,
    so each optimisation step sees exactly one backward pass worth of grads.
    """

    def __init__(self, params: list[Parameter], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.reset_grad()

    def zero_grad(self):
        for p in self.params:
            p.reset_grad()
