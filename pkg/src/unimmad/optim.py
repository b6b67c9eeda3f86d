"""Adaptive-moment (Adam) parameter updates."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .params import ParamStore


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, grads, names: Iterable[str]) -> None:
        """Update the parameters in ``names`` (in that order) from ``grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in names:
            p = self.params[k]
            g = grads[p]
            dt = p.data.dtype
            self.m[k] = (b1 * self.m[k] + (1 - b1) * g).astype(dt)
            self.v[k] = (b2 * self.v[k] + (1 - b2) * g * g).astype(dt)
            if self.lr == 0:
                continue
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(dt)
