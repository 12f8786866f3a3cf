"""Adam optimizer and early stopping."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .tensor import Param


class Adam:
    """Adam with bias correction. Frozen params are skipped bit-wise; every
    gradient is zeroed after the step."""

    def __init__(self, params: list[Param], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if p.frozen:
                p.grad = None
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in param {p.name!r}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / (1.0 - self.beta1 ** t)
            vhat = self.v[i] / (1.0 - self.beta2 ** t)
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = None


def adam_step(params: list[Param], state: Adam) -> list[Param]:
    """Functional wrapper around ``Adam.step`` for a pre-built state."""
    state.step()
    return params


class EarlyStop:
    """Fires once the monitored loss fails to improve by ``min_delta`` for
    ``patience`` consecutive updates."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.stale = 0

    def update(self, loss: float) -> bool:
        """Record one validation loss; returns True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience
