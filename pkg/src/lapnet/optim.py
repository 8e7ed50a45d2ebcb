"""Adam and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied to `params` in place. Returns ``(params, state)``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by `factor` after `patience` epochs without improvement.

    An epoch improves when its loss is below ``best * (1 - min_delta)``. The counter
    restarts after every reduction, and the learning rate is always ``lr0 * factor**k``.
    """

    lr0: float
    factor: float = 0.2
    patience: int = 5
    min_delta: float = 1e-6
    best: float = float("inf")
    bad_epochs: int = 0
    reductions: int = 0

    def __post_init__(self):
        if self.lr0 < 0 or not 0 < self.factor < 1 or self.patience < 1:
            raise ValueError("need lr0 >= 0, 0 < factor < 1 and patience >= 1")

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor ** self.reductions

    def step(self, val_loss: float) -> float:
        if not np.isfinite(val_loss):
            raise ValueError(f"monitored loss must be finite, got {val_loss}")
        if val_loss < self.best * (1.0 - self.min_delta):
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.reductions += 1
                self.bad_epochs = 0
        return self.lr
