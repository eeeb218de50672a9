from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


def adam_step(params, cfg):
    """One bias-corrected Adam update over every trainable entry, then clear gradients.

    A missing gradient counts as zero.  Gradients are checked for NaN/Inf
    before any parameter is touched.
    """
    names = [n for n in params.names() if params.trainable(n)]
    for name in names:
        g = params[name].grad
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    cfg.step_count += 1
    t = cfg.step_count
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name in names:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = params.moments(name)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        params.set_moments(name, m, v)
        p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    params.zero_grad()
