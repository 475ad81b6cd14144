"""Adam with a cosine-annealed learning rate."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """``lr0 * (1 + cos(pi * step / total_steps)) / 2``; reaches 0 at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Bias-corrected adaptive-moment updates keyed by parameter name.

    For gradient ``g`` at update ``t`` (1-based)::

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        x <- x - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = p.grad.astype(p.value.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = (p.value - update).astype(p.value.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, t: int, tensors: dict[str, np.ndarray]) -> None:
        self.t = t
        self.m = {k[len("opt.m."):]: v.copy() for k, v in tensors.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: v.copy() for k, v in tensors.items() if k.startswith("opt.v.")}
