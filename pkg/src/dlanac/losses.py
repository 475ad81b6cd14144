"""Training losses.

Each loss returns ``(value, grads...)`` so the caller can chain the
gradients into the model. Batched inputs: frames (B, C, S, S), feature rows
(B, N, D), prototypes (B, M, D), matching weights (B, N, M). Frame losses
are means over pixels and batch; feature losses sum over sites and average
over the batch.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import ConfigError


class TrainingError(RuntimeError):
    """A loss term became non-finite."""


@dataclass
class LossWeights:
    intensity: float = 1.0
    gradient: float = 1.0
    compaction: float = 0.01
    separation: float = 0.01
    margin: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be nonnegative")


@dataclass
class LossReport:
    intensity: float = 0.0
    gradient: float = 0.0
    compaction: float = 0.0
    separation: float = 0.0
    total: float = 0.0

    def as_row(self) -> list[float]:
        return [self.intensity, self.gradient, self.compaction, self.separation, self.total]


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def intensity_loss(pred, target):
    """Mean squared error; returns ``(loss, d_pred)``."""
    _same_shape(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _abs_diffs(x, axis):
    return np.abs(np.diff(x, axis=axis))


def gradient_loss(pred, target):
    """Mean L1 gap between absolute forward differences, summed over both axes.

    Returns ``(loss, d_pred)``.
    """
    _same_shape(pred, target)
    if min(pred.shape[-2:]) < 2:
        raise ValueError("gradient loss needs spatial dims >= 2")
    total = 0.0
    grad = np.zeros_like(pred)
    for axis in (-2, -1):
        dp = np.diff(pred, axis=axis)
        gap = np.abs(np.diff(target, axis=axis)) - np.abs(dp)
        total += float(np.mean(np.abs(gap)))
        # d|gap|/d(dp) = -sign(gap) * sign(dp)
        g = -np.sign(gap) * np.sign(dp) / gap.size
        if axis == -2:
            grad[..., 1:, :] += g
            grad[..., :-1, :] -= g
        else:
            grad[..., :, 1:] += g
            grad[..., :, :-1] -= g
    return total, grad


def top_two(w):
    """Indices of the largest and second largest matching weights (lowest index on ties)."""
    a = np.argmax(w, axis=-1)
    if w.shape[-1] < 2:
        return a, None
    masked = w.copy()
    np.put_along_axis(masked, a[..., None], -np.inf, axis=-1)
    return a, np.argmax(masked, axis=-1)


def _dist_to(f, P, idx):
    # f (B,N,D), P (B,M,D), idx (B,N) -> residuals (B,N,D) and norms (B,N)
    sel = np.take_along_axis(P, idx[..., None], axis=1)
    r = f - sel
    return r, np.linalg.norm(r, axis=-1)


def _unit(r, n):
    safe = np.where(n > 0, n, 1.0)[..., None]
    return np.where(n[..., None] > 0, r / safe, 0.0)


def _scatter_to_prototypes(g, idx, M):
    # sum per-site gradients g (B,N,D) into the prototypes picked by idx
    out = np.zeros((g.shape[0], M, g.shape[2]), dtype=g.dtype)
    for b in range(g.shape[0]):
        np.add.at(out[b], idx[b], g[b])
    return out


def compaction_loss(f, P, w):
    """Sum over sites of the distance to the best-matching prototype.

    Returns ``(loss, d_f, d_P)``; selection itself carries no gradient.
    """
    B = f.shape[0]
    a, _ = top_two(w)
    r, n = _dist_to(f, P, a)
    g = _unit(r, n) / B
    return float(n.sum() / B), g, -_scatter_to_prototypes(g, a, P.shape[1])


def separation_loss(f, P, w, margin: float = 1.0):
    """Triplet hinge between the best and second-best matching prototypes.

    Returns ``(loss, d_f, d_P)``. With a single prototype the term is zero.
    """
    B, M = f.shape[0], P.shape[1]
    if M < 2:
        warnings.warn("separation loss needs at least two prototypes; using 0", stacklevel=2)
        return 0.0, np.zeros_like(f), np.zeros_like(P)
    a, b = top_two(w)
    ra, na = _dist_to(f, P, a)
    rb, nb = _dist_to(f, P, b)
    hinge = na - nb + margin
    active = (hinge > 0)[..., None].astype(f.dtype) / B
    ga = _unit(ra, na) * active
    gb = _unit(rb, nb) * active
    df = ga - gb
    dP = _scatter_to_prototypes(gb, b, M) - _scatter_to_prototypes(ga, a, M)
    return float(np.maximum(hinge, 0.0).sum() / B), df, dP


def total_loss(parts: dict, weights: LossWeights) -> LossReport:
    """Weighted sum of the four terms; missing terms count as zero."""
    values = {k: float(parts.get(k, 0.0)) for k in ("intensity", "gradient", "compaction", "separation")}
    for k, v in values.items():
        if not math.isfinite(v):
            raise TrainingError(f"loss term '{k}' is not finite ({v})")
    total = sum(getattr(weights, k) * v for k, v in values.items())
    return LossReport(total=total, **values)
