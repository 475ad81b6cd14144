"""Adaptive clusterer: an online self-organizing map over bottleneck feature vectors.

Neurons sit on a ``g x g`` lattice. For a winner ``n`` the update weight of
neuron ``l`` is a Gaussian of their lattice distance, cut off beyond the
current radius. Both radius and learning rate decay as ``x0 / (1 + t/(k/2))``
with ``t`` a step counter that keeps running across feature maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ConfigError


class ProtocolError(RuntimeError):
    """Raised when clusterer operations are called out of order."""


@dataclass
class SomState:
    weights: np.ndarray                 # (L, D)
    grid_pos: np.ndarray                # (L, 2) lattice coordinates
    win_counts: np.ndarray              # (L,) int64
    delta0: float = 0.5
    eta0: float = 0.5
    k: int = 5000
    t: int = 0
    z_values: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return self.weights.shape[0]

    @property
    def D(self) -> int:
        return self.weights.shape[1]

    def radius(self, t: int | None = None) -> float:
        return _decay(self.delta0, self.t if t is None else t, self.k)

    def learning_rate(self, t: int | None = None) -> float:
        return _decay(self.eta0, self.t if t is None else t, self.k)


@dataclass
class AcResult:
    M: int
    centers_ordered: np.ndarray         # (L, D), most-won neuron first

    @property
    def L(self) -> int:
        return self.centers_ordered.shape[0]


def _decay(x0: float, t: int, k: int) -> float:
    if k <= 0:
        return x0
    return x0 / (1.0 + t / (k / 2.0))


def init_som(L: int, D: int, rng: np.random.Generator, *, delta0: float = 0.5,
             eta0: float = 0.5, k: int = 5000, init_scale: float = 1e-2) -> SomState:
    """Square lattice of ``L`` neurons with small random weights around the origin."""
    g = math.isqrt(L)
    if g * g != L:
        raise ConfigError(f"L must be a perfect square, got {L}")
    rows, cols = np.divmod(np.arange(L), g)
    return SomState(
        weights=rng.uniform(-init_scale, init_scale, size=(L, D)),
        grid_pos=np.stack([rows, cols], axis=1).astype(np.float64),
        win_counts=np.zeros(L, dtype=np.int64),
        delta0=delta0, eta0=eta0, k=k,
    )


def _as_vectors(F: np.ndarray) -> np.ndarray:
    # (D, H, W) feature map -> (N, D) rows; 2-D input is taken as already (N, D)
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 3:
        return F.reshape(F.shape[0], -1).T
    return F


def find_bmu(f: np.ndarray, s: SomState) -> tuple[int, float]:
    """Index and Euclidean distance of the nearest neuron (lowest index on ties)."""
    d = np.sqrt(((s.weights - f) ** 2).sum(axis=1))
    i = int(np.argmin(d))
    return i, float(d[i])


def neighborhood_coeff(winner: int, l: int, s: SomState) -> float:
    dist = float(np.linalg.norm(s.grid_pos[winner] - s.grid_pos[l]))
    delta = s.radius()
    if dist > delta:
        return 0.0
    return math.exp(-dist * dist / (2.0 * delta * delta))


def _neighborhood_row(winner: int, s: SomState) -> np.ndarray:
    dist = np.linalg.norm(s.grid_pos - s.grid_pos[winner], axis=1)
    delta = s.radius()
    h = np.zeros(s.L)
    # scalar exp over the few neurons inside the radius; same values as neighborhood_coeff
    for l in np.flatnonzero(dist <= delta):
        h[l] = math.exp(-dist[l] * dist[l] / (2.0 * delta * delta))
    return h


def som_update(f: np.ndarray, s: SomState) -> int:
    """One competitive step; returns the winner index."""
    winner, _ = find_bmu(f, s)
    h = _neighborhood_row(winner, s)
    eta = s.learning_rate()
    s.weights += (eta * h)[:, None] * (f - s.weights)
    s.win_counts[winner] += 1
    s.t += 1
    return winner


def assign(F: np.ndarray, s: SomState) -> np.ndarray:
    """BMU index for every feature vector of ``F``."""
    X = _as_vectors(F)
    d2 = (X * X).sum(1)[:, None] - 2.0 * X @ s.weights.T + (s.weights ** 2).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def fit_feature_map(F: np.ndarray, s: SomState, rng: np.random.Generator) -> int:
    """Run ``k`` updates on columns of ``F`` sampled with replacement.

    Returns the number of distinct winners over a final full pass, and
    records it for :func:`export_centers`.
    """
    X = _as_vectors(F)
    for n in rng.integers(0, X.shape[0], size=s.k):
        som_update(X[n], s)
    z = int(np.unique(assign(X, s)).size)
    s.z_values.append(z)
    return z


def estimate_M(z_values, L: int | None = None) -> int:
    """Mean distinct-winner count, rounded half up and clamped to ``[1, L]``."""
    z = [int(v) for v in z_values]
    if not z:
        raise ProtocolError("estimate_M needs at least one feature map")
    q = len(z)
    m = (2 * sum(z) + q) // (2 * q)
    m = max(1, m)
    if L is not None:
        m = min(L, m)
    return m


def export_centers(s: SomState) -> AcResult:
    if not s.z_values:
        raise ProtocolError("export_centers called before any feature map was fitted")
    order = np.lexsort((np.arange(s.L), -s.win_counts))
    return AcResult(M=estimate_M(s.z_values, s.L), centers_ordered=s.weights[order].copy())


def quantization_error(X: np.ndarray, s: SomState) -> float:
    X = _as_vectors(X)
    idx = assign(X, s)
    return float(np.linalg.norm(X - s.weights[idx], axis=1).mean())
