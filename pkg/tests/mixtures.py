"""Seeded Gaussian mixtures embedded in a random 2-D plane of feature space."""
import numpy as np


def embedded_mixture(c, rng, D=64, N=64, radius=4.0, sigma=0.1):
    """Returns ``draw()`` giving an (N, D) batch with ``c`` equally used, well-separated modes.

    Mode means sit on a circle of ``radius`` in the plane, so every pair is at
    least ``2 * radius * sin(pi / c)`` apart while the noise scale is ``sigma``.
    """
    ang = 2 * np.pi * np.arange(c) / c
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    basis, _ = np.linalg.qr(rng.standard_normal((D, 2)))
    labels = np.arange(N) % c

    def draw():
        return means[labels] @ basis.T + sigma * rng.standard_normal((N, D))
    return draw
