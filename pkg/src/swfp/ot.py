"""Wasserstein-2 utilities for uniform particle clouds.

``w2_displacement`` is the quantity the policy objective actually uses: the
mean squared movement of paired particles (identity coupling).  The exact
assignment W2 is only a reference for tests and diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

EXACT_W2_BUDGET = 512


@dataclass
class ParticleSet:
    particles: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("a particle set needs at least one particle")
        if not np.all(np.isfinite(p)):
            raise ValueError("particle coordinates must be finite")
        self.particles = p

    @property
    def M(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]

    @property
    def weights(self):
        return np.full(self.M, 1.0 / self.M)


def _arr(x):
    return x.particles if isinstance(x, ParticleSet) else np.asarray(x, dtype=np.float64)


def w2_displacement(before, after, scale=1.0):
    """(1/M) sum_i |(after_i - before_i) / scale|^2 for index-paired particles.

    ``scale`` (scalar or per-dimension) measures displacement in units of
    the action range.
    """
    b, a = _arr(before), _arr(after)
    if a.shape != b.shape:
        raise ValueError(f"paired sets differ in shape: {b.shape} vs {a.shape}")
    diff = (a - b) / scale
    return float(np.sum(diff * diff) / a.shape[0])


def w2_displacement_grad(before, after, scale=1.0):
    """Gradient of :func:`w2_displacement` with respect to ``after``."""
    b, a = _arr(before), _arr(after)
    if a.shape != b.shape:
        raise ValueError(f"paired sets differ in shape: {b.shape} vs {a.shape}")
    return 2.0 * (a - b) / (np.square(scale) * a.shape[0])


def w2_exact(set_a, set_b, budget=EXACT_W2_BUDGET):
    """Squared W2 between two uniform clouds of equal size (optimal assignment)."""
    a, b = _arr(set_a), _arr(set_b)
    if a.shape[0] != b.shape[0]:
        raise ValueError("exact W2 needs equal particle counts")
    if a.shape[0] > budget:
        raise ValueError(f"{a.shape[0]} particles exceeds the assignment budget of {budget}")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / a.shape[0])


# -- two-sample distances ---------------------------------------------------------


def _mean_pairwise(x, y, fn, exclude_diag=False, chunk=2048):
    total = 0.0
    for i in range(0, x.shape[0], chunk):
        block = fn(cdist(x[i:i + chunk], y))
        total += block.sum()
    n = x.shape[0] * y.shape[0]
    if exclude_diag:
        # diagonal terms are fn(0)
        total -= x.shape[0] * fn(np.zeros(1))[0]
        n -= x.shape[0]
    return total / n


def energy_distance(x, y):
    """Unbiased squared energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|."""
    x, y = _arr(x), _arr(y)
    ident = lambda d: d
    return float(2.0 * _mean_pairwise(x, y, ident)
                 - _mean_pairwise(x, x, ident, exclude_diag=True)
                 - _mean_pairwise(y, y, ident, exclude_diag=True))


def median_bandwidth(x, y, max_points=2000):
    z = np.concatenate([_arr(x)[:max_points], _arr(y)[:max_points]])
    d = cdist(z, z)
    return float(np.median(d[np.triu_indices_from(d, k=1)]))


def mmd_rbf(x, y, bandwidth=None):
    """Unbiased squared MMD with a Gaussian kernel (median heuristic by default)."""
    x, y = _arr(x), _arr(y)
    bw = median_bandwidth(x, y) if bandwidth is None else bandwidth
    k = lambda d: np.exp(-0.5 * (d / bw) ** 2)
    return float(_mean_pairwise(x, x, k, exclude_diag=True)
                 + _mean_pairwise(y, y, k, exclude_diag=True)
                 - 2.0 * _mean_pairwise(x, y, k))
