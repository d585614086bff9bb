"""Seeded inverse-CDF sampling from grid densities.

All randomness goes through numpy's Philox counter-based generator keyed by
``SeedSequence(seed, spawn_key=...)``, so every stream is a pure function of
(seed, key) and does not depend on evaluation order.
"""
from __future__ import annotations

import numpy as np

from .density import GridDensity

RNG_ALGORITHM = "numpy.random.Philox(SeedSequence(seed, spawn_key))"


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


def inverse_cdf(p: GridDensity, u: np.ndarray) -> np.ndarray:
    """Map uniforms in [0, 1) through the inverse of the piecewise-linear CDF.

    Each cell is chosen with its trapezoid mass and the point is uniform
    inside the cell.
    """
    cdf = p.cdf()
    total = cdf[-1]
    if not total > 0:
        raise ValueError("density has no mass")
    target = np.asarray(u, dtype=float) * total
    idx = np.searchsorted(cdf, target, side="right") - 1
    idx = np.clip(idx, 0, p.grid.n - 2)
    cell = cdf[idx + 1] - cdf[idx]
    frac = np.clip((target - cdf[idx]) / np.where(cell > 0, cell, 1.0), 0.0, 1.0)
    return p.grid.x[idx] + frac * p.grid.dx


def sample_inverse_cdf(p: GridDensity, count: int, seed: int, *key: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be at least 1")
    return inverse_cdf(p, stream(seed, *key).random(count))


def interpolate(values: np.ndarray, p_grid, x: np.ndarray) -> np.ndarray:
    """Linear interpolation of grid values at sample points (the sampler's cells)."""
    pos = (np.asarray(x) - p_grid.x_min) / p_grid.dx
    idx = np.clip(np.floor(pos).astype(np.int64), 0, p_grid.n - 2)
    frac = pos - idx
    v0, v1 = values[idx], values[idx + 1]
    with np.errstate(invalid="ignore"):
        out = v0 + frac * (v1 - v0)
    # keep exact endpoint values (and infinities) where no interpolation happens
    out = np.where(frac == 0, v0, out)
    out = np.where(frac == 1, v1, out)
    same = v0 == v1
    return np.where(same, v0, out)
