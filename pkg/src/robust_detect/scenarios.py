"""Reference problem instances shared by tests, demos and the CLI examples."""
from __future__ import annotations

import numpy as np

from .density import Grid, GridDensity, exp_offset_coefficient, gaussian, uniform
from .uncertainty import DensityBand, band_from_scaled_nominal

WIDE_GRID = (-30.0, 30.0, 6001)
# error weights of the three-hypothesis sequential example
THREE_HYPOTHESIS_LAMBDA = (133.41, 133.41, 45.41)


def wide_grid() -> Grid:
    return Grid(*WIDE_GRID)


def gaussian_nominals(grid: Grid | None = None) -> tuple[GridDensity, GridDensity]:
    """N(-2, 4) and N(0, 16): the band, ball and breakdown examples."""
    grid = grid or wide_grid()
    return gaussian(-2, 4, grid), gaussian(0, 16, grid)


def censoring_bands(grid: Grid | None = None) -> tuple[DensityBand, DensityBand]:
    """Bands ``[0.7 p, 3 p]`` around N(-2, 4) and N(2, 4), whose LFD llr is censored."""
    grid = grid or wide_grid()
    p0, p1 = gaussian(-2, 4, grid), gaussian(2, 4, grid)
    return band_from_scaled_nominal(p0, 0.7, 3.0), band_from_scaled_nominal(p1, 0.7, 3.0)


def exp_band_coefficient() -> float:
    """``a`` with ``int_{-1}^{1} a e^{-2x} + 0.1 dx = 0.9``."""
    return exp_offset_coefficient(-2.0, 0.1, -1.0, 1.0, 0.9)


def three_hypothesis_sets(nx: int = 101) -> tuple:
    """(run-length distribution, H1 band, H2 band, H3) on [-1, 1].

    H1 and H2 are bands ``a e^{-+2x} + 0.1 <= p <= a e^{-+2x} + 0.3``; H3 and
    the run-length distribution are uniform.
    """
    grid = Grid(-1.0, 1.0, nx)
    a = exp_band_coefficient()
    x = grid.x
    b1 = DensityBand.from_arrays(grid, a * np.exp(-2 * x) + 0.1, a * np.exp(-2 * x) + 0.3)
    b2 = DensityBand.from_arrays(grid, a * np.exp(2 * x) + 0.1, a * np.exp(2 * x) + 0.3)
    u = uniform(-1.0, 1.0, grid)
    return u, b1, b2, u


def sprt_pair(grid: Grid | None = None) -> tuple[GridDensity, GridDensity]:
    """N(0, 1) against N(1, 1) on a grid wide enough for both tails."""
    grid = grid or Grid(-8.0, 9.0, 341)
    return gaussian(0, 1, grid), gaussian(1, 1, grid)
