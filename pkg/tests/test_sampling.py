import numpy as np
import pytest

from robust_detect.density import Grid, GridDensity, gaussian, uniform
from robust_detect.sampling import interpolate, sample_inverse_cdf, stream


def test_uniform_mean():
    x = sample_inverse_cdf(uniform(0, 1, Grid(0, 1, 101)), 1_000_000, seed=7)
    assert abs(x.mean() - 0.5) < 0.002
    assert x.min() >= 0 and x.max() <= 1


def test_gaussian_variance():
    x = sample_inverse_cdf(gaussian(0, 1, Grid(-10, 10, 2001)), 1_000_000, seed=11)
    assert abs(x.var() - 1.0) < 0.01


def test_deterministic_given_seed():
    p = gaussian(0, 1, Grid(-6, 6, 301))
    assert np.array_equal(sample_inverse_cdf(p, 1000, 3), sample_inverse_cdf(p, 1000, 3))
    assert not np.array_equal(sample_inverse_cdf(p, 1000, 3), sample_inverse_cdf(p, 1000, 4))


def test_streams_keyed_independently():
    a = stream(5, 0).random(10)
    b = stream(5, 1).random(10)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, stream(5, 0).random(10))


def test_dkw_band():
    grid = Grid(-8, 8, 161)  # coarse grid so the piecewise-linear CDF matters
    p = GridDensity.normalized(grid, np.exp(-np.abs(grid.x)) * (1 + 0.5 * np.sin(grid.x)))
    n = 1_000_000
    x = np.sort(sample_inverse_cdf(p, n, seed=1))
    # exact CDF of the sampler: piecewise linear through the trapezoid cell masses
    cdf = p.cdf() / p.cdf()[-1]
    model = np.interp(x, grid.x, cdf)
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(0, n) / n
    dev = max(np.max(np.abs(emp_hi - model)), np.max(np.abs(emp_lo - model)))
    eps = np.sqrt(np.log(2 / 0.001) / (2 * n))
    assert dev <= eps


def test_zero_mass_cells_never_drawn():
    grid = Grid(0, 4, 5)
    p = GridDensity.normalized(grid, np.array([1.0, 1.0, 0.0, 0.0, 1.0]))
    x = sample_inverse_cdf(p, 100_000, seed=2)
    # cell [2, 3] has zero mass
    assert not ((x > 2) & (x < 3)).any()


def test_count_must_be_positive():
    with pytest.raises(ValueError):
        sample_inverse_cdf(gaussian(0, 1, Grid(-5, 5, 101)), 0, seed=1)


def test_interpolate_matches_grid_values():
    grid = Grid(0, 2, 3)
    v = np.array([0.0, 1.0, np.inf])
    out = interpolate(v, grid, np.array([0.0, 0.5, 1.0, 1.5, 2.0]))
    assert np.allclose(out[:3], [0.0, 0.5, 1.0])
    assert np.isinf(out[3]) and np.isinf(out[4])
