import numpy as np
import pytest

from robust_detect.density import Grid, GridDensity, gaussian


@pytest.fixture(scope="session")
def wide_grid():
    return Grid(-30.0, 30.0, 6001)


@pytest.fixture(scope="session")
def band_nominals(wide_grid):
    return gaussian(-2, 4, wide_grid), gaussian(0, 16, wide_grid)


def random_density(rng, grid, n_comp=3):
    """Random Gaussian mixture on the grid, centred well inside it."""
    x = grid.x
    span = grid.x_max - grid.x_min
    mid = 0.5 * (grid.x_min + grid.x_max)
    v = np.zeros(grid.n)
    for _ in range(n_comp):
        mu = mid + rng.uniform(-0.2, 0.2) * span
        sd = rng.uniform(0.03, 0.12) * span
        v += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((x - mu) / sd) ** 2)
    return GridDensity.normalized(grid, v)


def random_pair(rng, grid):
    """Random pair whose likelihood ratio stays within about e^{+-6}."""
    p0 = random_density(rng, grid)
    x = grid.x
    span = grid.x_max - grid.x_min
    g = np.zeros(grid.n)
    for _ in range(3):
        g += rng.normal() * np.sin(rng.uniform(0.5, 6) * np.pi * x / span + rng.uniform(0, 2 * np.pi))
    g = 3.0 * g / max(np.max(np.abs(g)), 1e-12) * rng.uniform(0.1, 1.0)
    return p0, GridDensity.normalized(grid, p0.values * np.exp(g))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
