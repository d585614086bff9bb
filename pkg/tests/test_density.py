import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_detect import density as dc
from robust_detect.density import (CHI_SQUARED, KL, SQUARED_HELLINGER, TOTAL_VARIATION, FDivGenerator, Grid,
                                   GridDensity, GridFunction, build_density, f_dissimilarity, f_divergence,
                                   gaussian, integrate, spectral_f_divergence, uniform, weighted_affinity,
                                   weighted_tv)

from conftest import random_density, random_pair

GENERATORS = [KL, dc.REVERSE_KL, CHI_SQUARED, SQUARED_HELLINGER, TOTAL_VARIATION,
              FDivGenerator("Alpha", 0.5), FDivGenerator("Alpha", 2.5)]


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(1.0, 1.0, 10)
    with pytest.raises(ValueError):
        Grid(0.0, 1.0, 2)
    with pytest.raises(ValueError):
        Grid(0.0, math.inf, 10)
    g = Grid(0.0, 1.0, 11)
    assert g.dx == pytest.approx(0.1)
    assert g.weights.sum() == pytest.approx(1.0)


def test_density_validation():
    g = Grid(0.0, 1.0, 11)
    with pytest.raises(ValueError):
        GridDensity(g, np.full(11, 2.0))
    with pytest.raises(ValueError):
        GridDensity(g, -np.ones(11))
    with pytest.raises(ValueError):
        GridDensity.normalized(g, np.zeros(11))
    with pytest.raises(ValueError):
        GridFunction(g, np.full(11, np.inf))
    GridFunction(g, np.full(11, np.inf), allow_inf=True)


def test_gaussian_peak():
    p = gaussian(0, 1, Grid(-8, 8, 1601))
    assert p.values[800] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-3)


def test_uniform_constant():
    p = uniform(-1, 1, Grid(-1, 1, 201))
    np.testing.assert_allclose(p.values, 0.5, atol=1e-12)


def test_exp_offset_coefficient_closed_form():
    # int_{-1}^{1} a e^{-2x} + 0.1 dx = a sinh(2) + 0.2
    a = dc.exp_offset_coefficient(-2.0, 0.1, -1.0, 1.0, 0.9)
    assert a == pytest.approx(0.7 / math.sinh(2.0), rel=1e-12)
    assert a == pytest.approx(0.1930, abs=5e-5)


def test_build_density_errors():
    g = Grid(-1, 1, 101)
    with pytest.raises(ValueError):
        build_density({"kind": "gaussian", "mean": math.nan, "var": 1}, g)
    with pytest.raises(ValueError):
        build_density({"kind": "mixture", "components": [
            {"weight": 0.5, "spec": {"kind": "uniform", "a": -1, "b": 0}},
            {"weight": 0.6, "spec": {"kind": "uniform", "a": 0, "b": 1}}]}, g)
    with pytest.raises(ValueError):
        build_density({"kind": "uniform", "a": 5, "b": 6}, g)
    with pytest.raises(ValueError):
        build_density({"kind": "triangle"}, g)


def test_mixture_density():
    g = Grid(0, 1, 1001)
    spec = {"kind": "mixture", "components": [
        {"weight": 0.8, "spec": {"kind": "uniform", "a": 0, "b": 1}},
        {"weight": 0.2, "spec": {"kind": "uniform", "a": 0, "b": 0.5}}]}
    p = build_density(spec, g)
    assert p.values[100] == pytest.approx(1.2, rel=2e-3)
    assert p.values[900] == pytest.approx(0.8, rel=2e-3)


def test_integrate_examples():
    assert integrate(GridFunction(Grid(0, 1, 11), np.ones(11))) == pytest.approx(1.0, abs=1e-15)
    g = Grid(-1, 1, 101)
    assert integrate(GridFunction(g, g.x)) == pytest.approx(0.0, abs=1e-15)


def test_integrate_gaussian_against_erf():
    g = Grid(-8, 8, 1601)
    raw = dc.evaluate_shape({"kind": "gaussian", "mean": 0, "var": 1}, g)
    assert integrate(GridFunction(g, raw)) == pytest.approx(math.erf(8 / math.sqrt(2)), abs=1e-6)


def test_integrate_exact_for_piecewise_linear():
    g = Grid(0, 3, 4)
    # piecewise linear through (0,0),(1,2),(2,0),(3,1): exact area 1 + 1 + 0.5
    assert integrate(GridFunction(g, [0, 2, 0, 1])) == pytest.approx(2.5, abs=1e-15)


def test_kl_identity(band_nominals):
    p0, _ = band_nominals
    assert f_divergence(KL, p0, p0) == pytest.approx(0.0, abs=1e-12)


def test_kl_gaussian_closed_form(wide_grid):
    p1, p0 = gaussian(2, 4, wide_grid), gaussian(0, 4, wide_grid)
    assert f_divergence(KL, p1, p0) == pytest.approx(0.5, abs=1e-3)


def test_tv_shifted_uniforms():
    g = Grid(-1, 3, 4001)
    assert f_divergence(TOTAL_VARIATION, uniform(0, 1, g), uniform(0.5, 1.5, g)) == pytest.approx(0.5, abs=1e-3)


def test_disjoint_support_uses_recession_slope():
    g = Grid(0, 3, 3001)
    p, q = uniform(0, 1, g), uniform(2, 3, g)
    assert f_divergence(KL, p, q) == math.inf
    assert f_divergence(SQUARED_HELLINGER, p, q) == pytest.approx(2.0, abs=1e-12)
    assert f_divergence(TOTAL_VARIATION, p, q) == pytest.approx(1.0, abs=1e-12)


def test_grid_mismatch():
    a = gaussian(0, 1, Grid(-5, 5, 101))
    b = gaussian(0, 1, Grid(-5, 5, 201))
    with pytest.raises(ValueError):
        f_divergence(KL, a, b)


def test_weighted_affinity_examples(band_nominals):
    p0, p1 = band_nominals
    assert weighted_affinity(1.0, p0, p0) == pytest.approx(1.0, abs=1e-12)
    assert weighted_affinity(0.0, p0, p1) == 0.0
    half_l1 = 0.5 * np.sum(np.abs(p0.masses - p1.masses))
    assert weighted_affinity(1.0, p0, p1) == pytest.approx(1.0 - half_l1, abs=1e-12)
    with pytest.raises(ValueError):
        weighted_affinity(-1.0, p0, p1)


@pytest.mark.parametrize("lam", [0.1, 0.5, 1.0, 2.0, 10.0])
def test_weighted_tv_identity(lam, band_nominals):
    p0, p1 = band_nominals
    rhs = 0.5 * np.sum(np.abs(lam * p1.masses - p0.masses)) - 0.5 * abs(lam - 1)
    assert weighted_tv(lam, p1, p0) == pytest.approx(rhs, abs=1e-9)


@pytest.mark.parametrize("lam", [0.1, 0.5, 1.0, 2.0, 10.0])
def test_weighted_sum_error_alternative_form(lam, band_nominals):
    p0, p1 = band_nominals
    ratio = p1.values / p0.values
    region = ratio > 1 / lam
    alt = np.sum(p0.masses[region]) + lam * np.sum(p1.masses[~region])
    assert weighted_affinity(lam, p0, p1) == pytest.approx(alt, abs=1e-6)


def test_spectral_identity_pair():
    g = Grid(-30, 30, 6001)
    p0, p1 = gaussian(-2, 4, g), gaussian(0, 16, g)
    # KL(P0 || P1) keeps the ratio p0/p1 bounded on this grid
    direct = f_divergence(KL, p0, p1)
    assert spectral_f_divergence(KL, p0, p1) == pytest.approx(direct, rel=1e-3)


def test_spectral_identical_pair(band_nominals):
    p0, _ = band_nominals
    assert spectral_f_divergence(KL, p0, p0) <= 1e-6


def test_spectral_chi_square_uniform_mixture():
    g = Grid(0, 1, 1001)
    p0 = uniform(0, 1, g)
    p1 = build_density({"kind": "mixture", "components": [
        {"weight": 0.8, "spec": {"kind": "uniform", "a": 0, "b": 1}},
        {"weight": 0.2, "spec": {"kind": "uniform", "a": 0, "b": 0.5}}]}, g)
    direct = f_divergence(CHI_SQUARED, p1, p0)
    assert direct == pytest.approx(0.04, rel=5e-3)
    assert spectral_f_divergence(CHI_SQUARED, p1, p0) == pytest.approx(direct, rel=1e-3)


def test_spectral_rejections(band_nominals):
    p0, p1 = band_nominals
    with pytest.raises(ValueError):
        spectral_f_divergence(TOTAL_VARIATION, p1, p0)
    # p1/p0 reaches ~1e30 in the tails, far beyond a narrow lambda range
    with pytest.raises(ValueError):
        spectral_f_divergence(KL, p1, p0, lambda_grid=np.geomspace(0.5, 2, 100))


@pytest.mark.parametrize("f", [KL, CHI_SQUARED])
def test_spectral_identity_random_pairs(f):
    rng = np.random.default_rng(7)
    g = Grid(-10, 10, 2001)
    for _ in range(20):
        p0, p1 = random_pair(rng, g)
        direct = f_divergence(f, p1, p0)
        spec = spectral_f_divergence(f, p1, p0)
        assert abs(spec - direct) / max(direct, 1e-6) <= 1e-3


@pytest.mark.parametrize("f", GENERATORS, ids=lambda f: f"{f.family}{f.alpha or ''}")
def test_generator_convex_and_normalized(f):
    assert float(f.f(1.0)) == pytest.approx(0.0, abs=1e-15)
    t = np.geomspace(1e-3, 1e3, 200)
    if f.twice_differentiable:
        assert (f.d2f(t) >= 0).all()
        # derivatives agree with finite differences
        h = 1e-6
        np.testing.assert_allclose(f.df(t), (f.f(t + h) - f.f(t - h)) / (2 * h), rtol=1e-4, atol=1e-6)
    vals = f.f(np.linspace(1e-3, 50, 2001))
    assert (vals[1:-1] <= 0.5 * (vals[:-2] + vals[2:]) + 1e-12).all()


@pytest.mark.parametrize("f", GENERATORS, ids=lambda f: f"{f.family}{f.alpha or ''}")
def test_nonnegativity_and_joint_convexity(f):
    rng = np.random.default_rng(11)
    g = Grid(-10, 10, 801)
    for _ in range(5):
        a0, a1, b0, b1 = (random_density(rng, g) for _ in range(4))
        da, db = f_divergence(f, a1, a0), f_divergence(f, b1, b0)
        assert da >= -1e-10 and db >= -1e-10
        for t in (0.25, 0.5, 0.75):
            m0 = GridDensity.normalized(g, t * a0.values + (1 - t) * b0.values)
            m1 = GridDensity.normalized(g, t * a1.values + (1 - t) * b1.values)
            assert f_divergence(f, m1, m0) <= t * da + (1 - t) * db + 1e-9


@pytest.mark.parametrize("f", GENERATORS, ids=lambda f: f"{f.family}{f.alpha or ''}")
def test_data_processing_under_cell_merging(f):
    rng = np.random.default_rng(3)
    g = Grid(-10, 10, 801)
    for _ in range(5):
        p0, p1 = random_density(rng, g), random_density(rng, g)
        m0, m1 = p0.masses, p1.masses
        # merge pairs of adjacent point masses, keeping the total
        c0 = m0[:-1].reshape(-1, 2).sum(axis=1)
        c1 = m1[:-1].reshape(-1, 2).sum(axis=1)
        c0[-1] += m0[-1]
        c1[-1] += m1[-1]
        assert dc.fdiv_masses(f, c1, c0) <= dc.fdiv_masses(f, m1, m0) + 1e-9


def test_f_dissimilarity_reductions(band_nominals):
    p0, p1 = band_nominals
    kl = lambda t: KL.f(t[0])
    assert f_dissimilarity(kl, [1.0], [p1], p0) == pytest.approx(f_divergence(KL, p1, p0), abs=1e-12)
    g = p0.grid
    p2 = gaussian(1, 9, g)
    alpha = 0.3
    conv = lambda t: alpha * KL.f(t[0]) + (1 - alpha) * KL.f(t[1])
    expect = alpha * f_divergence(KL, p1, p0) + (1 - alpha) * f_divergence(KL, p2, p0)
    assert f_dissimilarity(conv, [1, 1], [p1, p2], p0) == pytest.approx(expect, abs=1e-12)
    anyf = lambda t: np.sum((t - 1) ** 2, axis=0)
    assert f_dissimilarity(anyf, [1, 1, 1], [p0, p0, p0], p0) == pytest.approx(0.0, abs=1e-15)


def test_f_dissimilarity_errors(band_nominals):
    p0, p1 = band_nominals
    with pytest.raises(ValueError):
        f_dissimilarity(lambda t: t[0], [1, 1], [p1], p0)
    g = Grid(0, 3, 301)
    with pytest.raises(ValueError):
        f_dissimilarity(lambda t: t[0], [1], [uniform(0, 1, g)], uniform(2, 3, g))


@settings(max_examples=40, deadline=None)
@given(mu=st.floats(-3, 3), var=st.floats(0.5, 4), lam=st.floats(0.01, 100))
def test_affinity_bounds(mu, var, lam):
    g = Grid(-20, 20, 801)
    p0, p1 = gaussian(0, 1, g), gaussian(mu, var, g)
    val = weighted_affinity(lam, p0, p1)
    assert -1e-15 <= val <= min(1.0, lam) + 1e-12
