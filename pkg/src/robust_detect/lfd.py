"""Least favorable distribution pairs for two hypotheses."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import density as dc
from .density import GridDensity, GridFunction, check_same_grid
from .uncertainty import (DensityBand, EpsContamination, FDivBall, UncertaintySet, as_band,
                          band_from_scaled_nominal, band_stats, equivalent_band_for_ball)

C_MIN, C_MAX = 1e-12, 1e12
C_WIDE = 1e300
BREAKDOWN_LLR = 1e-6
CONST_TOL = 1e-9


class RegionLabel(str, enum.Enum):
    LOWER0_LOWER1 = "LOWER0·LOWER1"
    LOWER0_UPPER1 = "LOWER0·UPPER1"
    UPPER0_LOWER1 = "UPPER0·LOWER1"
    UPPER0_UPPER1 = "UPPER0·UPPER1"
    CONST_INV_C0 = "CONST_1/c0"
    CONST_C1 = "CONST_c1"

    @property
    def is_const(self) -> bool:
        return self in (RegionLabel.CONST_INV_C0, RegionLabel.CONST_C1)


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LfdPair:
    """Least favorable densities with their scaling constants.

    In the band form ``q0 = min(upper0, max(c0 q1, lower0))`` and
    ``q1 = min(upper1, max(c1 q0, lower1))``, so the log-likelihood ratio is
    ``-log c0`` or ``log c1`` on the two constant regions.
    """

    q0: GridDensity
    q1: GridDensity
    c0: float
    c1: float
    llr: GridFunction
    region_labels: np.ndarray
    breakdown: bool = False
    iterations: int = 0
    band0: DensityBand | None = None
    band1: DensityBand | None = None
    scalars: dict = field(default_factory=dict)

    @property
    def grid(self):
        return self.q0.grid

    def const_mask(self) -> np.ndarray:
        return np.array([RegionLabel(l).is_const for l in self.region_labels])

    def scalars_dict(self) -> dict:
        d = {"c0": self.c0, "c1": self.c1, "breakdown": self.breakdown, "iterations": self.iterations}
        d.update(self.scalars)
        return d


def log_ratio(q1: np.ndarray, q0: np.ndarray) -> np.ndarray:
    """log(q1/q0) with +-inf where one side vanishes and 0 where both do."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(q1) - np.log(q0)
    out[(q0 == 0) & (q1 == 0)] = 0.0
    return out


def region_labels(q0, q1, llr, c0, c1, band0: DensityBand | None, band1: DensityBand | None) -> np.ndarray:
    """Classify each grid point by which branch of the band equations is active."""
    n = len(llr)
    labels = np.empty(n, dtype=object)
    inv_c0, log_c1 = -math.log(c0), math.log(c1)

    def side(q, band):
        if band is None:
            return np.full(n, "LOWER")
        lo, hi = band.lower.values, band.upper.values
        with np.errstate(invalid="ignore"):
            up = np.abs(q - hi) < np.abs(q - lo)
        return np.where(up, "UPPER", "LOWER")

    s0, s1 = side(q0, band0), side(q1, band1)
    for i in range(n):
        if abs(llr[i] - inv_c0) <= CONST_TOL:
            labels[i] = RegionLabel.CONST_INV_C0.value
        elif abs(llr[i] - log_c1) <= CONST_TOL:
            labels[i] = RegionLabel.CONST_C1.value
        else:
            labels[i] = f"{s0[i]}0·{s1[i]}1"
    return labels


def _make_pair(q0v, q1v, c0, c1, band0, band1, breakdown=False, iterations=0, scalars=None) -> LfdPair:
    grid = band0.grid if band0 is not None else None
    q0 = GridDensity.normalized(grid, q0v, "q0")
    q1 = GridDensity.normalized(grid, q1v, "q1")
    llr = log_ratio(q1.values, q0.values)
    if not breakdown:
        finite = np.isfinite(llr) & ((q0.values > 0) | (q1.values > 0))
        breakdown = bool(finite.any() and np.max(np.abs(llr[finite])) < BREAKDOWN_LLR)
    labels = region_labels(q0.values, q1.values, llr, c0, c1, band0, band1)
    return LfdPair(q0, q1, float(c0), float(c1), GridFunction(grid, llr, allow_inf=True), labels,
                   breakdown, iterations, band0, band1, dict(scalars or {}))


# ---------------------------------------------------------------------------
# band model


def project(band: DensityBand, v: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale ``v`` by c and clip into the band so the result integrates to 1.

    Returns the projected values and c.  The mass is nondecreasing in c; if
    the band forces a unique density (lower or upper bound of unit mass) the
    extreme admissible c is reported.
    """
    w = band.grid.weights
    lo, hi = band.lower.values, band.upper.values

    def mass(u):
        return float(w @ np.minimum(hi, np.maximum(math.exp(u) * v, lo))) - 1.0

    u_lo, u_hi = math.log(C_MIN), math.log(C_MAX)
    m_lo = mass(u_lo)
    if m_lo >= -1e-13:
        pos = v > 0
        c = float(np.min(lo[pos] / v[pos])) if pos.any() else 1.0
        c = min(max(c, C_MIN), C_MAX)
        return np.minimum(hi, lo.copy()), c
    m_hi = mass(u_hi)
    if m_hi < 0:
        # likelihood ratios beyond 1e12 occur in far Gaussian tails
        u_hi = math.log(C_WIDE)
        m_hi = mass(u_hi)
    if m_hi < -1e-12:
        raise ValueError("band projection cannot reach unit mass")
    if m_hi <= 1e-13:
        # only the upper bound itself has unit mass
        pos = v > 0
        c = float(np.max(hi[pos] / v[pos])) if pos.any() else 1.0
        return np.maximum(hi, lo), min(max(c, C_MIN), C_WIDE)
    u = optimize.brentq(mass, u_lo, u_hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    c = math.exp(u)
    out = np.minimum(hi, np.maximum(c * v, lo))
    return out, c


def _common_density(band0: DensityBand, band1: DensityBand, seed: np.ndarray):
    """A density inside both bands, or None if their intersection is empty."""
    lo = np.maximum(band0.lower.values, band1.lower.values)
    hi = np.minimum(band0.upper.values, band1.upper.values)
    w = band0.grid.weights
    if (lo > hi).any() or w @ lo > 1 or (not np.isinf(hi).any() and w @ hi < 1):
        return None
    q, _ = project(DensityBand.from_arrays(band0.grid, lo, hi), seed)
    return q


def solve_band_lfds(band0: DensityBand, band1: DensityBand, tol: float = 1e-8,
                    max_iter: int = 1000, init: np.ndarray | None = None) -> LfdPair:
    """Alternating projections ``q0 <- P0(c0 q1)``, ``q1 <- P1(c1 q0)``.

    ``init`` is the starting q1; by default the band's nominal density
    projected into the band.  Overlapping bands return a common density with
    the breakdown flag set.
    """
    check_same_grid(band0.lower, band1.lower)
    if init is None:
        try:
            init = band_stats(band1)[1].values
        except ValueError:
            init = np.where(np.isinf(band1.upper.values), 1.0, band1.upper.values)
    q1, _ = project(band1, np.asarray(init, dtype=float))

    seed = q1 + project(band0, q1)[0]
    common = _common_density(band0, band1, seed)
    if common is not None:
        return _make_pair(common, common, 1.0, 1.0, band0, band1, breakdown=True)

    q0 = None
    for it in range(1, max_iter + 1):
        n0, c0 = project(band0, q1)
        n1, c1 = project(band1, n0)
        change = np.max(np.abs(n1 - q1))
        if q0 is not None:
            change = max(change, np.max(np.abs(n0 - q0)))
        q0, q1 = n0, n1
        if it > 1 and change < tol:
            return _make_pair(q0, q1, c0, c1, band0, band1, iterations=it)
    raise NonConvergenceError(f"band LFD iteration did not converge in {max_iter} steps")


def band_midpoint(band: DensityBand) -> np.ndarray:
    """Alternative starting point: midpoint of the band (lower where upper is infinite)."""
    hi = band.upper.values
    return np.where(np.isinf(hi), band.lower.values, 0.5 * (band.lower.values + hi))


# ---------------------------------------------------------------------------
# contamination model


def solve_contamination_lfds(p0: GridDensity, p1: GridDensity, eps0: float, eps1: float) -> LfdPair:
    """Closed-form LFDs ``q0 = max(k0 p1, (1-eps0) p0)``, ``q1 = max(k1 p0, (1-eps1) p1)``.

    The constants are reported in band form (``c0 = k0/(1-eps1)``,
    ``c1 = k1/(1-eps0)``) so that the constant llr levels are ``-log c0`` and
    ``log c1`` as for bands.
    """
    for e in (eps0, eps1):
        if not 0 <= e < 0.5:
            raise ValueError("eps must lie in [0, 0.5)")
    grid = check_same_grid(p0, p1)
    band0 = DensityBand.from_arrays(grid, (1 - eps0) * p0.values, np.full(grid.n, math.inf))
    band1 = DensityBand.from_arrays(grid, (1 - eps1) * p1.values, np.full(grid.n, math.inf))
    w = grid.weights
    lo0, lo1 = band0.lower.values, band1.lower.values
    m = np.maximum(lo0, lo1)
    if w @ m <= 1.0:
        # the two sets share a distribution
        return _make_pair(m, m, 1.0, 1.0, band0, band1, breakdown=True,
                          scalars={"eps0": eps0, "eps1": eps1})
    if eps0 == 0 and eps1 == 0:
        return _make_pair(p0.values, p1.values, 1.0, 1.0, band0, band1,
                          scalars={"eps0": eps0, "eps1": eps1})
    q0, k0 = project(band0, p1.values)
    q1, k1 = project(band1, p0.values)
    c0, c1 = k0 / (1 - eps1), k1 / (1 - eps0)
    return _make_pair(q0, q1, c0, c1, band0, band1, scalars={"eps0": eps0, "eps1": eps1})


def contamination_outliers(pair: LfdPair, p0: GridDensity, p1: GridDensity, eps0: float, eps1: float):
    """Implied outlier densities ``h_i = (q_i - (1-eps_i) p_i) / eps_i``."""
    h0 = (pair.q0.values - (1 - eps0) * p0.values) / eps0
    h1 = (pair.q1.values - (1 - eps1) * p1.values) / eps1
    return h0, h1


def breakdown_point(p0: GridDensity, p1: GridDensity, tol: float = 1e-4) -> float:
    """Smallest shared eps at which the contamination LFDs coincide (bisection)."""
    check_same_grid(p0, p1)
    if np.max(np.abs(p0.values - p1.values)) <= 1e-9:
        return 0.0
    top = 0.5 - 1e-12
    if not solve_contamination_lfds(p0, p1, top, top).breakdown:
        return 0.5
    lo, hi = 0.0, top
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if solve_contamination_lfds(p0, p1, mid, mid).breakdown:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# f-divergence balls


def solve_fball_lfds(ball0: FDivBall, ball1: FDivBall, mode: str = "auto") -> LfdPair:
    eq = equivalent_band_for_ball(ball0, ball1, mode=mode)
    pair = solve_band_lfds(eq.band0, eq.band1)
    scalars = {"a0": eq.a0, "b0": eq.b0, "a1": eq.a1, "b1": eq.b1, "band_mode": eq.mode}
    return LfdPair(pair.q0, pair.q1, pair.c0, pair.c1, pair.llr, pair.region_labels, pair.breakdown,
                   pair.iterations, pair.band0, pair.band1, scalars)


def solve_lfds(set0: UncertaintySet, set1: UncertaintySet) -> LfdPair:
    """Dispatch on the set types (both sets must be of the same kind for balls)."""
    if isinstance(set0, FDivBall) and isinstance(set1, FDivBall):
        return solve_fball_lfds(set0, set1)
    if isinstance(set0, EpsContamination) and isinstance(set1, EpsContamination):
        return solve_contamination_lfds(set0.nominal, set1.nominal, set0.eps, set1.eps)
    return solve_band_lfds(as_band(set0), as_band(set1))


def pair_from_densities(q0: GridDensity, q1: GridDensity) -> LfdPair:
    """Wrap an arbitrary density pair (e.g. the nominals) as an LfdPair."""
    grid = check_same_grid(q0, q1)
    llr = log_ratio(q1.values, q0.values)
    labels = np.full(grid.n, RegionLabel.LOWER0_LOWER1.value, dtype=object)
    return LfdPair(q0, q1, 1.0, 1.0, GridFunction(grid, llr, allow_inf=True), labels)


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class CriterionReport:
    criterion: int
    tested: tuple
    worst_violation: float
    n_samples: int
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "tested": list(self.tested),
                "worst_violation": self.worst_violation, "n_samples": self.n_samples,
                "tolerance": self.tolerance, "pass": self.passed}


VERIFY_LAMBDAS = np.exp(np.linspace(-4.0, 4.0, 25))
VERIFY_GENERATORS = (dc.KL, dc.CHI_SQUARED, dc.SQUARED_HELLINGER)
SAMPLER_SLACK = 1e-4


def sample_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream for (seed, key...), independent of evaluation order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def _smooth_profile(rng, x):
    span = x[-1] - x[0]
    g = np.zeros_like(x)
    for _ in range(rng.integers(1, 5)):
        freq = rng.uniform(0.2, 4.0) * 2 * math.pi / span
        g += rng.normal() * np.cos(freq * x + rng.uniform(0, 2 * math.pi))
    return rng.uniform(0.2, 3.0) * g


def sample_band(band: DensityBand, rng: np.random.Generator) -> GridDensity:
    """Random member of a band: a randomly reshaped nominal projected into it."""
    x = band.grid.x
    try:
        base = band_stats(band)[1].values
    except ValueError:
        base = np.ones_like(x)
    r = base * np.exp(_smooth_profile(rng, x)) + 1e-300
    if rng.uniform() < 0.3:
        # push mass towards one side, including the far tails
        r = r * np.exp(rng.normal() * 0.5 * (x - x.mean()) / x.std())
    q, _ = project(band, r)
    return GridDensity.normalized(band.grid, q)


def sample_contamination(m: EpsContamination, rng: np.random.Generator) -> GridDensity:
    grid = m.grid
    x = grid.x
    h = np.zeros(grid.n)
    for _ in range(rng.integers(1, 4)):
        width = rng.uniform(2, 40) * grid.dx
        centre = rng.uniform(x[0], x[-1])
        h += rng.uniform(0.1, 1.0) * ((x >= centre - width / 2) & (x <= centre + width / 2))
    if not h.any():
        h[rng.integers(grid.n)] = 1.0
    h = h / (grid.weights @ h)
    u = rng.uniform()
    v = (1 - m.eps) * m.nominal.values + m.eps * (u * h + (1 - u) * m.nominal.values)
    return GridDensity.normalized(grid, v)


def sample_fball(ball: FDivBall, rng: np.random.Generator) -> GridDensity:
    """Exponential tilt of the nominal scaled so the divergence is a random fraction of the radius."""
    p = ball.nominal
    x = p.x
    mu = float(p.masses @ x)
    sd = math.sqrt(max(float(p.masses @ (x - mu) ** 2), 1e-300))
    kind = rng.integers(3)
    if kind == 0:
        stat = (x - mu) / sd
    elif kind == 1:
        stat = ((x - mu) / sd) ** 2
    else:
        stat = _smooth_profile(rng, x)
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    target = rng.uniform() * ball.radius

    def tilted(s):
        e = sign * s * stat
        return GridDensity.normalized(p.grid, p.values * np.exp(e - e.max()))

    def gap(s):
        return dc.f_divergence(ball.f, tilted(s), p) - target

    s_hi = 1.0
    while gap(s_hi) < 0 and s_hi < 64:
        s_hi *= 2
    if gap(s_hi) < 0:
        return tilted(s_hi)
    s = optimize.brentq(gap, 0.0, s_hi, xtol=1e-12)
    return tilted(s)


def sample_member(s: UncertaintySet, rng: np.random.Generator) -> GridDensity:
    if isinstance(s, DensityBand):
        out = sample_band(s, rng)
        ok = s.contains(out, 1e-9)
    elif isinstance(s, EpsContamination):
        out = sample_contamination(s, rng)
        ok = contamination_to_band_contains(s, out)
    else:
        out = sample_fball(s, rng)
        ok = s.contains(out, 1e-9)
    if not ok:
        raise RuntimeError("sampled density violates its uncertainty set")
    return out


def contamination_to_band_contains(m: EpsContamination, p: GridDensity, tol: float = 1e-9) -> bool:
    return bool(np.all(p.values >= (1 - m.eps) * m.nominal.values - tol))


def verify_lfd_criteria(pair: LfdPair, set0: UncertaintySet, set1: UncertaintySet,
                        n_samples: int = 200, seed: int = 0, tol: float = 1e-6,
                        slack: float = SAMPLER_SLACK, test_level: bool = False) -> list[CriterionReport]:
    """Check stochastic dominance, minimum f-divergence and maximum weighted
    sum error of ``pair`` against ``n_samples`` random feasible pairs.

    Criterion 1 thresholds ``pair.llr``.  Criterion 3 compares the minimum
    weighted sum errors ``L(lam P1 || P0)``; with ``test_level`` it instead
    compares the weighted sum error of the test that decides H1 when
    ``llr > -log lam``, so a corrupted statistic is caught as well.
    """
    q0, q1 = pair.q0, pair.q1
    lams = VERIFY_LAMBDAS
    llr = pair.llr.values
    thresholds = np.log(lams)
    above = llr[None, :] > thresholds[:, None]
    mq0, mq1 = q0.masses, q1.masses
    sd0_q = above @ mq0
    sd1_q = (~above) @ mq1
    decide1 = llr[None, :] > -thresholds[:, None]

    def weighted_error(p0, p1):
        if test_level:
            return decide1 @ p0.masses + lams * ((~decide1) @ p1.masses)
        return np.array([dc.weighted_affinity(l, p0, p1) for l in lams])

    L_q = weighted_error(q0, q1)
    D_q = np.array([dc.f_divergence(f, q1, q0) for f in VERIFY_GENERATORS])

    worst = np.full(3, -np.inf)
    for i in range(n_samples):
        p0 = sample_member(set0, sample_rng(seed, i, 0))
        p1 = sample_member(set1, sample_rng(seed, i, 1))
        m0, m1 = p0.masses, p1.masses
        v1 = max(np.max(above @ m0 - sd0_q), np.max((~above) @ m1 - sd1_q))
        v3 = np.max(weighted_error(p0, p1) - L_q)
        D_p = np.array([dc.f_divergence(f, p1, p0) for f in VERIFY_GENERATORS])
        # heavy-tailed pairs reach chi-square values near 1e30, so compare relatively
        v2 = np.max((D_q - D_p) / np.maximum(1.0, np.abs(D_p)))
        worst = np.maximum(worst, [v1, v2, v3])

    limit = tol + slack
    lam_list = tuple(float(l) for l in lams)
    gens = tuple(f.family for f in VERIFY_GENERATORS)
    return [
        CriterionReport(1, lam_list, float(worst[0]), n_samples, limit, bool(worst[0] <= limit)),
        CriterionReport(2, gens, float(worst[1]), n_samples, limit, bool(worst[1] <= limit)),
        CriterionReport(3, lam_list, float(worst[2]), n_samples, limit, bool(worst[2] <= limit)),
    ]


# ---------------------------------------------------------------------------
# serialization


LFD_COLUMNS = ("x", "q0", "q1", "llr", "region_label")


def pair_rows(pair: LfdPair):
    x = pair.grid.x
    for i in range(pair.grid.n):
        yield (x[i], pair.q0.values[i], pair.q1.values[i], pair.llr.values[i], pair.region_labels[i])
