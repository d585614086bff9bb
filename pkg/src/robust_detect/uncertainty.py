"""Uncertainty sets: density bands, epsilon-contamination and f-divergence balls."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import optimize

from .density import FDivGenerator, GridDensity, GridFunction, Grid, check_same_grid, f_divergence

MASS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DensityBand:
    """Pointwise envelope ``lower <= p <= upper``; ``upper`` may be +inf."""

    lower: GridFunction
    upper: GridFunction
    kind = "band"

    def __post_init__(self):
        check_same_grid(self.lower, self.upper)
        lo, hi = self.lower.values, self.upper.values
        if not np.isfinite(lo).all():
            raise ValueError("lower bound must be finite")
        if (lo < 0).any():
            raise ValueError("lower bound must be non-negative")
        if (hi < lo).any():
            raise ValueError("upper bound below lower bound")
        if self.lower_mass > 1 + MASS_TOL:
            raise ValueError(f"lower bound integrates to {self.lower_mass:.12g} > 1")
        if self.upper_mass < 1 - MASS_TOL:
            raise ValueError(f"upper bound integrates to {self.upper_mass:.12g} < 1")

    @classmethod
    def from_arrays(cls, grid: Grid, lower, upper) -> "DensityBand":
        return cls(GridFunction(grid, lower), GridFunction(grid, upper, allow_inf=True))

    @property
    def grid(self) -> Grid:
        return self.lower.grid

    @property
    def lower_mass(self) -> float:
        return float(self.grid.weights @ self.lower.values)

    @property
    def upper_mass(self) -> float:
        hi = self.upper.values
        if np.isinf(hi).any():
            return math.inf
        return float(self.grid.weights @ hi)

    def contains(self, p: GridDensity, tol: float = 1e-9) -> bool:
        return self.violation(p) <= tol

    def violation(self, p: GridDensity) -> float:
        check_same_grid(self.lower, p)
        v = p.values
        below = np.max(self.lower.values - v)
        with np.errstate(invalid="ignore"):
            above = np.max(np.where(np.isinf(self.upper.values), -np.inf, v - self.upper.values))
        return float(max(below, above, 0.0))


@dataclass(frozen=True, eq=False)
class EpsContamination:
    nominal: GridDensity
    eps: float
    kind = "contamination"

    def __post_init__(self):
        if not (0.0 <= self.eps < 0.5):
            raise ValueError("eps must lie in [0, 0.5)")

    @property
    def grid(self) -> Grid:
        return self.nominal.grid


@dataclass(frozen=True, eq=False)
class FDivBall:
    nominal: GridDensity
    f: FDivGenerator
    radius: float
    kind = "fball"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        if not self.f.twice_differentiable:
            raise ValueError("f-divergence balls need a twice differentiable f")

    @property
    def grid(self) -> Grid:
        return self.nominal.grid

    def contains(self, p: GridDensity, tol: float = 1e-9) -> bool:
        return f_divergence(self.f, p, self.nominal) <= self.radius + tol


UncertaintySet = Union[DensityBand, EpsContamination, FDivBall]


def band_from_scaled_nominal(nominal: GridDensity, a: float, b: float) -> DensityBand:
    if not 0 <= a <= 1:
        raise ValueError("need 0 <= a <= 1")
    if not b >= 1:
        raise ValueError("need b >= 1")
    v = nominal.values
    upper = np.full_like(v, math.inf) if math.isinf(b) else b * v
    return DensityBand.from_arrays(nominal.grid, a * v, upper)


def contamination_to_band(m: EpsContamination) -> DensityBand:
    v = m.nominal.values
    return DensityBand.from_arrays(m.nominal.grid, (1 - m.eps) * v, np.full_like(v, math.inf))


def band_stats(b: DensityBand) -> tuple[float, GridDensity]:
    """Outlier ratio ``1 - int lower`` and the nominal density ``lower / (1 - eps)``."""
    mass = b.lower_mass
    if mass <= 0:
        raise ValueError("lower bound is identically zero; nominal undefined")
    eps = max(0.0, 1.0 - mass)
    return eps, GridDensity.normalized(b.grid, b.lower.values, name="nominal")


def as_band(s: UncertaintySet) -> DensityBand:
    """Band view of a set; f-balls have no single-set band form."""
    if isinstance(s, DensityBand):
        return s
    if isinstance(s, EpsContamination):
        return contamination_to_band(s)
    raise TypeError("f-divergence balls need equivalent_band_for_ball")


def set_nominal(s: UncertaintySet) -> GridDensity:
    if isinstance(s, DensityBand):
        return band_stats(s)[1]
    return s.nominal


class BallBreakdownError(ValueError):
    """The balls are too large for the equivalent band search to bracket."""


@dataclass(frozen=True)
class EquivalentBand:
    band0: DensityBand
    band1: DensityBand
    a0: float
    b0: float
    a1: float
    b1: float
    mode: str


_B_MAX = 1e6
_BREAKDOWN_DIV = 1e3


def equivalent_band_for_ball(ball0: FDivBall, ball1: FDivBall, tol: float = 1e-6,
                             mode: str = "auto") -> EquivalentBand:
    """Scaled-nominal bands whose band LFDs sit on the surface of both balls.

    ``mode="shared"`` uses one pair of scalars for both hypotheses
    (a0 = a1 = t, b0 = b1 = b): an inner root search on b matches the first
    radius, an outer one on t matches the second.  ``mode="symmetric"`` uses
    b_i = 2 - a_i with one scalar per hypothesis.  ``auto`` tries shared
    first and falls back to symmetric when shared cannot be bracketed or is
    degenerate (both divergences move together, e.g. mirror-image problems).
    """
    from .lfd import solve_band_lfds

    check_same_grid(ball0.nominal, ball1.nominal)
    n0, n1 = ball0.nominal, ball1.nominal

    def divs(a0, b0, a1, b1):
        pair = solve_band_lfds(band_from_scaled_nominal(n0, a0, b0),
                               band_from_scaled_nominal(n1, a1, b1), tol=1e-10)
        if pair.breakdown:
            # finite stand-in so the root finders keep a sign change
            return _BREAKDOWN_DIV, _BREAKDOWN_DIV
        return (f_divergence(ball0.f, pair.q0, n0), f_divergence(ball1.f, pair.q1, n1))

    def finish(a0, b0, a1, b1, used):
        return EquivalentBand(band_from_scaled_nominal(n0, a0, b0), band_from_scaled_nominal(n1, a1, b1),
                              a0, b0, a1, b1, used)

    if mode not in ("auto", "shared", "symmetric"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("auto", "shared"):
        try:
            return finish(*_shared_search(divs, ball0.radius, ball1.radius, tol), "shared")
        except BallBreakdownError:
            if mode == "shared":
                raise
    return finish(*_symmetric_search(divs, ball0.radius, ball1.radius, tol), "symmetric")


def _root(fun, lo, hi, tol):
    flo, fhi = fun(lo), fun(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise BallBreakdownError("cannot bracket the ball radius")
    return optimize.brentq(fun, lo, hi, xtol=tol, rtol=1e-12)


def _shared_search(divs, z0, z1, tol):
    # inner: b so that D0 = z0 at a = t, working in log b
    def b_for(t):
        g = lambda lb: divs(t, math.exp(lb), t, math.exp(lb))[0] - z0
        return math.exp(_root(g, 0.0, math.log(_B_MAX), tol))

    # b = 1 pins q0 to the nominal, so only the upper end of t is limited:
    # past t_hi even an enormous b cannot reach the radius
    t_lo = 1e-6
    t_hi = _root(lambda t: divs(t, _B_MAX, t, _B_MAX)[0] - z0, t_lo, 1.0, tol)
    if t_hi - t_lo < 10 * tol:
        raise BallBreakdownError("shared-scalar family is degenerate")

    def h(t):
        b = b_for(t)
        return divs(t, b, t, b)[1] - z1

    # a derivative this small means both divergences track each other
    hl, hh = h(t_lo + tol), h(t_hi - tol)
    if max(abs(hl), abs(hh)) < 1e-3 * z1:
        raise BallBreakdownError("shared-scalar family is degenerate")
    t = _root(h, t_lo + tol, t_hi - tol, tol)
    b = b_for(t)
    _check_residual(divs(t, b, t, b), z0, z1)
    return t, b, t, b


def _symmetric_search(divs, z0, z1, tol):
    def a1_for(a0):
        g = lambda a1: divs(a0, 2 - a0, a1, 2 - a1)[1] - z1
        return _root(g, 0.0, 1.0, tol)

    def h(a0):
        a1 = a1_for(a0)
        return divs(a0, 2 - a0, a1, 2 - a1)[0] - z0

    a0 = _root(h, 0.0, 1.0, tol)
    a1 = a1_for(a0)
    _check_residual(divs(a0, 2 - a0, a1, 2 - a1), z0, z1)
    return a0, 2 - a0, a1, 2 - a1


def _check_residual(d, z0, z1, tol=1e-4):
    if abs(d[0] - z0) > tol or abs(d[1] - z1) > tol:
        raise BallBreakdownError(f"ball surfaces not reached: divergences {d[0]:.6g}, {d[1]:.6g}")
