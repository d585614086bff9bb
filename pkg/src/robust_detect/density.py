"""Densities on a uniform 1-D grid and the similarity measures built on them.

Every integral is a trapezoid sum over the grid, so a density is in effect a
discrete measure with point masses ``w_i * p_i`` where ``w`` are the trapezoid
weights.  All divergences below are exact for that discrete measure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

NORM_TOL = 1e-8


@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max)):
            raise ValueError("grid bounds must be finite")
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be smaller than x_max")
        if int(self.n) != self.n or self.n < 3:
            raise ValueError("a grid needs at least 3 points")
        object.__setattr__(self, "n", int(self.n))

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.n, self.dx)
        w[0] = w[-1] = self.dx / 2
        return w

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "n": self.n}


def _same_grid(a: Grid, b: Grid) -> bool:
    return a == b


def check_same_grid(*items) -> Grid:
    grid = items[0].grid
    for item in items[1:]:
        if not _same_grid(grid, item.grid):
            raise ValueError("objects live on different grids")
    return grid


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real values on a grid; no sign or normalization constraint."""

    grid: Grid
    values: np.ndarray
    allow_inf: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} values, got shape {v.shape}")
        if np.isnan(v).any():
            raise ValueError("NaN in grid function")
        if not self.allow_inf and not np.isfinite(v).all():
            raise ValueError("non-finite values in grid function")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __mul__(self, c: float) -> "GridFunction":
        return GridFunction(self.grid, self.values * c, allow_inf=self.allow_inf)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: Grid
    values: np.ndarray
    name: str = field(default="", compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} values, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("density values must be finite")
        if (v < 0).any():
            raise ValueError("density values must be non-negative")
        total = float(self.grid.weights @ v)
        if abs(total - 1.0) > NORM_TOL:
            raise ValueError(f"density integrates to {total!r}, not 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def normalized(cls, grid: Grid, values, name: str = "") -> "GridDensity":
        v = np.asarray(values, dtype=float)
        total = float(grid.weights @ v)
        if not total > 0:
            raise ValueError("density is identically zero on the grid")
        return cls(grid, v / total, name)

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def masses(self) -> np.ndarray:
        """Point masses ``w_i p_i`` of the discrete measure."""
        return self.grid.weights * self.values

    def cdf(self) -> np.ndarray:
        """CDF at the grid points, cell masses accumulated left to right."""
        v = self.values
        cells = 0.5 * self.grid.dx * (v[:-1] + v[1:])
        return np.concatenate([[0.0], np.cumsum(cells)])

    def as_function(self) -> GridFunction:
        return GridFunction(self.grid, self.values)


# ---------------------------------------------------------------------------
# density construction


def _finite(*vals):
    for v in vals:
        if not math.isfinite(float(v)):
            raise ValueError(f"non-finite density parameter {v!r}")


def _raw_shape(spec: dict, x: np.ndarray) -> np.ndarray:
    kind = spec["kind"]
    if kind == "gaussian":
        mean, var = float(spec["mean"]), float(spec["var"])
        _finite(mean, var)
        if var <= 0:
            raise ValueError("gaussian variance must be positive")
        return np.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2 * math.pi * var)
    if kind == "uniform":
        a, b = float(spec["a"]), float(spec["b"])
        _finite(a, b)
        if not a < b:
            raise ValueError("uniform needs a < b")
        eps = 1e-12 * max(1.0, abs(a), abs(b))
        inside = ((x >= a - eps) & (x <= b + eps)).astype(float)
        return inside / (b - a)
    if kind == "exp_offset":
        a, s, c = float(spec["a"]), float(spec["s"]), float(spec["c"])
        _finite(a, s, c)
        return a * np.exp(s * x) + c
    if kind == "mixture":
        comps = spec["components"]
        weights = np.array([float(c["weight"]) for c in comps])
        _finite(*weights)
        if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        out = np.zeros_like(x)
        for w, c in zip(weights, comps):
            out += w * _raw_shape(c["spec"], x)
        return out
    if kind == "scaled":
        factor = float(spec["factor"])
        _finite(factor)
        return factor * _raw_shape(spec["of"], x)
    raise ValueError(f"unknown density kind {kind!r}")


def evaluate_shape(spec: dict, grid: Grid) -> np.ndarray:
    """Evaluate a density spec on the grid *without* renormalizing.

    Used for density bounds, which are not densities themselves.
    """
    return _raw_shape(spec, grid.x)


def build_density(spec: dict, grid: Grid) -> GridDensity:
    """Construct a density from a spec dict and renormalize it on ``grid``.

    Supported kinds: ``gaussian`` (mean, var), ``uniform`` (a, b),
    ``exp_offset`` (x -> a*exp(s*x) + c), ``mixture`` (components with
    weight/spec) and ``scaled`` (factor, of).  Mass lost to truncation at the
    grid edges is absorbed by the renormalization.
    """
    raw = _raw_shape(spec, grid.x)
    if (raw < 0).any():
        raise ValueError("density spec evaluates to negative values")
    return GridDensity.normalized(grid, raw, name=spec["kind"])


def gaussian(mean: float, var: float, grid: Grid) -> GridDensity:
    return build_density({"kind": "gaussian", "mean": mean, "var": var}, grid)


def uniform(a: float, b: float, grid: Grid) -> GridDensity:
    return build_density({"kind": "uniform", "a": a, "b": b}, grid)


def exp_offset_coefficient(s: float, c: float, lo: float, hi: float, target: float) -> float:
    """Coefficient ``a`` such that ``a*exp(s*x) + c`` integrates to ``target`` on [lo, hi]."""
    if s == 0:
        base = hi - lo
    else:
        base = (math.exp(s * hi) - math.exp(s * lo)) / s
    return (target - c * (hi - lo)) / base


def integrate(f) -> float:
    """Trapezoid integral of a GridFunction or GridDensity."""
    v = np.asarray(f.values, dtype=float)
    if not np.isfinite(v).all():
        raise ValueError("cannot integrate non-finite values")
    return float(f.grid.weights @ v)


def normal_cdf(z):
    return 0.5 * special.erfc(-np.asarray(z) / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# f-divergences


@dataclass(frozen=True)
class FDivGenerator:
    """Convex generator ``f`` with ``f(1) = 0``.

    ``family`` is one of KL, ReverseKL, ChiSquared, SquaredHellinger,
    TotalVariation, Alpha; ``alpha`` is only used by Alpha.
    """

    family: str
    alpha: float = 0.0

    FAMILIES = ("KL", "ReverseKL", "ChiSquared", "SquaredHellinger", "TotalVariation", "Alpha")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ValueError(f"unknown f-divergence family {self.family!r}")
        if self.family == "Alpha" and self.alpha in (0.0, 1.0):
            raise ValueError("alpha must differ from 0 and 1 (use KL / ReverseKL)")

    @property
    def twice_differentiable(self) -> bool:
        return self.family != "TotalVariation"

    def f(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family == "KL":
                return np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
            if self.family == "ReverseKL":
                return np.where(t > 0, -np.log(np.where(t > 0, t, 1.0)), np.inf)
            if self.family == "ChiSquared":
                return (t - 1.0) ** 2
            if self.family == "SquaredHellinger":
                return (np.sqrt(t) - 1.0) ** 2
            if self.family == "TotalVariation":
                return 0.5 * np.abs(t - 1.0)
            a = self.alpha
            return (np.power(t, a) - a * t - (1.0 - a)) / (a * (a - 1.0))

    def df(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family == "KL":
                return np.log(t) + 1.0
            if self.family == "ReverseKL":
                return -1.0 / t
            if self.family == "ChiSquared":
                return 2.0 * (t - 1.0)
            if self.family == "SquaredHellinger":
                return 1.0 - 1.0 / np.sqrt(t)
            if self.family == "TotalVariation":
                return 0.5 * np.sign(t - 1.0)
            a = self.alpha
            return (np.power(t, a - 1.0) - 1.0) / (a - 1.0)

    def d2f(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family == "KL":
                return 1.0 / t
            if self.family == "ReverseKL":
                return 1.0 / t**2
            if self.family == "ChiSquared":
                return np.full_like(t, 2.0)
            if self.family == "SquaredHellinger":
                return 0.5 * np.power(t, -1.5)
            if self.family == "TotalVariation":
                raise ValueError("total variation has no second derivative")
            return np.power(t, self.alpha - 2.0)

    @property
    def f_zero(self) -> float:
        return float(self.f(0.0))

    @property
    def f_inf(self) -> float:
        """Slope at infinity, lim f(t)/t."""
        fam = self.family
        if fam in ("KL", "ChiSquared"):
            return math.inf
        if fam == "ReverseKL":
            return 0.0
        if fam == "SquaredHellinger":
            return 1.0
        if fam == "TotalVariation":
            return 0.5
        a = self.alpha
        return math.inf if a > 1 else 1.0 / (1.0 - a)

    def to_dict(self) -> dict:
        d = {"family": self.family}
        if self.family == "Alpha":
            d["alpha"] = self.alpha
        return d


KL = FDivGenerator("KL")
REVERSE_KL = FDivGenerator("ReverseKL")
CHI_SQUARED = FDivGenerator("ChiSquared")
SQUARED_HELLINGER = FDivGenerator("SquaredHellinger")
TOTAL_VARIATION = FDivGenerator("TotalVariation")


def fdiv_masses(f: FDivGenerator, m1: np.ndarray, m0: np.ndarray) -> float:
    """f-divergence of two discrete measures given by their point masses."""
    m1 = np.asarray(m1, dtype=float)
    m0 = np.asarray(m0, dtype=float)
    both = (m0 > 0) & (m1 > 0)
    only1 = (m0 == 0) & (m1 > 0)
    only0 = (m0 > 0) & (m1 == 0)
    total = float(np.sum(m0[both] * f.f(m1[both] / m0[both])))
    if only0.any():
        total += float(np.sum(m0[only0])) * f.f_zero
    if only1.any():
        total += float(np.sum(m1[only1])) * f.f_inf
    return total


def f_divergence(f: FDivGenerator, p1: GridDensity, p0: GridDensity) -> float:
    """D_f(P1 || P0) = int f(p1/p0) p0 dx.

    Uses 0*f(0/0) = 0 and p0*f(p1/p0) -> p1*f_inf where p0 vanishes.
    """
    check_same_grid(p1, p0)
    val = fdiv_masses(f, p1.masses, p0.masses)
    if val < -1e-10:
        raise ArithmeticError(f"negative f-divergence {val!r}")
    return max(val, 0.0)


def weighted_affinity(lam: float, p0: GridDensity, p1: GridDensity) -> float:
    """L(lam P1 || P0) = int min(p0, lam p1) dx."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    check_same_grid(p0, p1)
    return float(np.sum(np.minimum(p0.masses, lam * p1.masses)))


def weighted_tv(lam: float, p1: GridDensity, p0: GridDensity) -> float:
    """D_TV(lam P1 || P0) = min(1, lam) - L(lam P1 || P0)."""
    return min(1.0, lam) - weighted_affinity(lam, p0, p1)


def _affinity_curve(lams: np.ndarray, m0: np.ndarray, m1: np.ndarray) -> np.ndarray:
    # sum_i min(m0_i, lam m1_i) for all lam at once via sorting on m0/m1
    out = np.empty(len(lams))
    for start in range(0, len(lams), 256):
        chunk = lams[start:start + 256]
        out[start:start + 256] = np.minimum(m0[None, :], chunk[:, None] * m1[None, :]).sum(axis=1)
    return out


def default_lambda_grid() -> np.ndarray:
    return np.geomspace(1e-4, 1e4, 2000)


def _bregman_remainder(f: FDivGenerator, t: np.ndarray, s: float) -> np.ndarray:
    """f(t) - f(s) - (t - s) f'(s), the curvature of f between s and t."""
    return f.f(t) - float(f.f(s)) - (t - s) * float(f.df(s))


def spectral_tail(f: FDivGenerator, m1: np.ndarray, m0: np.ndarray, lo: float, hi: float) -> float:
    """Exact part of the spectral integral lying outside [lo, hi].

    Only points whose ratio m1/m0 lies beyond 1/lo or below 1/hi feel the
    truncation; each contributes m0 times a Bregman remainder of f.
    """
    s_lo, s_hi = 1.0 / lo, 1.0 / hi
    both = (m0 > 0) & (m1 > 0)
    t = m1[both] / m0[both]
    w = m0[both]
    total = 0.0
    big, small = t > s_lo, t < s_hi
    if big.any():
        total += float(np.sum(w[big] * _bregman_remainder(f, t[big], s_lo)))
    if small.any():
        total += float(np.sum(w[small] * _bregman_remainder(f, t[small], s_hi)))
    only1 = (m0 == 0) & (m1 > 0)
    if only1.any():
        total += float(np.sum(m1[only1])) * (f.f_inf - float(f.df(s_lo)))
    only0 = (m0 > 0) & (m1 == 0)
    if only0.any():
        rem = f.f_zero - float(f.f(s_hi)) + s_hi * float(f.df(s_hi))
        total += float(np.sum(m0[only0])) * rem
    return total


def spectral_f_divergence(f: FDivGenerator, p1: GridDensity, p0: GridDensity,
                          lambda_grid=None, tail_tol: float = 1e-4) -> float:
    """D_f(P1 || P0) assembled from weighted total variations.

    Integrates D_TV(lam P1 || P0) against the curvature of the conjugate
    generator t f(1/t), which is f''(1/lam) / lam**3; weighting by f''(lam)
    itself would produce D_f(P0 || P1).  Quadrature is trapezoid in log lam
    over ``lambda_grid``.  The neglected tails are evaluated exactly and the
    call fails if they exceed ``tail_tol``.
    """
    if not f.twice_differentiable:
        raise ValueError("spectral representation needs a twice differentiable f")
    check_same_grid(p1, p0)
    lams = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if (lams <= 0).any() or (np.diff(lams) <= 0).any():
        raise ValueError("lambda grid must be positive and increasing")
    m0, m1 = p0.masses, p1.masses
    tail = spectral_tail(f, m1, m0, lams[0], lams[-1])
    if not tail <= tail_tol:
        raise ValueError(f"lambda grid too narrow: tail estimate {tail:.3g} exceeds {tail_tol:g}")
    tv = np.maximum(np.minimum(1.0, lams) - _affinity_curve(lams, m0, m1), 0.0)
    weight = f.d2f(1.0 / lams) / lams**3
    integrand = tv * weight * lams
    u = np.log(lams)
    return float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(u)))


def f_dissimilarity(f: Callable[[np.ndarray], np.ndarray], z: Sequence[float],
                    ps: Sequence[GridDensity], p0: GridDensity,
                    f_inf: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Weighted f-dissimilarity int f(z_1 p_1/p0, ..., z_K p_K/p0) p0 dx.

    ``f`` maps an array of shape (K, n) to n values.  Where p0 vanishes but
    some p_k does not, the perspective limit needs the recession function
    ``f_inf`` (same calling convention, applied to the weighted densities).
    """
    z = np.asarray(z, dtype=float)
    if len(ps) != len(z):
        raise ValueError("need one weight per density")
    if len(ps) < 1:
        raise ValueError("need at least one density")
    check_same_grid(p0, *ps)
    w = p0.grid.weights
    v0 = p0.values
    vs = np.array([p.values for p in ps]) * z[:, None]
    pos0 = v0 > 0
    total = 0.0
    if pos0.any():
        t = vs[:, pos0] / v0[pos0]
        total += float(np.sum(w[pos0] * v0[pos0] * f(t)))
    rest = ~pos0 & (vs > 0).any(axis=0)
    if rest.any():
        if f_inf is None:
            raise ValueError("p0 vanishes where other densities do not; pass f_inf")
        total += float(np.sum(w[rest] * f_inf(vs[:, rest])))
    return total
