"""Fixed-sample-size likelihood-ratio tests with exact error probabilities.

The single-sample statistic is the grid log-likelihood ratio, linearly
interpolated inside each grid cell.  Under a grid density every cell carries
its trapezoid mass, spread uniformly in x, so the statistic is uniform on the
interval spanned by the cell's two llr values.  Flat cells (and constant
regions of an LFD pair) become point masses.  Sums of N i.i.d. statistics are
computed by convolution that keeps atoms exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import density as dc
from .density import GridDensity, GridFunction, check_same_grid

DEFAULT_BINS = 2048
ATOM_CAP = 20000
ATOM_TOL = 1e-12
MASS_TOL = 1e-8
_CHUNK = 512
_DIRECT_LIMIT = 2e9


def _atom_tol(v):
    return ATOM_TOL * np.maximum(1.0, np.abs(v))


def merge_atoms(values: np.ndarray, masses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort atoms and merge values closer than the atom tolerance."""
    values = np.asarray(values, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if values.size == 0:
        return values.copy(), masses.copy()
    order = np.argsort(values, kind="stable")
    v, m = values[order], masses[order]
    with np.errstate(invalid="ignore"):
        gap = np.diff(v) > _atom_tol(v[:-1])
    gap |= ~np.isfinite(v[:-1]) & (v[1:] != v[:-1])
    start = np.concatenate(([True], gap))
    groups = np.cumsum(start) - 1
    out_m = np.bincount(groups, weights=m)
    out_v = v[start]
    return out_v, out_m


@dataclass(frozen=True, eq=False)
class LlrDistribution:
    """Atoms plus a histogram on uniform bins ``origin + k * width``.

    Inside a bin the mass is treated as uniform.  Atom values may be +-inf
    (one hypothesis density vanishes).  ``approximate`` is set when the atom
    cap forced atoms into the histogram.
    """

    atom_values: np.ndarray
    atom_masses: np.ndarray
    origin: float
    width: float
    bin_masses: np.ndarray
    approximate: bool = False
    _tails: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("bin width must be positive")
        if len(self.atom_values) != len(self.atom_masses):
            raise ValueError("atom arrays differ in length")

    @property
    def n_bins(self) -> int:
        return len(self.bin_masses)

    @property
    def edges(self) -> np.ndarray:
        return self.origin + self.width * np.arange(self.n_bins + 1)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return [(float(v), float(m)) for v, m in zip(self.atom_values, self.atom_masses) if m > 0]

    @property
    def total_mass(self) -> float:
        return float(self.atom_masses.sum() + self.bin_masses.sum())

    def _tail(self, which):
        if which not in self._tails:
            m = self.bin_masses
            if which == "below":
                self._tails[which] = np.concatenate(([0.0], np.cumsum(m)))
            else:
                self._tails[which] = np.concatenate((np.cumsum(m[::-1])[::-1], [0.0]))
        return self._tails[which]

    def mass_at(self, t: float) -> float:
        if math.isinf(t):
            return float(self.atom_masses[self.atom_values == t].sum())
        near = np.abs(self.atom_values - t) <= _atom_tol(t)
        return float(self.atom_masses[near].sum())

    def mass_above(self, t: float) -> float:
        """P(statistic > t), atoms at t excluded."""
        if t == math.inf:
            return 0.0
        if math.isinf(t):
            sel = self.atom_values > t
        else:
            sel = self.atom_values > t + _atom_tol(t)
        hist = 0.0 if t == -math.inf else float(np.interp(t, self.edges, self._tail("above")))
        if t == -math.inf:
            hist = float(self.bin_masses.sum())
        return float(self.atom_masses[sel].sum()) + hist

    def mass_below(self, t: float) -> float:
        """P(statistic < t), atoms at t excluded."""
        if t == -math.inf:
            return 0.0
        if math.isinf(t):
            sel = self.atom_values < t
            hist = float(self.bin_masses.sum())
        else:
            sel = self.atom_values < t - _atom_tol(t)
            hist = float(np.interp(t, self.edges, self._tail("below")))
        return float(self.atom_masses[sel].sum()) + hist

    def moments(self) -> tuple[float, float]:
        """Mean and variance (finite atoms only; bins uniform)."""
        fin = np.isfinite(self.atom_values)
        av, am = self.atom_values[fin], self.atom_masses[fin]
        c = self.edges[:-1] + 0.5 * self.width
        m = self.bin_masses
        tot = am.sum() + m.sum()
        mean = (am @ av + m @ c) / tot
        second = (am @ av**2 + m @ (c**2 + self.width**2 / 12.0)) / tot
        return float(mean), float(second - mean**2)

    def to_rows(self):
        rows = [("atom", float(v), float(v), float(m)) for v, m in zip(self.atom_values, self.atom_masses)]
        e = self.edges
        rows += [("bin", float(e[k]), float(e[k + 1]), float(self.bin_masses[k])) for k in range(self.n_bins)]
        return rows


LLR_DIST_COLUMNS = ("kind", "lo", "hi", "mass")


@dataclass(frozen=True)
class RandomizedTest:
    """Decide H1 if llr > t, H0 if llr < t, H1 with probability gamma at t."""

    log_threshold: float
    gamma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class RocCurve:
    alpha: np.ndarray
    power: np.ndarray
    log_threshold: np.ndarray
    gamma: np.ndarray
    n: int

    def power_at(self, alpha) -> np.ndarray:
        """Power of the best randomized test at the given false-alarm levels."""
        return np.interp(alpha, self.alpha, self.power)

    def to_rows(self):
        return [(float(a), float(p), float(t), float(g))
                for a, p, t, g in zip(self.alpha, self.power, self.log_threshold, self.gamma)]


ROC_COLUMNS = ("alpha", "power", "log_threshold", "gamma")


def _flat_cells(llr: np.ndarray, labels) -> np.ndarray:
    a, b = llr[:-1], llr[1:]
    with np.errstate(invalid="ignore"):
        flat = (a == b) | (np.isfinite(a) & np.isfinite(b) & (np.abs(b - a) <= _atom_tol(a)))
    if labels is not None:
        lab = np.asarray(labels, dtype=object)
        const = np.array([str(l).startswith("CONST") for l in lab])
        flat |= const[:-1] & const[1:] & (lab[:-1] == lab[1:])
    return flat


def _bin_uniform_cells(lo, hi, mass, edges) -> np.ndarray:
    """Masses of uniform cell laws U[lo, hi] falling in each bin."""
    out_cdf = np.zeros(len(edges))
    width = hi - lo
    point = width <= 1e-14 * max(1.0, edges[-1] - edges[0])
    for s in range(0, len(lo), _CHUNK):
        a, b, m = lo[s:s + _CHUNK, None], hi[s:s + _CHUNK, None], mass[s:s + _CHUNK, None]
        w = np.where(point[s:s + _CHUNK, None], 1.0, b - a)
        frac = np.clip((edges[None, :] - a) / w, 0.0, 1.0)
        frac = np.where(point[s:s + _CHUNK, None], (edges[None, :] >= a).astype(float), frac)
        out_cdf += (m * frac).sum(axis=0)
    bins = np.diff(out_cdf)
    # point masses on the outer edges belong to the end bins
    bins[0] += out_cdf[0]
    bins[-1] += float(mass.sum()) - out_cdf[-1]
    return np.maximum(bins, 0.0)


def llr_distribution(llr: GridFunction, p: GridDensity, n_bins: int = DEFAULT_BINS,
                     labels=None) -> LlrDistribution:
    """Law of the interpolated llr under ``p``.

    ``labels`` are LFD region labels; cells inside one constant region become
    a single atom at that region's llr value.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    check_same_grid(llr, p)
    l = np.asarray(llr.values, dtype=float)
    cell_mass = np.diff(p.cdf())
    flat = _flat_cells(l, labels)
    a, b = l[:-1], l[1:]

    # cells touching an infinite llr are infinite almost surely
    pinf = (a == np.inf) | (b == np.inf)
    ninf = (a == -np.inf) | (b == -np.inf)
    if (pinf & ninf & (cell_mass > 0)).any():
        raise ValueError("llr jumps from -inf to +inf inside a cell with positive mass")
    atom_v = [np.where(pinf, np.inf, -np.inf)[pinf | ninf]]
    atom_m = [cell_mass[pinf | ninf]]
    cont = ~(pinf | ninf)

    fl = flat & cont
    if fl.any():
        vals = a[fl].copy()
        if labels is not None:
            lab = np.asarray(labels, dtype=object)[:-1][fl]
            for name in set(lab):
                sel = lab == name
                if str(name).startswith("CONST"):
                    vals[sel] = np.median(vals[sel])
        atom_v.append(vals)
        atom_m.append(cell_mass[fl])
    av, am = merge_atoms(np.concatenate(atom_v), np.concatenate(atom_m))

    cont &= ~flat
    finite = l[np.isfinite(l)]
    lo_all = float(finite.min()) if finite.size else 0.0
    hi_all = float(finite.max()) if finite.size else 0.0
    if hi_all - lo_all <= 1e-12 * max(1.0, abs(lo_all)):
        hi_all = lo_all + 1.0
    edges = np.linspace(lo_all, hi_all, n_bins + 1)
    width = (hi_all - lo_all) / n_bins
    lo, hi = np.minimum(a[cont], b[cont]), np.maximum(a[cont], b[cont])
    bins = _bin_uniform_cells(lo, hi, cell_mass[cont], edges) if cont.any() else np.zeros(n_bins)
    return LlrDistribution(av, am, lo_all, width, bins)


def pair_llr_distributions(pair, p0: GridDensity, p1: GridDensity, n_bins: int = DEFAULT_BINS):
    return (llr_distribution(pair.llr, p0, n_bins, pair.region_labels),
            llr_distribution(pair.llr, p1, n_bins, pair.region_labels))


def _conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size * b.size <= _DIRECT_LIMIT:
        return np.convolve(a, b)
    from scipy.signal import fftconvolve
    return np.maximum(fftconvolve(a, b), 0.0)


def _deposit(target: np.ndarray, origin: float, width: float, pos: np.ndarray, masses: np.ndarray):
    """Add point masses at ``pos`` splitting linearly between bin centres."""
    u = (pos - origin) / width - 0.5
    k = np.floor(u).astype(np.int64)
    frac = u - k
    n = len(target)
    for idx, w in ((k, 1.0 - frac), (k + 1, frac)):
        np.add.at(target, np.clip(idx, 0, n - 1), masses * w)


def convolve(d1: LlrDistribution, d2: LlrDistribution, atom_cap: int = ATOM_CAP) -> LlrDistribution:
    """Law of the sum of independent statistics with the two laws."""
    h = d1.width
    if abs(d2.width - h) > 1e-12 * h:
        raise ValueError("convolution needs equal bin widths")
    if np.isinf(d1.atom_values[d1.atom_masses > 0]).any() or np.isinf(d2.atom_values[d2.atom_masses > 0]).any():
        signs = set(np.sign(d1.atom_values[np.isinf(d1.atom_values) & (d1.atom_masses > 0)])) | \
            set(np.sign(d2.atom_values[np.isinf(d2.atom_values) & (d2.atom_masses > 0)]))
        if len(signs) > 1:
            raise ValueError("cannot add llr atoms at +inf and -inf")

    # atoms x atoms
    with np.errstate(invalid="ignore"):
        av = np.add.outer(d1.atom_values, d2.atom_values).ravel()
    am = np.multiply.outer(d1.atom_masses, d2.atom_masses).ravel()
    av = np.where(np.isnan(av), 0.0, av)
    av, am = merge_atoms(av, am)

    # output bin grid aligned with the bin x bin origin
    base = d1.origin + d2.origin
    fa1 = d1.atom_values[np.isfinite(d1.atom_values)]
    fa2 = d2.atom_values[np.isfinite(d2.atom_values)]
    lo_c, hi_c = [base], [base + (d1.n_bins + d2.n_bins) * h]
    if fa1.size:
        lo_c.append(fa1.min() + d2.origin)
        hi_c.append(fa1.max() + d2.origin + (d2.n_bins + 1) * h)
    if fa2.size:
        lo_c.append(fa2.min() + d1.origin)
        hi_c.append(fa2.max() + d1.origin + (d1.n_bins + 1) * h)
    shift = int(math.ceil((base - min(lo_c)) / h - 1e-9))
    origin = base - shift * h
    n_out = int(math.ceil((max(hi_c) - origin) / h - 1e-9)) + 1
    bins = np.zeros(n_out)

    # bins x bins: the sum of two cell-uniform laws is a triangle spanning two bins
    c = _conv(d1.bin_masses, d2.bin_masses)
    bins[shift:shift + len(c)] += 0.5 * c
    bins[shift + 1:shift + 1 + len(c)] += 0.5 * c

    # atoms x bins: shifted histograms, split linearly between neighbouring bins
    inf_mass = {}
    for da, db in ((d1, d2), (d2, d1)):
        for v, m in zip(da.atom_values, da.atom_masses):
            if m == 0:
                continue
            if math.isinf(v):
                inf_mass[v] = inf_mass.get(v, 0.0) + m * db.bin_masses.sum()
                continue
            off = max((v + db.origin - origin) / h, 0.0)
            k = int(math.floor(off))
            frac = off - k
            seg = m * db.bin_masses
            bins[k:k + len(seg)] += (1.0 - frac) * seg
            if frac > 0:
                bins[k + 1:k + 1 + len(seg)] += frac * seg
    if inf_mass:
        av, am = merge_atoms(np.concatenate((av, list(inf_mass))), np.concatenate((am, list(inf_mass.values()))))

    approximate = d1.approximate or d2.approximate
    if len(av) > atom_cap:
        # keep the heaviest atoms; the rest become histogram mass
        keep = np.zeros(len(av), bool)
        keep[np.argsort(am)[-atom_cap:]] = True
        keep |= np.isinf(av)
        _deposit(bins, origin, h, av[~keep], am[~keep])
        av, am = av[keep], am[keep]
        approximate = True
    return LlrDistribution(av, am, origin, h, _trim(bins), approximate)


def _trim(bins: np.ndarray) -> np.ndarray:
    # bins are already sized to the exact support; nothing to drop but keep >= 1 bin
    return bins if bins.size else np.zeros(1)


def convolve_n(d: LlrDistribution, n: int, atom_cap: int = ATOM_CAP) -> LlrDistribution:
    """n-fold self-convolution by binary powering."""
    if n < 1:
        raise ValueError("n must be at least 1")
    result, power = None, d
    while True:
        if n & 1:
            result = power if result is None else convolve(result, power, atom_cap)
        n >>= 1
        if not n:
            return result
        power = convolve(power, power, atom_cap)


def test_error_probs(d0: LlrDistribution, d1: LlrDistribution, test: RandomizedTest) -> tuple[float, float]:
    """False alarm ``alpha`` under d0 and miss probability ``beta`` under d1."""
    t, g = test.log_threshold, test.gamma
    alpha = d0.mass_above(t) + g * d0.mass_at(t)
    beta = d1.mass_below(t) + (1.0 - g) * d1.mass_at(t)
    return float(min(max(alpha, 0.0), 1.0)), float(min(max(beta, 0.0), 1.0))


test_error_probs.__test__ = False  # not a pytest test


def test_for_beta(d1: LlrDistribution, beta: float) -> RandomizedTest:
    """Randomized threshold test whose miss probability under d1 equals ``beta``."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    atoms = d1.atom_values[(d1.atom_masses > 0) & np.isfinite(d1.atom_values)]
    cand = np.unique(np.concatenate((d1.edges, atoms)))
    below = np.array([d1.mass_below(t) for t in cand])
    at = np.array([d1.mass_at(t) for t in cand])
    # beta(t, gamma=1) = below(t); beta(t, gamma=0) = below(t) + at(t)
    for t, b, m in zip(cand, below, at):
        if b <= beta <= b + m and m > 0:
            return RandomizedTest(float(t), float(1.0 - (beta - b) / m))
    k = int(np.searchsorted(below + at, beta))
    k = min(max(k, 1), len(cand) - 1)
    lo, hi = cand[k - 1], cand[k]
    b_lo, b_hi = below[k - 1] + at[k - 1], below[k]
    t = lo if b_hi <= b_lo else lo + (beta - b_lo) / (b_hi - b_lo) * (hi - lo)
    return RandomizedTest(float(t), 0.0)


def roc_from_distributions(d0: LlrDistribution, d1: LlrDistribution, n: int = 1) -> RocCurve:
    atoms = np.concatenate((d0.atom_values, d1.atom_values))
    atoms = atoms[np.isfinite(atoms)]
    edges = np.concatenate((d0.edges, d1.edges))
    ts = np.unique(np.concatenate((atoms, edges)))[::-1]
    pts = [(math.inf, 0.0)]
    for t in ts:
        pts += [(t, 0.0), (t, 1.0)]
    pts.append((-math.inf, 1.0))
    alpha, power = [], []
    for t, g in pts:
        a, b = test_error_probs(d0, d1, RandomizedTest(t, g))
        alpha.append(a)
        power.append(1.0 - b)
    alpha = np.maximum.accumulate(np.array(alpha))
    power = np.maximum.accumulate(np.array(power))
    return RocCurve(alpha, power, np.array([p[0] for p in pts]), np.array([p[1] for p in pts]), n)


def roc_curve(pair, eval_p0: GridDensity, eval_p1: GridDensity, n: int = 1,
              n_bins: int = DEFAULT_BINS) -> RocCurve:
    """ROC of the pair's N-sample llr test evaluated under (eval_p0, eval_p1)."""
    d0, d1 = pair_llr_distributions(pair, eval_p0, eval_p1, n_bins)
    return roc_from_distributions(convolve_n(d0, n), convolve_n(d1, n), n)


@dataclass(frozen=True)
class Exponents:
    e0: float
    e1: float
    valid: bool


def asymptotic_exponents(p0: GridDensity, p1: GridDensity, q0: GridDensity, q1: GridDensity) -> Exponents:
    """Error exponents in bits of the q-designed llr test under p."""
    check_same_grid(p0, p1, q0, q1)
    kl = lambda a, b: dc.f_divergence(dc.KL, a, b)
    e0 = (kl(p0, q1) - kl(p0, q0)) / math.log(2.0)
    e1 = (kl(p1, q0) - kl(p1, q1)) / math.log(2.0)
    return Exponents(float(e0), float(e1), bool(e0 > 0 and e1 > 0))


def weighted_sum_error(d0: LlrDistribution, d1: LlrDistribution, lam: float, gamma: float = 0.0) -> float:
    """``alpha + lam * beta`` of the Bayes test for this weight (threshold -log lam)."""
    a, b = test_error_probs(d0, d1, RandomizedTest(-math.log(lam), gamma))
    return a + lam * b
