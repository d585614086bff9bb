"""Minimax sequential tests for K hypotheses on a likelihood-ratio grid.

State: the likelihood ratios ``z_k = prod q_k(x_n) / q_0(x_n)`` of the
hypotheses against the run-length distribution.  Hypotheses whose set is the
run-length distribution itself keep ``z_k = 1`` and are not grid axes.

Cost of stopping: ``g(z) = min_d sum_{k != d} lam_k z_k``.  Optimal cost:
``rho = min(g, 1 + D)`` with ``D(z) = int rho(z q/q0) q0``, maximized over the
sets at every state.  ``rho`` is stored on a grid that is uniform in log z
plus an absorbing ``z_k = 0`` node per axis, and it is interpolated
multilinearly in z (not log z), which keeps the interpolant concave along
every axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .density import Grid, GridDensity, check_same_grid, f_dissimilarity
from .lfd import project
from .sampling import stream
from .uncertainty import DensityBand, EpsContamination, as_band

CYCLE_TOL = 1e-6
MAX_CYCLES = 200
_CHUNK = 2048
_LFD_CHUNK_ELEMS = 4_000_000
_TIE_RTOL = 1e-9
_OBJ_RTOL = 1e-13


class SequentialError(RuntimeError):
    """Value iteration or the state LFD search failed."""


# ---------------------------------------------------------------------------
# grid and costs


@dataclass(frozen=True)
class ZGrid:
    """Per-axis nodes ``{0} + exp(linspace(-L, L, m))``."""

    dims: int
    L: float = 15.0
    m: int = 151

    def __post_init__(self):
        if self.dims not in (1, 2):
            raise ValueError("only one or two free likelihood-ratio axes are supported")
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.m < 25:
            raise ValueError("m must be at least 25")

    @property
    def log_axis(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.m)

    @property
    def axis(self) -> np.ndarray:
        return np.concatenate(([0.0], np.exp(self.log_axis)))

    @property
    def step(self) -> float:
        return 2.0 * self.L / (self.m - 1)

    @property
    def mt(self) -> int:
        return self.m + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.mt,) * self.dims

    @property
    def n_states(self) -> int:
        return self.mt ** self.dims

    def state_z(self) -> np.ndarray:
        """z of every state, shape (n_states, dims), row-major."""
        grids = np.meshgrid(*([self.axis] * self.dims), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def origin_index(self) -> int:
        """State with all z = 1 (the centre node of each axis when m is odd)."""
        i = 1 + int(np.argmin(np.abs(self.log_axis)))
        return int(np.ravel_multi_index((i,) * self.dims, self.shape))

    def nearest(self, z: np.ndarray) -> np.ndarray:
        """Nearest state in log z; z = 0 maps to the zero node. ``z`` is (n, dims)."""
        z = np.atleast_2d(z)
        with np.errstate(divide="ignore"):
            u = np.log(z)
        idx = 1 + np.rint((u + self.L) / self.step)
        idx = np.where(z == 0, 0, np.clip(idx, 1, self.m)).astype(np.int64)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def to_dict(self) -> dict:
        return {"dims": self.dims, "L": self.L, "m": self.m}


def stopping_cost(z: Sequence[float], lam: Sequence[float]) -> tuple[float, int]:
    """``g(z)`` and the 1-based decision attaining it (ties to the smallest index)."""
    z, lam = np.asarray(z, float), np.asarray(lam, float)
    if (z < 0).any() or (lam <= 0).any():
        raise ValueError("need z >= 0 and lam > 0")
    g, d = _stopping_costs(z[None, :], lam)
    return float(g[0]), int(d[0])


def _stopping_costs(zfull: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = zfull * lam[None, :]
    K = w.shape[1]
    costs = np.stack([w[:, [k for k in range(K) if k != d]].sum(axis=1) for d in range(K)], axis=1)
    d = np.argmin(costs, axis=1)
    return costs[np.arange(len(d)), d], d + 1


# ---------------------------------------------------------------------------
# interpolation


def _locate(Z: np.ndarray, y: np.ndarray):
    """Cell index and fraction of ``y`` on the node array ``Z`` (clamped at the top)."""
    i = np.clip(np.searchsorted(Z, y, side="right") - 1, 0, len(Z) - 2)
    with np.errstate(invalid="ignore", over="ignore"):
        t = (y - Z[i]) / (Z[i + 1] - Z[i])
    t = np.where(np.isnan(t), 1.0, t)
    return i, np.clip(t, 0.0, 1.0)


def _corners(zgrid: ZGrid, Y: np.ndarray):
    """Flat corner indices and multilinear weights for points ``Y[..., dims]``."""
    Z = zgrid.axis
    locs = [_locate(Z, Y[..., a]) for a in range(zgrid.dims)]
    idx, wts = [], []
    for corner in range(2 ** zgrid.dims):
        flat = 0
        w = 1.0
        for a, (i, t) in enumerate(locs):
            bit = (corner >> a) & 1
            flat = flat * zgrid.mt + (i + bit)
            w = w * (t if bit else 1.0 - t)
        idx.append(flat)
        wts.append(w)
    return idx, wts


def interpolate_rho(rho: np.ndarray, zgrid: ZGrid, Y: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``rho`` (shape zgrid.shape) at ``Y[..., dims]``."""
    flat = np.asarray(rho).ravel()
    idx, wts = _corners(zgrid, np.asarray(Y, float))
    return sum(w * flat[i] for i, w in zip(idx, wts))


# ---------------------------------------------------------------------------
# problem setup


@dataclass(frozen=True, eq=False)
class _Problem:
    grid: Grid
    q0: np.ndarray
    lower: list          # per hypothesis 1..K (index 0 unused)
    upper: list
    free: tuple          # hypotheses that are grid axes (1-based)
    K: int
    centre: dict         # hypothesis -> q0 projected into its band (second ascent start)


def _as_band(s) -> DensityBand:
    if isinstance(s, GridDensity):
        return DensityBand.from_arrays(s.grid, s.values, s.values)
    if isinstance(s, (DensityBand, EpsContamination)):
        return as_band(s)
    raise TypeError("sequential sets must be densities, bands or contamination sets")


def _singleton(b: DensityBand) -> np.ndarray | None:
    lo, hi = b.lower.values, b.upper.values
    if np.isfinite(hi).all() and np.max(hi - lo) <= 1e-12 * max(1.0, np.max(hi)):
        return GridDensity.normalized(b.grid, lo).values
    return None


def _setup(sets) -> _Problem:
    if len(sets) < 3:
        raise ValueError("need the run-length set plus at least two hypotheses")
    bands = [_as_band(s) for s in sets]
    grid = check_same_grid(*[b.lower for b in bands])
    q0 = _singleton(bands[0])
    if q0 is None:
        raise ValueError("the run-length set must be a single distribution")
    K = len(sets) - 1
    free = []
    for k in range(1, K + 1):
        s = _singleton(bands[k])
        if s is None or np.max(np.abs(s - q0)) > 1e-12 * np.max(q0):
            free.append(k)
    if not free:
        free = [1]
    lower = [None] + [b.lower.values for b in bands[1:]]
    upper = [None] + [b.upper.values for b in bands[1:]]
    centre = {k: project(bands[k], q0)[0] for k in free}
    return _Problem(grid, q0, lower, upper, tuple(free), K, centre)


def _full_z(zfree: np.ndarray, prob: _Problem) -> np.ndarray:
    zf = np.ones((zfree.shape[0], prob.K))
    for a, k in enumerate(prob.free):
        zf[:, k - 1] = zfree[:, a]
    return zf


def _initial_q(prob: _Problem, k: int) -> np.ndarray:
    """Start of the ascent: the band's lower bound scaled to unit mass where possible."""
    lo, hi = prob.lower[k], prob.upper[k]
    w = prob.grid.weights
    m = w @ lo
    if m <= 0:
        v = np.where(np.isinf(hi), 1.0, hi)
        return v / (w @ v)
    target = lo / m
    return np.minimum(np.maximum(target, lo), hi) if np.isfinite(hi).all() else target


# ---------------------------------------------------------------------------
# per-state LFDs


def _axis_values(rho: np.ndarray, zgrid: ZGrid, axis: int, other: tuple | None):
    """rho along ``axis`` at every node, the other axis interpolated: (..., mt)."""
    if zgrid.dims == 1:
        return rho[None, None, :]
    i_o, t_o = other
    r = rho if axis == 0 else rho.T          # r[node_axis, node_other]
    rt = r.T                                 # rt[node_other, node_axis]
    return rt[i_o] * (1.0 - t_o)[..., None] + rt[i_o + 1] * t_o[..., None]


def _greedy_update(zk, lo, hi, q0, w, Z, R):
    """Exact maximizer over one coordinate of ``sum_x w q0 r(z q / q0)``.

    ``R[..., node]`` is the objective along the axis (concave piecewise linear
    in y with the given nodes, flat above the top node).  Mass is allocated to
    segments in decreasing order of slope until the density has unit mass.
    Returns the updated densities (S, nx) and the water level per state.
    """
    S, nx = zk.shape[0], len(q0)
    mt = len(Z)
    pos0 = q0 > 0
    q0s = np.where(pos0, q0, 1.0)
    y_lo = zk[:, None] * lo[None, :] / q0s
    with np.errstate(invalid="ignore"):
        y_hi = zk[:, None] * hi[None, :] / q0s
    y_hi = np.where(np.isnan(y_hi), np.inf, y_hi)
    i_start = np.clip(np.searchsorted(Z, y_lo, side="right") - 1, 0, mt - 1)
    i_end = np.searchsorted(Z, y_hi, side="left")
    P = int(max(1, np.max(np.minimum(i_end, mt) - i_start)))
    cells = i_start[..., None] + np.arange(P)
    c = np.minimum(cells, mt - 1)
    c1 = np.minimum(c + 1, mt - 1)
    dz = Z[c1] - Z[c]
    Rb = np.broadcast_to(R, (S, nx, mt)) if R.shape[0] == 1 else R
    Rc = np.take_along_axis(Rb, c, axis=-1)
    Rc1 = np.take_along_axis(Rb, c1, axis=-1)
    slope = np.where((cells < mt - 1) & (dz > 0), (Rc1 - Rc) / np.where(dz > 0, dz, 1.0), 0.0)
    top = np.where(cells < mt - 1, Z[c1], np.inf)
    seg_lo = np.maximum(y_lo[..., None], Z[c])
    seg_hi = np.minimum(y_hi[..., None], top)
    with np.errstate(invalid="ignore"):
        length = np.where((cells <= mt - 1), np.maximum(seg_hi - seg_lo, 0.0), 0.0)
    length = np.where(np.isnan(length), 0.0, length)
    with np.errstate(invalid="ignore"):
        cap = (w * q0s)[None, :, None] * length / np.where(zk > 0, zk, 1.0)[:, None, None]
    # where q0 vanishes the coordinate has no effect on the objective
    no0 = ~pos0
    if no0.any():
        free_cap = np.broadcast_to((w * (hi - lo))[None, :], (S, nx))
        cap[:, no0, :] = 0.0
        slope[:, no0, :] = 0.0
        cap[:, no0, 0] = free_cap[:, no0]
    cap = np.where(np.isnan(cap), 0.0, cap)

    need = max(1.0 - float(w @ lo), 0.0)
    flat_s = slope.reshape(S, -1)
    flat_c = cap.reshape(S, -1)
    order = np.argsort(-flat_s, axis=1, kind="stable")
    cs = np.take_along_axis(flat_c, order, axis=1)
    ss = np.take_along_axis(flat_s, order, axis=1)
    cum = np.cumsum(cs, axis=1)
    b = np.minimum(np.argmax(cum >= need * (1 - 1e-15), axis=1), cs.shape[1] - 1)
    level = ss[np.arange(S), b][:, None]
    # segments tied with the water level share the remaining mass in proportion to capacity
    tie = np.abs(flat_s - level) <= _TIE_RTOL * np.maximum(np.abs(level), 1e-300)
    above = (flat_s > level) & ~tie
    rest = need - np.where(above, flat_c, 0.0).sum(axis=1)
    tie_inf = tie & np.isinf(flat_c)
    tie_fin = tie & ~tie_inf
    fin_cap = np.where(tie_fin, flat_c, 0.0).sum(axis=1)
    frac = np.clip(rest / np.where(fin_cap > 0, fin_cap, 1.0), 0.0, 1.0)
    n_inf = tie_inf.sum(axis=1)
    spill = np.maximum(rest - fin_cap, 0.0) / np.maximum(n_inf, 1)
    filled = np.where(above, flat_c, 0.0)
    filled = filled + np.where(tie_fin, flat_c * frac[:, None], 0.0)
    filled = filled + np.where(tie_inf, spill[:, None], 0.0)
    filled = np.where(np.isfinite(filled), filled, 0.0)
    dq = filled.reshape(S, nx, P).sum(axis=-1) / w[None, :]
    q = lo[None, :] + dq
    nu = zk * level[:, 0]
    return q, nu


def _objective_terms(prob: _Problem, zgrid: ZGrid, zfree: np.ndarray, qs: dict):
    """Points ``Y[s, x, axis] = z q_k / q0`` for the free axes."""
    q0 = prob.q0
    with np.errstate(divide="ignore", invalid="ignore"):
        Y = np.stack([zfree[:, a, None] * qs[k] / q0[None, :] for a, k in enumerate(prob.free)], axis=-1)
    Y = np.where(np.isnan(Y), 0.0, Y)
    return Y


def _continuation(prob: _Problem, zgrid: ZGrid, rho: np.ndarray, zfree: np.ndarray, qs: dict) -> np.ndarray:
    Y = _objective_terms(prob, zgrid, zfree, qs)
    vals = interpolate_rho(rho, zgrid, Y)
    wq = prob.grid.weights * prob.q0
    return vals @ wq


def _random_starts(prob: _Problem, count: int, seed: int) -> list:
    """Feasible starts: q0 reshaped by a random log-normal profile, projected into each band."""
    bands = {k: DensityBand.from_arrays(prob.grid, prob.lower[k], prob.upper[k]) for k in prob.free}
    rng = stream(seed, 0xA5)
    out = []
    for _ in range(count):
        out.append({k: project(bands[k], prob.q0 * np.exp(rng.normal(0.0, 1.5, prob.q0.size)))[0]
                    for k in prob.free})
    return out


def _state_lfds_batch(prob: _Problem, zgrid: ZGrid, rho: np.ndarray, zfree: np.ndarray,
                      init: dict | None = None, tol: float = CYCLE_TOL, max_cycles: int = MAX_CYCLES,
                      random_starts: int = 0, seed: int = 0):
    """Cyclic coordinate ascent for all states; returns (qs, converged mask, water levels).

    The interpolated rho is not jointly concave in two axes, so the
    coordinate-wise fixed point depends on the start.  The ascent runs from
    ``init`` (or the scaled lower bounds), from q0 projected into each band
    and from ``random_starts`` random feasible points, keeping the best
    objective per state.
    """
    S = zfree.shape[0]
    step = max(1, _LFD_CHUNK_ELEMS // (len(prob.q0) * zgrid.mt))
    starts = [prob.centre] + _random_starts(prob, random_starts, seed)
    parts = []
    for s0 in range(0, S, step):
        sl = slice(s0, min(S, s0 + step))
        n = sl.stop - sl.start
        first = None if init is None else {k: init[k][sl] for k in init}
        best = _ascent(prob, zgrid, rho, zfree[sl], first, tol, max_cycles)
        for st in starts:
            tiled = {k: np.tile(st[k], (n, 1)) for k in prob.free}
            other = _ascent(prob, zgrid, rho, zfree[sl], tiled, tol, max_cycles)
            pick = other[3] > best[3] + _OBJ_RTOL * np.maximum(1.0, np.abs(best[3]))
            best = _pick(best, other, pick)
        parts.append(best)
    qs = {k: np.concatenate([p[0][k] for p in parts]) for k in prob.free}
    conv = np.concatenate([p[1] for p in parts])
    nus = {k: np.concatenate([p[2][k] for p in parts]) for k in prob.free}
    return qs, conv, nus


def _pick(a, b, pick):
    qs = {k: np.where(pick[:, None], b[0][k], a[0][k]) for k in a[0]}
    nus = {k: np.where(pick, b[2][k], a[2][k]) for k in a[2]}
    return qs, np.where(pick, b[1], a[1]), nus, np.where(pick, b[3], a[3])


def _ascent(prob, zgrid, rho, zfree, init, tol, max_cycles):
    S = zfree.shape[0]
    w, q0, Z = prob.grid.weights, prob.q0, zgrid.axis
    qs = {k: (init[k].copy() if init is not None else np.tile(_initial_q(prob, k), (S, 1)))
          for k in prob.free}
    nus = {k: np.zeros(S) for k in prob.free}
    active = np.ones(S, bool)
    obj = np.full(S, -np.inf)
    for _ in range(max_cycles):
        change = np.zeros(S)
        for a, k in enumerate(prob.free):
            sel = np.where(active & (zfree[:, a] > 0))[0]
            if sel.size == 0:
                continue
            other = None
            if zgrid.dims == 2:
                ob = 1 - a
                ko = prob.free[ob]
                with np.errstate(divide="ignore", invalid="ignore"):
                    yo = zfree[sel, ob, None] * qs[ko][sel] / np.where(q0 > 0, q0, 1.0)
                other = _locate(Z, np.where(q0 > 0, yo, 0.0))
            R = _axis_values(rho, zgrid, a, other)
            new, nu = _greedy_update(zfree[sel, a], prob.lower[k], prob.upper[k], q0, w, Z, R)
            change[sel] = np.maximum(change[sel], np.max(np.abs(new - qs[k][sel]), axis=1))
            qs[k][sel] = new
            nus[k][sel] = nu
        # stationary objective also counts: maximizers need not be unique
        new_obj = _continuation(prob, zgrid, rho, zfree, qs)
        flat = np.abs(new_obj - obj) <= _OBJ_RTOL * np.maximum(1.0, np.abs(new_obj))
        obj = new_obj
        active &= (change >= tol) & ~flat
        if not active.any():
            break
    return qs, ~active, nus, obj


@dataclass(frozen=True, eq=False)
class StateLfds:
    densities: tuple           # (q0, q1, ..., qK) as GridDensity
    converged: bool
    water_levels: dict         # hypothesis -> scalar normalizer of the last update


def state_lfds(z: Sequence[float], rho: np.ndarray, sets, zgrid: ZGrid, random_starts: int = 32,
               seed: int = 0) -> StateLfds:
    """Least favorable densities of the next sample at likelihood ratios ``z`` (length K)."""
    prob = _setup(sets)
    zfree = np.array([[z[k - 1] for k in prob.free]], float)
    if len(prob.free) == 1:
        random_starts = 0          # one axis: the greedy update is already exact
    qs, conv, nus = _state_lfds_batch(prob, zgrid, np.asarray(rho, float).reshape(zgrid.shape), zfree,
                                      random_starts=random_starts, seed=seed)
    dens = [GridDensity(prob.grid, prob.q0, "q0")]
    for k in range(1, prob.K + 1):
        v = qs[k][0] if k in prob.free else prob.q0
        dens.append(GridDensity(prob.grid, v, f"q{k}"))
    return StateLfds(tuple(dens), bool(conv[0]), {k: float(nus[k][0]) for k in prob.free})


def continuation_value(z: Sequence[float], rho: np.ndarray, q: Sequence[GridDensity], zgrid: ZGrid,
                       free: Sequence[int] | None = None) -> float:
    """``D(z) = int rho(z_1 q_1/q_0, ..., z_K q_K/q_0) q_0`` with interpolated rho.

    ``free`` lists the hypotheses (1-based) that are grid axes; the others are
    evaluated at their own likelihood ratio but must keep it equal to 1.
    """
    q0 = q[0]
    check_same_grid(*q)
    K = len(q) - 1
    free = tuple(range(1, K + 1)) if free is None else tuple(free)
    if len(free) != zgrid.dims:
        raise ValueError("free axes do not match the grid dimension")
    for k in range(1, K + 1):
        if k not in free and np.max(np.abs(q[k].values - q0.values)) > 1e-12:
            raise ValueError(f"hypothesis {k} is not an axis but its density differs from q0")
    others = [q[k].values for k in free]
    if ((q0.values == 0) & np.any([o > 0 for o in others], axis=0)).any():
        raise ValueError("q0 vanishes where another density does not; the likelihood ratio is unbounded")
    rho = np.asarray(rho, float).reshape(zgrid.shape)

    def neg_rho(t):
        return -interpolate_rho(rho, zgrid, np.moveaxis(t, 0, -1))

    return -f_dissimilarity(neg_rho, [z[k - 1] for k in free], [q[k] for k in free], q0)


# ---------------------------------------------------------------------------
# value iteration


def _transition(prob: _Problem, zgrid: ZGrid, zfree: np.ndarray, qs: dict) -> sparse.csr_matrix:
    """Sparse operator with ``(T rho)[s] = D(z_s)`` under the given state LFDs."""
    S = zfree.shape[0]
    wq = prob.grid.weights * prob.q0
    rows, cols, vals = [], [], []
    for s0 in range(0, S, _CHUNK):
        sl = slice(s0, min(S, s0 + _CHUNK))
        Y = _objective_terms(prob, zgrid, zfree[sl], {k: qs[k][sl] for k in prob.free})
        idx, wts = _corners(zgrid, Y)
        r = np.broadcast_to(np.arange(sl.start, sl.stop)[:, None], Y.shape[:2])
        for i, w in zip(idx, wts):
            v = w * wq[None, :]
            keep = v > 0
            rows.append(r[keep])
            cols.append(i[keep])
            vals.append(v[keep])
    T = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(S, S))
    T.sum_duplicates()
    return T


@dataclass
class _ViResult:
    rho: np.ndarray
    sweeps: int
    max_increase: float


def value_iteration(T: sparse.csr_matrix, g: np.ndarray, tol: float, max_sweeps: int,
                    start: np.ndarray | None = None) -> _ViResult:
    """Iterate ``rho <- min(g, 1 + T rho)`` from ``g`` until the sup change is below tol."""
    rho = g.copy() if start is None else start.copy()
    worst_up = 0.0
    for sweep in range(1, max_sweeps + 1):
        new = np.minimum(g, 1.0 + T @ rho)
        diff = new - rho
        worst_up = max(worst_up, float(diff.max()))
        rho = new
        if np.max(np.abs(diff)) < tol:
            return _ViResult(rho, sweep, worst_up)
    raise SequentialError(f"value iteration did not converge in {max_sweeps} sweeps")


# ---------------------------------------------------------------------------
# design


@dataclass(frozen=True, eq=False)
class SequentialDesign:
    lam: np.ndarray
    sets: tuple
    zgrid: ZGrid
    free: tuple
    rho: np.ndarray            # zgrid.shape
    g: np.ndarray
    continuation: np.ndarray   # 1 + D under the final state LFDs
    stop_mask: np.ndarray
    decision: np.ndarray       # 1-based hypothesis index of the stopping decision
    lfds: dict                 # hypothesis -> (n_states, nx) densities
    q0: np.ndarray
    grid: Grid
    alternations: int
    sweeps: int
    lfd_converged: np.ndarray
    breakdown: bool
    history: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.lam)

    def state_densities(self, s: int) -> tuple:
        out = [GridDensity(self.grid, self.q0, "q0")]
        for k in range(1, self.K + 1):
            v = self.lfds[k][s] if k in self.free else self.q0
            out.append(GridDensity(self.grid, v, f"q{k}"))
        return tuple(out)

    def layer_rows(self):
        """Rows (log_z per axis, rho, stop, decision) for every state."""
        z = self.zgrid.state_z()
        with np.errstate(divide="ignore"):
            lz = np.log(z)
        rows = []
        for s in range(self.zgrid.n_states):
            rows.append(tuple(float(v) for v in lz[s]) + (float(self.rho.flat[s]), int(self.stop_mask.flat[s]),
                                                          int(self.decision.flat[s])))
        return rows

    def to_dict(self) -> dict:
        return {
            "lambda": [float(v) for v in self.lam],
            "zgrid": self.zgrid.to_dict(),
            "free_hypotheses": list(self.free),
            "alternations": self.alternations,
            "sweeps": self.sweeps,
            "breakdown": self.breakdown,
            "lfd_converged_fraction": float(np.mean(self.lfd_converged)),
            "rho": np.asarray(self.rho).ravel().tolist(),
            "stop_mask": np.asarray(self.stop_mask).ravel().astype(int).tolist(),
            "decision": np.asarray(self.decision).ravel().tolist(),
        }


def _contains(band: DensityBand, v: np.ndarray) -> bool:
    lo, hi = band.lower.values, band.upper.values
    return bool((v >= lo - 1e-12).all() and (v <= hi + 1e-12).all())


def design(sets, lam: Sequence[float], zgrid: ZGrid | None = None, tol: float = 1e-6,
           max_sweeps: int = 20000, max_alternations: int = 50, random_starts: int = 0,
           seed: int = 0) -> SequentialDesign:
    """Alternate state LFD updates and value iteration until rho settles.

    ``sets[0]`` is the run-length distribution, ``sets[k]`` the set of
    hypothesis k.  ``lam[k-1]`` is the cost of an error under hypothesis k.
    The state LFDs start from the previous alternation, from q0 projected
    into the bands and from ``random_starts`` random feasible points.
    """
    prob = _setup(sets)
    lam = np.asarray(lam, float)
    if len(lam) != prob.K or (lam <= 0).any():
        raise ValueError("need one positive weight per hypothesis")
    if zgrid is None:
        zgrid = ZGrid(len(prob.free))
    if zgrid.dims != len(prob.free):
        raise ValueError(f"problem has {len(prob.free)} free axes but the grid has {zgrid.dims}")
    zfree = zgrid.state_z()
    g, dec = _stopping_costs(_full_z(zfree, prob), lam)
    rho = g.copy()
    qs = None
    sweeps = 0
    history = []
    bands = [_as_band(s) for s in sets]
    breakdown = all(_contains(bands[k], prob.q0) for k in range(1, prob.K + 1))
    for alt in range(1, max_alternations + 1):
        qs, conv, _ = _state_lfds_batch(prob, zgrid, rho.reshape(zgrid.shape), zfree, init=qs,
                                        random_starts=random_starts if zgrid.dims == 2 else 0, seed=seed)
        T = _transition(prob, zgrid, zfree, qs)
        vi = value_iteration(T, g, tol, max_sweeps)
        sweeps += vi.sweeps
        # iterating from g under fixed LFDs can only decrease rho
        if vi.max_increase > tol:
            raise SequentialError(f"value iteration increased rho by {vi.max_increase:.3g}")
        change = float(np.max(np.abs(vi.rho - rho)))
        history.append({"alternation": alt, "sweeps": vi.sweeps, "change": change,
                        "lfd_unconverged": int((~conv).sum())})
        rho = vi.rho
        if change < tol and alt > 1:
            break
    else:
        raise SequentialError(f"design did not settle in {max_alternations} alternations")
    cont = 1.0 + T @ rho
    stop = g <= cont
    rho = np.where(stop, g, rho)
    return SequentialDesign(lam, tuple(sets), zgrid, prob.free, rho.reshape(zgrid.shape), g.reshape(zgrid.shape),
                            cont.reshape(zgrid.shape), stop.reshape(zgrid.shape), dec.reshape(zgrid.shape),
                            qs, prob.q0, prob.grid, alt, sweeps, conv, breakdown, history)


# ---------------------------------------------------------------------------
# SPRT


def design_sprt(p0: GridDensity, p1: GridDensity, alpha: float, beta: float) -> tuple[float, float]:
    """Wald's approximate thresholds (log A, log B); overshoot is ignored."""
    check_same_grid(p0, p1)
    if not (0 < alpha < 0.5 and 0 < beta < 0.5):
        raise ValueError("alpha and beta must lie in (0, 0.5)")
    return math.log((1 - beta) / alpha), math.log(beta / (1 - alpha))


def sprt_thresholds(d: SequentialDesign) -> tuple[float, float]:
    """Effective log-LR thresholds of a one-axis design under nearest-node lookup.

    Returns (upper, lower): the test stops once log z >= upper or <= lower.
    """
    if d.zgrid.dims != 1:
        raise ValueError("thresholds exist only for one-axis designs")
    stop = d.stop_mask[1:]
    u = d.zgrid.log_axis
    origin = int(np.argmin(np.abs(u)))
    if stop[origin]:
        return 0.0, 0.0
    up = np.where(stop[origin:])[0]
    dn = np.where(stop[:origin + 1][::-1])[0]
    h = d.zgrid.step
    upper = u[origin + up[0]] - h / 2 if up.size else math.inf
    lower = u[origin - dn[0]] + h / 2 if dn.size else -math.inf
    return float(upper), float(lower)


def _run_uniforms(seed: int, hyp: int, runs: int):
    return [stream(seed, hyp, r) for r in range(runs)]


class _UniformBank:
    """Per-run Philox streams drawn in blocks; values do not depend on the block size."""

    def __init__(self, seed: int, hyp: int, runs: int, block: int = 64):
        self.gens = _run_uniforms(seed, hyp, runs)
        self.block = block
        self.buf = np.empty((runs, block))
        self.pos = np.full(runs, block, np.int64)

    def draw(self, which: np.ndarray) -> np.ndarray:
        for r in which[self.pos[which] >= self.block]:
            self.buf[r] = self.gens[r].random(self.block)
            self.pos[r] = 0
        out = self.buf[which, self.pos[which]]
        self.pos[which] += 1
        return out


def _inverse_rows(cdf: np.ndarray, x: np.ndarray, dx: float, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse CDF: ``cdf`` is (n, nx) increasing rows, one uniform per row."""
    tot = cdf[:, -1]
    target = u * tot
    lo = np.zeros(len(u), np.int64)
    hi = np.full(len(u), cdf.shape[1] - 1, np.int64)
    rows = np.arange(len(u))
    # find idx with cdf[idx] <= target < cdf[idx+1]
    while True:
        act = hi - lo > 1
        if not act.any():
            break
        mid = (lo + hi) // 2
        go = cdf[rows, mid] <= target
        lo = np.where(act & go, mid, lo)
        hi = np.where(act & ~go, mid, hi)
    cell = cdf[rows, lo + 1] - cdf[rows, lo]
    frac = np.clip((target - cdf[rows, lo]) / np.where(cell > 0, cell, 1.0), 0.0, 1.0)
    return x[lo] + frac * dx


def _cdf_rows(grid: Grid, values: np.ndarray) -> np.ndarray:
    cells = 0.5 * grid.dx * (values[..., 1:] + values[..., :-1])
    return np.concatenate((np.zeros(values.shape[:-1] + (1,)), np.cumsum(cells, axis=-1)), axis=-1)


def _interp_rows(values: np.ndarray, grid: Grid, x: np.ndarray) -> np.ndarray:
    """Linear interpolation of per-row grid values ``values[(n, nx)]`` at one x per row."""
    pos = (x - grid.x_min) / grid.dx
    i = np.clip(np.floor(pos).astype(np.int64), 0, grid.n - 2)
    t = pos - i
    rows = np.arange(len(x))
    a, b = values[rows, i], values[rows, i + 1]
    with np.errstate(invalid="ignore"):
        out = a + t * (b - a)
    return np.where(a == b, a, np.where(t == 0, a, np.where(t == 1, b, out)))


def _log_ratio(q: np.ndarray, q0: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(q) - np.log(q0)
    return np.where((q == 0) & (q0 == 0), 0.0, out)


@dataclass(frozen=True, eq=False)
class TrajectoryResult:
    """Runs under each true hypothesis: ``tau[h, r]`` and ``decision[h, r]`` (0 = censored)."""

    tau: np.ndarray
    decision: np.ndarray
    seed: int
    horizon: int

    @property
    def censored(self) -> np.ndarray:
        return (self.decision == 0).sum(axis=1)

    @property
    def error_rates(self) -> np.ndarray:
        """Wrong decisions over decided runs, per true hypothesis."""
        out = []
        for h in range(self.decision.shape[0]):
            d = self.decision[h]
            done = d > 0
            out.append(float(np.mean(d[done] != h + 1)) if done.any() else float("nan"))
        return np.array(out)

    @property
    def mean_tau(self) -> np.ndarray:
        return self.tau.mean(axis=1)

    def tau_quantiles(self, qs=(0.5, 0.9, 0.99)) -> np.ndarray:
        return np.quantile(self.tau, qs, axis=1).T

    def summary(self) -> dict:
        return {"error_rates": self.error_rates.tolist(), "mean_tau": self.mean_tau.tolist(),
                "censored": self.censored.tolist(), "tau_quantiles": self.tau_quantiles().tolist(),
                "seed": self.seed, "horizon": self.horizon}


ADVERSARY = "lfd"


def simulate(d: SequentialDesign, truths: Sequence, runs: int, seed: int, horizon: int = 10_000) -> TrajectoryResult:
    """Simulate the design; ``truths[h]`` is a GridDensity or ``"lfd"`` (adversary plays state LFDs).

    Stopping follows the stop mask of the nearest state; the decision is the
    minimizer of the stopping cost at the actual likelihood ratios.  The LR
    update uses the state LFDs of the nearest state.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if len(truths) != d.K:
        raise ValueError("need one truth per hypothesis")
    grid = d.grid
    for t in truths:
        if isinstance(t, GridDensity):
            check_same_grid(t, GridDensity(grid, d.q0))
        elif t != ADVERSARY:
            raise ValueError("truth must be a GridDensity or 'lfd'")
    llr = {k: _log_ratio(d.lfds[k], d.q0[None, :]) for k in d.free}
    stop = d.stop_mask.ravel()
    adv_cdf = {}
    taus = np.zeros((d.K, runs), np.int64)
    decs = np.zeros((d.K, runs), np.int64)
    for h in range(1, d.K + 1):
        truth = truths[h - 1]
        if truth == ADVERSARY and h in d.free and h not in adv_cdf:
            adv_cdf[h] = _cdf_rows(grid, d.lfds[h])
        fixed_cdf = None
        if truth == ADVERSARY and h not in d.free:
            fixed_cdf = _cdf_rows(grid, d.q0)[None, :]
        elif truth != ADVERSARY:
            fixed_cdf = truth.cdf()[None, :]
        bank = _UniformBank(seed, h, runs)
        logz = np.zeros((runs, len(d.free)))
        zero = np.zeros((runs, len(d.free)), bool)
        active = np.arange(runs)
        tau = np.zeros(runs, np.int64)
        dec = np.zeros(runs, np.int64)
        for n in range(horizon + 1):
            if active.size == 0:
                break
            z = np.where(zero[active], 0.0, np.exp(np.minimum(logz[active], 700.0)))
            s = d.zgrid.nearest(z)
            halt = stop[s]
            if halt.any():
                done = active[halt]
                _, dd = _stopping_costs(_full_z(z[halt], _FreeView(d)), d.lam)
                tau[done] = n
                dec[done] = dd
                active, s = active[~halt], s[~halt]
            if active.size == 0 or n == horizon:
                tau[active] = n
                break
            u = bank.draw(active)
            if fixed_cdf is not None:
                cdf = np.broadcast_to(fixed_cdf, (len(active), grid.n))
            else:
                cdf = adv_cdf[h][s]
            x = _inverse_rows(cdf, grid.x, grid.dx, u)
            for a, k in enumerate(d.free):
                inc = _interp_rows(llr[k][s], grid, x)
                logz[active, a] += inc
                zero[active, a] |= np.isneginf(inc)
        taus[h - 1], decs[h - 1] = tau, dec
    return TrajectoryResult(taus, decs, seed, horizon)


class _FreeView:
    def __init__(self, d: SequentialDesign):
        self.free, self.K = d.free, d.K


def simulate_sprt(p0: GridDensity, p1: GridDensity, log_upper: float, log_lower: float,
                  truth: GridDensity, runs: int, seed: int, stream_key: int = 1,
                  horizon: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Textbook SPRT on ``log z = sum log p1/p0``: stop at log_upper (decide 1) or log_lower (decide 0).

    Returns (tau, decision) with decision -1 for censored runs.  Uniforms come
    from the same per-run streams as :func:`simulate` with hypothesis key
    ``stream_key``.
    """
    check_same_grid(p0, p1, truth)
    grid = p0.grid
    llr = _log_ratio(p1.values, p0.values)
    cdf = truth.cdf()[None, :]
    bank = _UniformBank(seed, stream_key, runs)
    logz = np.zeros(runs)
    tau = np.zeros(runs, np.int64)
    dec = np.full(runs, -1, np.int64)
    active = np.arange(runs)
    for n in range(horizon + 1):
        up = logz[active] >= log_upper
        dn = logz[active] <= log_lower
        done = up | dn
        tau[active[done]] = n
        dec[active[up]] = 1
        dec[active[dn & ~up]] = 0
        active = active[~done]
        if active.size == 0 or n == horizon:
            tau[active] = n
            break
        x = _inverse_rows(np.broadcast_to(cdf, (len(active), grid.n)), grid.x, grid.dx, bank.draw(active))
        logz[active] += _interp_rows(np.broadcast_to(llr, (len(active), grid.n)), grid, x)
    return tau, dec


# ---------------------------------------------------------------------------
# weight calibration


@dataclass(frozen=True)
class Calibration:
    lam: np.ndarray
    errors: np.ndarray
    evaluations: int
    converged: bool


def calibrate_weights(sets, zgrid: ZGrid, target_errors: Sequence[float], budget: int = 40,
                      runs: int = 2000, seed: int = 0, lam_bracket: tuple = (1.0, 1e5),
                      init: Sequence[float] | None = None, rel_tol: float = 0.2,
                      horizon: int = 10_000) -> Calibration:
    """Coordinate-wise bisection on log lam_k against simulated errors under the adversary.

    A larger lam_k makes errors under hypothesis k more expensive, so the
    simulated error under k decreases with lam_k.  Runs censored at the
    horizon count as errors.  When censoring dominates the errors under k,
    deciding for k is too expensive relative to continuing, and the other
    weights are lowered instead.
    """
    targets = np.asarray(target_errors, float)
    K = len(sets) - 1
    if len(targets) != K:
        raise ValueError("need one target per hypothesis")
    lo_b, hi_b = math.log(lam_bracket[0]), math.log(lam_bracket[1])
    if (targets >= 0.5).any() or (targets <= 0).any():
        return Calibration(np.full(K, lam_bracket[0]), np.full(K, np.nan), 0, False)
    log_lam = np.log(np.asarray(init, float)) if init is not None else np.full(K, 0.5 * (lo_b + hi_b))
    brackets = np.array([[lo_b, hi_b]] * K)
    evals = 0
    best = None

    def evaluate(ll):
        nonlocal evals
        evals += 1
        res = simulate(design(sets, np.exp(ll), zgrid), [ADVERSARY] * K, runs, seed, horizon)
        truth = np.arange(1, K + 1)[:, None]
        return np.mean(res.decision != truth, axis=1), np.mean(res.decision == 0, axis=1)

    def move(j, up):
        if up:
            brackets[j, 0] = log_lam[j]
            if brackets[j, 1] - brackets[j, 0] < 1e-3:
                brackets[j, 1] = hi_b
        else:
            brackets[j, 1] = log_lam[j]
            if brackets[j, 1] - brackets[j, 0] < 1e-3:
                brackets[j, 0] = lo_b
        log_lam[j] = brackets[j].mean()

    errs, cens = evaluate(log_lam)
    while True:
        score = float(np.max(np.abs(errs - targets) / targets))
        if best is None or score < best[0]:
            best = (score, log_lam.copy(), errs.copy())
        if score <= rel_tol or evals >= budget:
            break
        k = int(np.argmax(np.abs(errs - targets) / targets))
        if errs[k] > targets[k] and cens[k] > 0.5 * errs[k]:
            for j in range(K):
                if j != k:
                    move(j, up=False)
        else:
            move(k, up=errs[k] > targets[k])
        errs, cens = evaluate(log_lam)
    return Calibration(np.exp(best[1]), best[2], evals, best[0] <= rel_tol)
