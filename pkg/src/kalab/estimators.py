"""Variational upper bound on D(q) with the bootstrap-percolation test function, and the
closed-form bound curves.

Normalization: the integrand is half the jump-rate weighted sum, so a free particle
(every constraint satisfied, every neighbour empty) gives exactly 1, the same
normalization as the MSD estimator in :mod:`kalab.dynamics`. Bulk edges count once
when their two ends differ; the tagged term carries the factor ``1 - eta(y)``.
The configuration after a tagged jump to ``y`` is re-centred on ``y``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .bootstrap import _nbr, _origin_index
from .lattice import LatticeGeometry, make_rng, spawn_seeds


@dataclass(frozen=True)
class UpperBoundReport:
    q: float
    k: int
    d: int
    ell: int
    n: int
    term_bulk: float
    term_origin: float
    total: float
    stderr: float
    ci_lo: float
    ci_hi: float
    seed: int | None = None

    def csv_row(self) -> list:
        return [self.q, self.k, self.d, self.ell, self.n, self.term_bulk, self.term_origin,
                self.total, self.ci_lo, self.ci_hi, self.seed]


UPPER_CSV_HEADER = ["q", "k", "d", "ell", "n", "term_bulk", "term_origin", "total", "ci_lo", "ci_hi", "seed"]
BOUNDS_CSV_HEADER = ["q", "k", "d", "c_lower", "c_upper", "log_lower", "log_upper"]


class _Window:
    """Test function on the window ``[-ell, ell]^d`` of a ``(2 ell + 3)^d`` array."""

    def __init__(self, ell: int, d: int, k: int):
        self.ell, self.d, self.k = ell, d, k
        g = LatticeGeometry.centered_box(d, ell)
        self.nbr = _nbr(g)
        self.origin = _origin_index(g)
        self.xcoord = np.array([s[0] for s in g.sites()], dtype=np.int64)

    def f(self, big: np.ndarray, shift=None) -> int:
        """Rightmost first coordinate of the origin's cluster in the window centred at ``1 + shift``."""
        shift = shift or (0,) * self.d
        sl = tuple(slice(1 + s, 2 + s + 2 * self.ell) for s in shift)
        occ = np.ascontiguousarray(big[sl]).ravel().copy()
        closed = _kernels.bp_closure(occ, self.nbr, self.k)
        member = _kernels.origin_cluster(closed, self.nbr, self.origin)
        idx = np.flatnonzero(member)
        return int(self.xcoord[idx].max()) if idx.size else 0


def _other_empty(occ: np.ndarray, x: tuple, y: tuple) -> int:
    n = 0
    for ax in range(occ.ndim):
        for s in (1, -1):
            z = list(x)
            z[ax] += s
            z = tuple(z)
            if z == y or not 0 <= z[ax] < occ.shape[ax]:
                continue
            n += 1 - int(occ[z])
    return n


def constraint_ok(occ: np.ndarray, x: tuple, y: tuple, k: int) -> bool:
    """c_xy on an array with occupied exterior."""
    return _other_empty(occ, x, y) >= k - 1 and _other_empty(occ, y, x) >= k - 1


def boundary_edges(ell: int, d: int, all_edges: bool = False) -> list:
    """Array-index edges of the ``(2 ell + 3)^d`` box with an endpoint at sup-norm ``ell``
    (every edge not touching the origin when ``all_edges``)."""
    n = 2 * ell + 3
    centre = (ell + 1,) * d
    out = []
    for x in np.ndindex(*(n,) * d):
        for ax in range(d):
            y = list(x)
            y[ax] += 1
            if y[ax] >= n:
                continue
            y = tuple(y)
            if centre in (x, y):
                continue
            nx = max(abs(c - ell - 1) for c in x)
            ny = max(abs(c - ell - 1) for c in y)
            if all_edges or ell in (nx, ny):
                out.append((x, y))
    return out


def _unit_vectors(d: int):
    for ax in range(d):
        for s in (1, -1):
            v = [0] * d
            v[ax] = s
            yield tuple(v)


def integrand(big: np.ndarray, win: _Window, edges, k: int, u_axis: int = 0, resample=None) -> tuple:
    """``(bulk, origin)`` halves of the variational integrand for one configuration."""
    d = big.ndim
    centre = (win.ell + 1,) * d
    f0 = win.f(big)
    bulk = 0.0
    for x, y in edges:
        if big[x] == big[y] or not constraint_ok(big, x, y, k):
            continue
        big[x], big[y] = big[y], big[x]
        df = win.f(big) - f0
        big[x], big[y] = big[y], big[x]
        bulk += df * df
    tag = 0.0
    for v in _unit_vectors(d):
        y = tuple(c + s for c, s in zip(centre, v))
        if big[y] or not constraint_ok(big, centre, y, k):
            continue
        moved = big.copy()
        moved[centre], moved[y] = 0, 1
        if resample is not None:
            moved = resample(moved, v)
        term = v[u_axis] + win.f(moved, v) - f0
        tag += term * term
    return 0.5 * bulk, 0.5 * tag


def variational_upper_bound(q: float, k: int = 2, d: int = 2, ell: int = 4, n: int = 1000,
                            seed: int = 0, exact: bool = True, streams: int = 4) -> UpperBoundReport:
    """Monte Carlo mean of the variational integrand at the bootstrap test function.

    Samples the box ``[-ell-1, ell+1]^d`` under the product measure conditioned on an
    occupied origin (rejection). With ``exact=False`` the sites a tagged jump shifts into
    the window are redrawn independently instead of read from the sampled shell.
    """
    if ell < 2:
        raise ValueError("ell must be >= 2")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if not 2 <= k <= d:
        raise ValueError("need 2 <= k <= d")
    win = _Window(ell, d, k)
    edges = boundary_edges(ell, d)
    shape = (2 * ell + 3,) * d
    centre = (ell + 1,) * d
    bulk = np.empty(n)
    tag = np.empty(n)
    sizes = [n // streams + (1 if i < n % streams else 0) for i in range(streams)]
    pos = 0
    for ss, size in zip(spawn_seeds(seed, streams), sizes):
        rng = make_rng(ss)

        def redraw(arr, v, rng=rng):
            # fresh shell sites in place of the ones the shift brings into view
            out = arr.copy()
            far = tuple(slice(None) if s == 0 else (shape[i] - 1 if s > 0 else 0) for i, s in enumerate(v))
            out[far] = rng.random(out[far].shape) >= q
            return out

        for _ in range(size):
            while True:
                big = (rng.random(shape) >= q).astype(np.uint8)
                if big[centre]:
                    break
            bulk[pos], tag[pos] = integrand(big, win, edges, k, 0, None if exact else redraw)
            pos += 1
    tot = bulk + tag
    mean = float(tot.mean())
    err = float(tot.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    half = 1.96 * err if n > 1 else math.nan
    return UpperBoundReport(q, k, d, ell, n, float(bulk.mean()), float(tag.mean()), mean, err,
                            mean - half, mean + half, seed)


# closed-form curves


@dataclass(frozen=True)
class BoundPair:
    """Natural logs of the lower and upper bounds on D(q), and ``log(-log)`` of each."""

    log_lower: float
    log_upper: float
    loglog_lower: float
    loglog_upper: float

    def csv_row(self, q, k, d, c_lower, c_upper) -> list:
        return [q, k, d, c_lower, c_upper, self.log_lower, self.log_upper]


def _iter_exp(n: int, x: float) -> float:
    for _ in range(n):
        x = math.exp(x) if x < 709 else math.inf
    return x


def theoretical_bounds(q: float, k: int = 2, d: int = 2, c_lower: float = 1.0, c_upper: float = 1.0) -> BoundPair:
    """Asymptotic lower and upper curves for D(q) at given constants, in log space.

    k=2: ``log D >= -c log(1/q)^d q^(-1/(d-1))`` and ``log D <= -c' q^(-1/(d-1))``.
    k>=3: ``log D >= -exp_(k-2)(c q^(-1/(d-k+1)))``, likewise for the upper curve with c'.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if not 2 <= k <= d:
        raise ValueError("need 2 <= k <= d")
    if c_lower <= 0 or c_upper <= 0:
        raise ValueError("constants must be positive")
    if k == 2:
        base = q ** (-1.0 / (d - 1))
        ll_lo = math.log(c_lower) + d * math.log(math.log(1 / q)) + math.log(base)
        ll_up = math.log(c_upper) + math.log(base)
    else:
        base = q ** (-1.0 / (d - k + 1))
        ll_lo = _iter_exp(k - 3, c_lower * base)
        ll_up = _iter_exp(k - 3, c_upper * base)
    lo = -_iter_exp(1, ll_lo)
    up = -_iter_exp(1, ll_up)
    if ll_lo < ll_up:
        warnings.warn(f"lower bound exceeds upper bound at q={q} for these constants", stacklevel=2)
    return BoundPair(lo, up, ll_lo, ll_up)
