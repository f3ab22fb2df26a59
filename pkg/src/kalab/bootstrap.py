"""k-neighbour bootstrap percolation on centred boxes and the test function built on it.

All functions take configurations on occupied-exterior boxes. Bootstrap
percolation only counts neighbours inside the box, which is the same as
reading the exterior as occupied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from statsmodels.stats.proportion import proportion_confint

from . import _kernels
from .lattice import (
    Configuration,
    Edge,
    LatticeError,
    LatticeGeometry,
    constraint,
    empty_neighbor_counts,
    make_rng,
    spawn_seeds,
    swap,
)


def _require_box(cfg: Configuration) -> LatticeGeometry:
    g = cfg.geometry
    if g.is_torus:
        raise LatticeError("bootstrap percolation is defined on occupied-exterior boxes")
    return g


def restrict(cfg: Configuration, half: int) -> Configuration:
    """Restriction of ``cfg`` to the centred box ``[-half, half]^d``."""
    g = _require_box(cfg)
    sub = LatticeGeometry.centered_box(g.d, half)
    if sub == g:
        return cfg
    lo = [-half - o for o in g.origin]
    if min(lo) < 0 or any(l + 2 * half + 1 > e for l, e in zip(lo, g.extent)):
        raise LatticeError(f"box of half-width {half} is not contained in the region")
    sl = tuple(slice(l, l + 2 * half + 1) for l in lo)
    return Configuration(sub, cfg.occupancy[sl])


def bp_step(cfg: Configuration, k: int) -> Configuration:
    g = _require_box(cfg)
    emptied = empty_neighbor_counts(cfg.occupancy, torus=False) >= k
    occ = np.where(emptied, 0, cfg.occupancy).astype(np.uint8)
    return Configuration(g, occ)


def bp_closure(cfg: Configuration, k: int) -> Configuration:
    g = _require_box(cfg)
    out = _kernels.bp_closure(cfg.flat().copy(), _nbr(g), k)
    return Configuration(g, out.reshape(g.extent))


_NBR_CACHE: dict = {}


def _nbr(g: LatticeGeometry) -> np.ndarray:
    tab = _NBR_CACHE.get(g)
    if tab is None:
        tab = _NBR_CACHE[g] = g.neighbor_table()
    return tab


def _origin_index(g: LatticeGeometry) -> int:
    if not g.contains((0,) * g.d):
        raise LatticeError("the box does not contain the origin")
    return g.index((0,) * g.d)


def _cluster_mask(cfg: Configuration, k: int) -> np.ndarray:
    g = cfg.geometry
    closed = _kernels.bp_closure(cfg.flat().copy(), _nbr(g), k)
    return _kernels.origin_cluster(closed, _nbr(g), _origin_index(g)).reshape(g.extent)


def _box(cfg: Configuration, ell: int | None) -> Configuration:
    _require_box(cfg)
    return cfg if ell is None else restrict(cfg, ell)


def origin_cluster(cfg: Configuration, k: int, ell: int | None = None) -> frozenset:
    """Sites joined to the origin by a path whose non-origin sites are empty after closure.

    With ``ell`` given, the configuration is first restricted to ``[-ell, ell]^d``.
    """
    cfg = _box(cfg, ell)
    g = cfg.geometry
    mask = _cluster_mask(cfg, k)
    return frozenset(tuple(int(i) + o for i, o in zip(idx, g.origin)) for idx in np.argwhere(mask))


def _cluster_coords(cfg: Configuration, k: int) -> np.ndarray:
    g = cfg.geometry
    return np.argwhere(_cluster_mask(cfg, k)) + np.asarray(g.origin)


def test_function_f(cfg: Configuration, k: int, ell: int | None = None) -> int:
    """First coordinate of the rightmost site of the origin's cluster; 0 if the cluster is empty."""
    coords = _cluster_coords(_box(cfg, ell), k)
    if len(coords) == 0:
        return 0
    return int(coords[:, 0].max())


test_function_f.__test__ = False


def event_B(cfg: Configuration, k: int, ell: int) -> bool:
    """Does the origin's cluster in ``[-ell, ell]^d`` reach sup-norm ``ell - 1``?"""
    coords = _cluster_coords(restrict(cfg, ell), k)
    if len(coords) == 0:
        return False
    return bool(np.abs(coords).max() >= ell - 1)


def is_pivotal(cfg: Configuration, k: int, e: Edge, ell: int | None = None) -> bool:
    """Legal edge whose swap changes the test function."""
    if not constraint(cfg, k, e):
        return False
    return test_function_f(cfg, k, ell) != test_function_f(swap(cfg, e), k, ell)


def interior(ell: int, x) -> bool:
    return all(abs(c) <= ell - 1 for c in x)


@dataclass(frozen=True)
class MuBEstimate:
    q: float
    k: int
    d: int
    ell: int
    n: int
    hits: int
    estimate: float
    ci_lo: float
    ci_hi: float
    seed: int | None = None

    def csv_row(self) -> list:
        return [self.q, self.k, self.d, self.ell, self.n, self.estimate, self.ci_lo, self.ci_hi, self.seed]


MUB_CSV_HEADER = ["q", "k", "d", "ell", "n", "estimate", "ci_lo", "ci_hi", "seed"]


def wilson_interval(hits: int, n: int, alpha: float = 0.05) -> tuple:
    lo, hi = proportion_confint(hits, n, alpha=alpha, method="wilson")
    return float(lo), float(hi)


def estimate_muB(q: float, k: int, ell: int, n: int, seed: int = 0, d: int = 2, streams: int = 4) -> MuBEstimate:
    """Monte Carlo frequency of the event B under the product measure."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    g = LatticeGeometry.centered_box(d, ell)
    nbr, origin = _nbr(g), _origin_index(g)
    norms = np.abs(np.array(list(g.sites()))).max(axis=1)
    far = norms >= ell - 1
    hits = 0
    # fixed stream split keeps results independent of worker count
    sizes = [n // streams + (1 if i < n % streams else 0) for i in range(streams)]
    for ss, size in zip(spawn_seeds(seed, streams), sizes):
        rng = make_rng(ss)
        for _ in range(size):
            occ = (rng.random(g.n_sites) >= q).astype(np.uint8)
            closed = _kernels.bp_closure(occ, nbr, k)
            member = _kernels.origin_cluster(closed, nbr, origin)
            hits += bool(np.any(member.astype(bool) & far))
    lo, hi = wilson_interval(hits, n)
    return MuBEstimate(q, k, d, ell, n, hits, hits / n, lo, hi, seed)


def fit_decay(ells, estimates) -> tuple:
    """Least-squares line of ``-log(estimate)`` against ``ell``: ``(slope, intercept, r2)``."""
    y = -np.log(np.asarray(estimates, dtype=float))
    res = stats.linregress(np.asarray(ells, dtype=float), y)
    return float(res.slope), float(res.intercept), float(res.rvalue**2)
