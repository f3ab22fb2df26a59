"""Coarse-graining: scales, box goodness and frameability, super-good paths, block connectivity,
the induced bond percolation on the coarse lattice and the random walk on its cluster.

Boxes are handled as plain numpy arrays indexed from 0 (box site ``anchor + 1 + index``).
Blocks are ``(L+1) i + [L]^d``; box anchors inside a block are ``0, ell, 2 ell, ...`` per
axis, plus ``L - ell`` when ``ell`` does not divide ``L`` so the boxes still cover the block.
"""
from __future__ import annotations

import heapq
import itertools
import math
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .lattice import Configuration, LatticeGeometry, make_rng, spawn_seeds


class StateSpaceTooLarge(RuntimeError):
    pass


class OriginIsolated(RuntimeError):
    pass


class ScaleWarning(UserWarning):
    pass


ELL_CAP = 10**6
L_CAP = 10**9


@dataclass(frozen=True)
class ScaleParams:
    q: float
    k: int
    d: int
    c: float
    ell: int
    L: int
    capped: bool = False

    def with_overrides(self, ell=None, L=None) -> "ScaleParams":
        ell = self.ell if ell is None else int(ell)
        L = self.L if L is None else int(L)
        if ell < 2 or L < ell:
            raise ValueError("need ell >= 2 and L >= ell")
        return replace(self, ell=ell, L=L)


def _iterated_exp(n: int, x: float) -> float:
    for _ in range(n):
        if x > 700:
            return math.inf
        x = math.exp(x)
    return x


def scales(q: float, k: int = 2, d: int = 2, c: float = 1.0) -> ScaleParams:
    """``ell = ceil(c log(1/q) q^(-1/(d-1)))`` for k=2, ``ceil(c exp_(k-2)(q^(-1/(d-k+1))))``
    otherwise, and ``L = ceil(q^(-c ell))`` rounded up to a multiple of ``ell``."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if not 2 <= k <= d:
        raise ValueError("need 2 <= k <= d")
    if c <= 0:
        raise ValueError("c must be positive")
    capped = False
    if k == 2:
        raw = c * math.log(1 / q) * q ** (-1.0 / (d - 1))
    else:
        raw = c * _iterated_exp(k - 2, q ** (-1.0 / (d - k + 1)))
    if not raw <= ELL_CAP:
        warnings.warn(f"ell overflows ({raw:.3g}); capped at {ELL_CAP}", ScaleWarning, stacklevel=2)
        raw, capped = ELL_CAP, True
    ell = max(2, math.ceil(raw))
    log_L = c * ell * math.log(1 / q)
    if log_L > math.log(L_CAP):
        warnings.warn(f"L overflows (log L = {log_L:.3g}); capped at {L_CAP}", ScaleWarning, stacklevel=2)
        L, capped = L_CAP, True
    else:
        L = math.ceil(math.exp(log_L))
    L = max(ell, -(-L // ell) * ell)
    return ScaleParams(q, k, d, c, ell, L, capped)


def box_anchors(L: int, ell: int) -> list:
    """Per-axis box offsets inside a block ``[L]``: box ``a`` covers ``a + [ell]``."""
    if ell > L:
        raise ValueError("box larger than block")
    out = list(range(0, L - ell + 1, ell))
    if out[-1] != L - ell:
        out.append(L - ell)
    return out


# frames and frameability


@lru_cache(maxsize=None)
def frame_mask(shape: tuple, k: int) -> np.ndarray:
    """Union of the (k-1)-dimensional slices through the first corner."""
    idx = np.indices(shape).reshape(len(shape), -1)
    off = (idx != 0).sum(axis=0)
    return (off <= k - 1).reshape(shape)


def _as_array(box) -> np.ndarray:
    if isinstance(box, Configuration):
        return box.occupancy
    return np.asarray(box, dtype=np.uint8)


def frame_empty(box, k: int) -> bool:
    arr = _as_array(box)
    return not bool(arr[frame_mask(arr.shape, k)].any())


@lru_cache(maxsize=None)
def _box_neighbors(shape: tuple) -> tuple:
    n = int(np.prod(shape))
    coords = np.array(np.unravel_index(np.arange(n), shape)).T
    out = []
    for x in range(n):
        row = []
        for ax in range(len(shape)):
            for s in (1, -1):
                c = coords[x].copy()
                c[ax] += s
                if 0 <= c[ax] < shape[ax]:
                    row.append(int(np.ravel_multi_index(c, shape)))
        out.append(tuple(row))
    return tuple(out)


def _legal_moves(occ: bytes, nbrs, k: int):
    for x, nx in enumerate(nbrs):
        if not occ[x]:
            continue
        for y in nx:
            if occ[y]:
                continue
            if k > 1:
                if sum(1 for z in nx if z != y and not occ[z]) < k - 1:
                    continue
                if sum(1 for z in nbrs[y] if z != x and not occ[z]) < k - 1:
                    continue
            yield x, y


def frame_search(box, k: int, max_states: int = 2**25):
    """Legal swap path (exterior occupied) to an empty frame, or None when none is reachable.

    Best-first on the number of occupied frame sites; exhaustive when no path exists.
    Returns a list of ``(flat_from, flat_to)`` index pairs in the box's C order.
    """
    arr = _as_array(box)
    shape = arr.shape
    if arr.size == 0:
        return []
    nbrs = _box_neighbors(shape)
    fm = frame_mask(shape, k).ravel()
    frame_idx = np.flatnonzero(fm)
    start = bytes(arr.ravel().astype(np.uint8))
    h = lambda s: sum(s[i] for i in frame_idx)
    if h(start) == 0:
        return []
    prev = {start: None}
    heap = [(h(start), 0, start)]
    tick = 0
    while heap:
        _, _, s = heapq.heappop(heap)
        for x, y in _legal_moves(s, nbrs, k):
            t = bytearray(s)
            t[x], t[y] = 0, 1
            t = bytes(t)
            if t in prev:
                continue
            prev[t] = (s, (x, y))
            if h(t) == 0:
                path = []
                while prev[t] is not None:
                    t, mv = prev[t]
                    path.append(mv)
                return path[::-1]
            if len(prev) > max_states:
                raise StateSpaceTooLarge(f"frameability search exceeded {max_states} states")
            tick += 1
            heapq.heappush(heap, (h(t), tick, t))
    return None


_FRAMEABLE_CACHE: dict = {}


def is_frameable_exact(box, k: int, max_states: int = 2**25) -> bool:
    arr = _as_array(box)
    if k <= 1 and arr.ndim <= 1:
        # free exclusion on a segment: any vacancy can be carried to the first site
        return arr.size == 0 or not arr.all()
    key = (arr.shape, k, arr.astype(np.uint8).tobytes())
    hit = _FRAMEABLE_CACHE.get(key)
    if hit is None:
        hit = _FRAMEABLE_CACHE[key] = frame_search(arr, k, max_states) is not None
    return hit


# goodness

READINGS = ("count", "fillable")


@dataclass(frozen=True)
class GoodnessReport:
    good: bool
    frameable: bool | None
    frame_empty: bool
    extra_vacancy: bool


def _slices(arr: np.ndarray):
    for ax in range(arr.ndim):
        for i in range(arr.shape[ax]):
            yield np.take(arr, i, axis=ax)


def _slices_frameable(arr: np.ndarray, k: int) -> bool:
    if arr.ndim <= 1:
        # slices are single sites: zero-dimensional frameability is vacuous
        return True
    return all(is_frameable_exact(s, k - 1) for s in _slices(arr))


def slice_condition(arr, k: int) -> bool:
    """Every (d-1)-slice is (d-1, k-1)-frameable for ``arr`` and all its one-site flips."""
    arr = _as_array(arr).astype(np.uint8)
    if not _slices_frameable(arr, k):
        return False
    flat = arr.ravel()
    for x in range(flat.size):
        f = flat.copy()
        f[x] ^= 1
        if not _slices_frameable(f.reshape(arr.shape), k):
            return False
    return True


@lru_cache(maxsize=None)
def min_vacancies(shape: tuple, k: int, max_configs: int = 2**20) -> int:
    """Fewest vacancies of any configuration meeting the slice condition (brute force)."""
    n = int(np.prod(shape))
    if len(shape) <= 1:
        return 0
    if 2**n > max_configs:
        raise StateSpaceTooLarge(f"minimum vacancy count needs 2^{n} configurations")
    for m in range(n + 1):
        for holes in itertools.combinations(range(n), m):
            f = np.ones(n, np.uint8)
            f[list(holes)] = 0
            if slice_condition(f.reshape(shape), k):
                return m
    return n + 1


def _fast_rows_cols(arr: np.ndarray) -> tuple:
    e = 1 - arr.astype(np.int64)
    return e.sum(axis=1), e.sum(axis=0)


def _extra_fast(arr: np.ndarray, reading: str) -> bool:
    rows, cols = _fast_rows_cols(arr)
    if reading == "count":
        # two per line is tight: 2 * max(shape) vacancies placed on shifted diagonals
        return int(rows.sum()) >= 2 * max(arr.shape) + 1
    empties = np.argwhere(arr == 0)
    return any(rows[i] >= 3 and cols[j] >= 3 for i, j in empties)


def _extra_general(arr: np.ndarray, k: int, reading: str) -> bool:
    if reading == "count":
        return int((arr == 0).sum()) >= min_vacancies(arr.shape, k) + 1
    flat = arr.ravel()
    for x in np.flatnonzero(flat == 0):
        f = flat.copy()
        f[x] = 1
        if slice_condition(f.reshape(arr.shape), k):
            return True
    return False


def is_good_array(arr, k: int = 2, reading: str = "count", general: bool = False) -> bool:
    """(d, k)-goodness of a box given as an array; d is ``arr.ndim``."""
    arr = _as_array(arr)
    if reading not in READINGS:
        raise ValueError(f"reading must be one of {READINGS}")
    if not general and arr.ndim == 2 and k == 2 and min(arr.shape) >= 2:
        rows, cols = _fast_rows_cols(arr)
        if rows.min() < 2 or cols.min() < 2:
            return False
        return _extra_fast(arr, reading)
    return slice_condition(arr, k) and _extra_general(arr, k, reading)


def is_good(box, k: int = 2, d: int | None = None, reading: str = "count",
            general: bool = False, check_frameable: bool = True) -> GoodnessReport:
    arr = _as_array(box)
    if d is not None and d != arr.ndim:
        raise ValueError("box dimension does not match d")
    fe = frame_empty(arr, k)
    if not general and arr.ndim == 2 and k == 2 and min(arr.shape) >= 2:
        rows, cols = _fast_rows_cols(arr)
        sliced = rows.min() >= 2 and cols.min() >= 2
        extra = _extra_fast(arr, reading)
    else:
        sliced = slice_condition(arr, k)
        extra = _extra_general(arr, k, reading)
    frameable = (fe or is_frameable_exact(arr, k)) if check_frameable else (True if fe else None)
    return GoodnessReport(bool(sliced and extra), frameable, fe, bool(extra))


def subarray(cfg: Configuration, lo, shape) -> np.ndarray:
    """Values on ``lo + [0, shape)``; wraps on a torus, reads 1 outside a box."""
    g = cfg.geometry
    idx = []
    inside = np.ones(tuple(shape), bool)
    for ax, (l, n) in enumerate(zip(lo, shape)):
        r = np.arange(l, l + n) - g.origin[ax]
        if g.is_torus:
            r = r % g.extent[ax]
        else:
            ok = (r >= 0) & (r < g.extent[ax])
            sh = [1] * len(shape)
            sh[ax] = n
            inside &= ok.reshape(sh)
            r = np.clip(r, 0, g.extent[ax] - 1)
        idx.append(r)
    out = cfg.occupancy[np.ix_(*idx)].copy()
    out[~inside] = 1
    return out


def _orient(i, j, L):
    """Return ``(i, j, alpha)`` with ``j = i + (L+1) e_alpha``."""
    i, j = tuple(i), tuple(j)
    diff = [b - a for a, b in zip(i, j)]
    nz = [ax for ax, v in enumerate(diff) if v]
    if len(nz) != 1 or abs(diff[nz[0]]) != L + 1:
        raise ValueError(f"{i} and {j} are not adjacent coarse vertices")
    return (i, j, nz[0]) if diff[nz[0]] > 0 else (j, i, nz[0])


def _box_good(cfg, lo, ell, k, reading, cache):
    key = ("good", lo)
    if key not in cache:
        cache[key] = is_good_array(subarray(cfg, lo, (ell,) * len(lo)), k, reading)
    return cache[key]


def _box_frameable(cfg, lo, ell, k, cache):
    key = ("frameable", lo)
    if key not in cache:
        cache[key] = is_frameable_exact(subarray(cfg, lo, (ell,) * len(lo)), k)
    return cache[key]


def supergood_path_search(cfg: Configuration, sc: ScaleParams, i, j, reading: str = "count"):
    """Shortest sequence of adjacent good boxes from ``i + [ell]^d`` to
    ``j - (ell+1) e_alpha + [ell]^d`` containing a frameable box; None if there is none.

    Boxes are returned as their lowest sites (``anchor + 1``).
    """
    i, j, alpha = _orient(i, j, sc.L)
    ell, L, k, d = sc.ell, sc.L, sc.k, len(i)
    axis = box_anchors(L, ell)
    start = (0,) * d
    goal = tuple(len(axis) - 1 if ax == alpha else 0 for ax in range(d))
    lo = lambda b: tuple(i[ax] + axis[b[ax]] + 1 for ax in range(d))
    cache: dict = {}
    good = lambda b: _box_good(cfg, lo(b), ell, k, reading, cache)
    frameable = lambda b: _box_frameable(cfg, lo(b), ell, k, cache)
    if not good(start):
        return None
    s0 = (start, frameable(start))
    prev = {s0: None}
    frontier = [s0]
    max_len = 3 * L
    length = 1
    while frontier and length <= max_len:
        for s in frontier:
            if s[0] == goal and s[1]:
                path = []
                while s is not None:
                    path.append(lo(s[0]))
                    s = prev[s]
                return path[::-1]
        nxt = []
        for b, flag in frontier:
            for ax in range(d):
                for step in (1, -1):
                    c = list(b)
                    c[ax] += step
                    if not 0 <= c[ax] < len(axis):
                        continue
                    c = tuple(c)
                    if not good(c):
                        continue
                    t = (c, flag or frameable(c))
                    if t not in prev:
                        prev[t] = (b, flag)
                        nxt.append(t)
        frontier = nxt
        length += 1
    return None


def end_faces(i, j, ell: int, L: int) -> tuple:
    """External (d-1)-faces of the end boxes adjacent to ``i`` and ``j``: lists of ``(lo, shape)``."""
    i, j, alpha = _orient(i, j, L)
    d = len(i)
    fi, fj = [], []
    for b in range(d):
        lo = tuple(i[ax] + (0 if ax == b else 1) for ax in range(d))
        fi.append((lo, tuple(1 if ax == b else ell for ax in range(d))))
        if b == alpha:
            lo = tuple(j[ax] + (0 if ax == b else 1) for ax in range(d))
        else:
            lo = tuple(j[ax] - ell if ax == alpha else j[ax] + (0 if ax == b else 1) for ax in range(d))
        fj.append((lo, tuple(1 if ax == b else ell for ax in range(d))))
    return fi, fj


def face_good(cfg: Configuration, lo, shape, k: int, reading: str = "count") -> bool:
    arr = subarray(cfg, lo, shape)
    keep = tuple(n for n in shape if n != 1) or (1,)
    return is_good_array(arr.reshape(keep), k - 1, reading)


def block_connected(cfg: Configuration, sc: ScaleParams, i, j, reading: str = "count") -> bool:
    fi, fj = end_faces(i, j, sc.ell, sc.L)
    if not all(face_good(cfg, lo, sh, sc.k, reading) for lo, sh in fi + fj):
        return False
    return supergood_path_search(cfg, sc, i, j, reading) is not None


# coarse percolation


@dataclass(frozen=True)
class CoarseEdgeConfig:
    """Bond configuration on the coarse torus ``(Z/n)^d``: ``open[a][v]`` is the edge ``v ~ v + e_a``."""

    n: int
    d: int
    open: np.ndarray

    def clusters(self) -> tuple:
        """``(n_components, labels)`` with labels over C-ordered vertices."""
        shape = (self.n,) * self.d
        N = self.n**self.d
        ids = np.arange(N).reshape(shape)
        rows, cols = [], []
        for a in range(self.d):
            m = self.open[a]
            rows.append(ids[m])
            cols.append(np.roll(ids, -1, axis=a)[m])
        r = np.concatenate(rows) if rows else np.empty(0, int)
        c = np.concatenate(cols) if cols else np.empty(0, int)
        graph = sparse.coo_matrix((np.ones(r.size), (r, c)), shape=(N, N))
        return connected_components(graph, directed=False)

    def stats(self) -> dict:
        ncomp, labels = self.clusters()
        sizes = np.bincount(labels)
        big = int(sizes.argmax())
        return {
            "open_fraction": float(self.open.mean()) if self.open.size else 0.0,
            "n_clusters": int(ncomp),
            "largest_fraction": float(sizes[big] / labels.size),
            "origin_in_largest": bool(labels[0] == big and sizes[big] > 1),
            "origin_cluster_size": int(sizes[labels[0]]),
        }


def coarse_percolation(cfg: Configuration, sc: ScaleParams, n: int | None = None,
                       reading: str = "count") -> CoarseEdgeConfig:
    """Block connectivity of every edge of the coarse torus carried by a fine torus of extent ``n (L+1)``."""
    g = cfg.geometry
    d = g.d
    if not g.is_torus:
        raise ValueError("coarse percolation runs on a torus")
    side = sc.L + 1
    if n is None:
        n = g.extent[0] // side
    if any(e != n * side for e in g.extent):
        raise ValueError(f"torus extent must be {n} * (L+1) on every axis")
    opened = np.zeros((d,) + (n,) * d, bool)
    for v in itertools.product(range(n), repeat=d):
        i = tuple(side * c for c in v)
        for a in range(d):
            j = tuple(c + (side if ax == a else 0) for ax, c in enumerate(i))
            opened[(a,) + v] = block_connected(cfg, sc, i, j, reading)
    return CoarseEdgeConfig(n, d, opened)


def bernoulli_edges(p: float, n: int, d: int, rng) -> CoarseEdgeConfig:
    return CoarseEdgeConfig(n, d, rng.random((d,) + (n,) * d) < p)


@dataclass(frozen=True)
class AuxDiffusion:
    D: float
    stderr: float
    steps: int
    replicas: int


def _walk(env: CoarseEdgeConfig, start, steps: int, rng) -> np.ndarray:
    """Lazy walk: pick one of 2d directions, move iff that edge is open. Returns unwrapped displacement."""
    n, d = env.n, env.d
    pos = np.array(start, dtype=np.int64)
    disp = np.zeros(d, np.int64)
    dirs = rng.integers(0, 2 * d, size=steps)
    for s in dirs:
        a, sign = divmod(int(s), 2)
        if sign == 0:
            ok = env.open[(a,) + tuple(pos)]
            step = 1
        else:
            back = pos.copy()
            back[a] = (back[a] - 1) % n
            ok = env.open[(a,) + tuple(back)]
            step = -1
        if ok:
            pos[a] = (pos[a] + step) % n
            disp[a] += step
    return disp


def rw_on_cluster_D(edge_source, steps: int, replicas: int, seed: int = 0, n: int | None = None) -> AuxDiffusion:
    """``E|X_T|^2 / T`` for the lazy walk; equals 1 on the full lattice.

    ``edge_source`` is a CoarseEdgeConfig (walks start at the origin) or an open
    probability p (fresh torus per replica, start uniform in its largest cluster).
    """
    if steps < 1 or replicas < 1:
        raise ValueError("steps and replicas must be positive")
    seeds = spawn_seeds(seed, replicas)
    sq = np.empty(replicas)
    for r, ss in enumerate(seeds):
        rng = make_rng(ss)
        if isinstance(edge_source, CoarseEdgeConfig):
            env, start = edge_source, (0,) * edge_source.d
            _, labels = env.clusters()
            if np.count_nonzero(labels == labels[0]) < 2:
                raise OriginIsolated("the origin has no open edge")
        else:
            p = float(edge_source)
            side = n or max(32, 4 * int(math.sqrt(steps)) + 1)
            env = bernoulli_edges(p, side, 2, rng)
            _, labels = env.clusters()
            sizes = np.bincount(labels)
            if sizes.max() < 2:
                raise OriginIsolated(f"no open edge at p={p}")
            members = np.flatnonzero(labels == sizes.argmax())
            start = np.unravel_index(rng.choice(members), (side,) * 2)
        disp = _walk(env, start, steps, rng)
        sq[r] = float((disp * disp).sum())
    D = sq.mean() / steps
    err = sq.std(ddof=1) / math.sqrt(replicas) / steps if replicas > 1 else math.nan
    return AuxDiffusion(float(D), float(err), steps, replicas)


@dataclass(frozen=True)
class LowerBound:
    value: float
    stderr: float
    rigorous: bool
    T: int
    loss: float


def lower_bound_assembly(T: int, loss, d_aux: float, d_aux_stderr: float = 0.0) -> LowerBound:
    """``D_aux / (T^2 2^loss)``; flagged non-rigorous when the loss was only sampled."""
    if T < 1:
        raise ValueError("T must be positive")
    bits = float(getattr(loss, "value", loss))
    rigorous = getattr(loss, "mode", "exact") == "exact"
    scale = 1.0 / (T * T * 2.0**bits)
    return LowerBound(d_aux * scale, d_aux_stderr * scale, rigorous, int(T), bits)


# Monte Carlo scans


@dataclass(frozen=True)
class BoxProbabilities:
    q: float
    ell: int
    n: int
    good: int
    frame_empty: int
    frameable: int | None

    def csv_row(self, seed=None) -> list:
        fr = None if self.frameable is None else self.frameable / self.n
        return [self.q, self.ell, self.n, self.good / self.n, self.frame_empty / self.n, fr, seed]


BOX_CSV_HEADER = ["q", "ell", "n", "p_good", "p_frame_empty", "p_frameable", "seed"]
PERCOLATION_CSV_HEADER = ["q", "ell", "L", "n_coarse", "open_fraction", "largest_fraction",
                          "origin_in_largest", "seed"]
DAUX_CSV_HEADER = ["source", "steps", "replicas", "D_aux", "stderr", "seed"]


def box_probabilities(q: float, ell: int, n: int, seed: int = 0, k: int = 2, d: int = 2,
                      frameable: bool = False, reading: str = "count") -> BoxProbabilities:
    rng = make_rng(seed)
    good = fe = fr = 0
    for _ in range(n):
        arr = (rng.random((ell,) * d) >= q).astype(np.uint8)
        good += is_good_array(arr, k, reading)
        e = frame_empty(arr, k)
        fe += e
        if frameable:
            fr += e or is_frameable_exact(arr, k)
    return BoxProbabilities(q, ell, n, good, fe, fr if frameable else None)


def percolation_row(cfg_seed: int, q: float, sc: ScaleParams, n_coarse: int) -> list:
    """Sample a fine torus, evaluate every coarse edge and summarize."""
    g = LatticeGeometry(sc.d, (n_coarse * (sc.L + 1),) * sc.d)
    rng = make_rng(cfg_seed)
    cfg = Configuration(g, (rng.random(g.extent) >= q).astype(np.uint8))
    st = coarse_percolation(cfg, sc, n_coarse).stats()
    return [q, sc.ell, sc.L, n_coarse, st["open_fraction"], st["largest_fraction"],
            st["origin_in_largest"], cfg_seed]
