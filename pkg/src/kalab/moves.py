"""T-step moves: replayable sequences of legal KA transitions with a tracked marked particle.

Traces are materialized edge lists. Builders for the elementary k=d=2 moves run on a
mutable working copy that refuses illegal steps as they are emitted; ``verify_trace``
replays a finished trace independently through :func:`lattice.apply_legal`.

Local move geometry uses ``[ell] = {1..ell}`` offsets from the anchor: the columns of
``column_exchange_move(ell, y)`` are ``y + {0} x [ell]`` and ``y + {1} x [ell]``.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .lattice import (
    Configuration,
    ConstraintViolated,
    Edge,
    LatticeError,
    NoParticleExchange,
    apply_legal,
)


class MoveError(RuntimeError):
    pass


class IllegalStep(MoveError):
    """A swap in a trace is not a legal KA transition (a builder bug)."""

    def __init__(self, t: int, edge, reason: str = ""):
        super().__init__(f"step {t}: {edge} is illegal{': ' + reason if reason else ''}")
        self.t = t
        self.edge = edge


class DomainViolated(MoveError):
    pass


class UnsupportedInstance(MoveError):
    """The builder does not handle this domain element."""


class StateSpaceTooLarge(MoveError):
    pass


NOOP = None


@dataclass(frozen=True)
class MoveTrace:
    steps: tuple
    plan: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "plan", tuple(self.plan))

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def n_swaps(self) -> int:
        return sum(s is not None for s in self.steps)

    def padded(self, T: int) -> "MoveTrace":
        if T < self.T:
            raise ValueError("cannot pad to a shorter length")
        return MoveTrace(self.steps + (NOOP,) * (T - self.T), self.plan)

    def reversed(self) -> "MoveTrace":
        return MoveTrace(tuple(reversed(self.steps)), self.plan)


def _track(marked, e: Edge):
    if marked == e.a:
        return e.b
    if marked == e.b:
        return e.a
    return marked


def replay(cfg: Configuration, marked, k: int, trace: MoveTrace):
    """Yield ``(cfg_t, marked_t)`` for t = 0..T, raising IllegalStep on a bad swap."""
    marked = tuple(marked)
    yield cfg, marked
    for t, e in enumerate(trace.steps, start=1):
        if e is not None:
            try:
                cfg = apply_legal(cfg, k, e)
            except (ConstraintViolated, NoParticleExchange, LatticeError) as err:
                raise IllegalStep(t, e, str(err)) from err
            marked = _track(marked, e)
        yield cfg, marked


def verify_trace(cfg: Configuration, marked, k: int, trace: MoveTrace) -> tuple:
    if cfg.value(marked) != 1:
        raise DomainViolated(f"marked site {marked} is empty")
    out = None
    for out in replay(cfg, marked, k, trace):
        pass
    return out


class _Work:
    """Mutable d=2 working copy that only accepts legal swaps."""

    def __init__(self, cfg: Configuration, marked, k: int = 2, region=None):
        g = cfg.geometry
        if g.d != 2 or g.is_torus:
            raise MoveError("move builders work on two-dimensional occupied-exterior boxes")
        self.cfg0 = cfg
        self.k = k
        self.ox, self.oy = g.origin
        self.nx, self.ny = g.extent
        self.occ = cfg.occupancy.copy()
        self.marked = tuple(marked) if marked is not None else None
        self.region = None if region is None else frozenset(region)
        self.steps: list = []
        self.plan: list = []

    def val(self, x) -> int:
        i, j = x[0] - self.ox, x[1] - self.oy
        if 0 <= i < self.nx and 0 <= j < self.ny:
            return int(self.occ[i, j])
        return 1

    def _set(self, x, v):
        self.occ[x[0] - self.ox, x[1] - self.oy] = v

    def other_empty(self, x, y) -> int:
        a, b = x
        return sum(1 - self.val(z) for z in ((a + 1, b), (a - 1, b), (a, b + 1), (a, b - 1)) if z != y)

    def legal(self, a, b) -> bool:
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1 or self.val(a) == self.val(b):
            return False
        return self.other_empty(a, b) >= self.k - 1 and self.other_empty(b, a) >= self.k - 1

    def step(self, a, b):
        """Particle jump between ``a`` and ``b`` (either order)."""
        a, b = tuple(a), tuple(b)
        e = Edge(a, b)
        t = len(self.steps) + 1
        if self.region is not None and (a not in self.region or b not in self.region):
            raise IllegalStep(t, e, "leaves the move region")
        if not self.legal(a, b):
            raise IllegalStep(t, e, "constraint or occupancy")
        va, vb = self.val(a), self.val(b)
        self._set(a, vb)
        self._set(b, va)
        self.marked = _track(self.marked, e)
        self.steps.append(e)

    def extend(self, trace_steps):
        for e in trace_steps:
            if e is not None:
                self.step(e.a, e.b)

    def note(self, name: str, anchor, **params):
        self.plan.append((name, tuple(anchor), params, len(self.steps)))

    def configuration(self) -> Configuration:
        return Configuration(self.cfg0.geometry, self.occ)

    def trace(self) -> MoveTrace:
        return MoveTrace(self.steps, self.plan)

    # line primitives: a line is a list of sites, consecutive ones adjacent

    def slide(self, line, i_from: int, i_to: int):
        """Carry the vacancy at ``line[i_from]`` to ``line[i_to]``; the others keep their order."""
        if self.val(line[i_from]) != 0:
            raise DomainViolated(f"no vacancy at {line[i_from]}")
        s = 1 if i_to > i_from else -1
        for i in range(i_from, i_to, s):
            a, b = line[i], line[i + s]
            if self.val(a) != self.val(b):
                self.step(b, a)

    def line_exchange(self, empty, other):
        """Exchange an empty line with the parallel adjacent line ``other`` (>= 1 vacancy)."""
        n = len(empty)
        if any(self.val(x) for x in empty):
            raise DomainViolated("line to exchange into is not empty")
        holes = [i for i, x in enumerate(other) if self.val(x) == 0]
        if not holes:
            raise DomainViolated("adjacent line has no vacancy")
        v = holes[0]
        self.slide(other, v, 0)
        for y in range(1, n):
            if self.val(other[y]):
                self.step(other[y], other[y - 1])
                self.step(other[y - 1], empty[y - 1])
        self.slide(empty, n - 1, v)


@dataclass(frozen=True)
class MoveSpec:
    name: str
    k: int
    region: frozenset
    domain: Callable
    builder: Callable
    postcondition: Callable
    declared_T_bound: Callable
    declared_loss_bound: Callable
    params: dict = field(default_factory=dict)

    def in_domain(self, cfg: Configuration, marked) -> bool:
        return cfg.value(marked) == 1 and bool(self.domain(cfg, marked))

    def build(self, cfg: Configuration, marked) -> MoveTrace:
        if not self.in_domain(cfg, marked):
            raise DomainViolated(f"{self.name}: configuration outside the domain")
        return self.builder(cfg, marked)

    def run(self, cfg: Configuration, marked) -> tuple:
        """Build, replay and check the postcondition: ``(trace, final_cfg, final_marked)``."""
        trace = self.build(cfg, marked)
        plain = untranslate_trace(marked, trace) if self.params.get("translated") else trace
        cfg1, m1 = verify_trace(cfg, marked, self.k, plain)
        if not self.postcondition(cfg, tuple(marked), cfg1, m1):
            raise MoveError(f"{self.name}: postcondition fails after replay")
        return trace, cfg1, m1


def _column(x, y0, ell):
    return [(x, y0 + i) for i in range(1, ell + 1)]


def _add(a, b):
    return (a[0] + b[0], a[1] + b[1])


def _unchanged_outside(cfg0, cfg1, sites) -> bool:
    sites = set(sites)
    diff = np.argwhere(cfg0.occupancy != cfg1.occupancy) + np.asarray(cfg0.geometry.origin)
    return all(tuple(int(c) for c in x) in sites for x in diff)


def _require_2d(cfg):
    if cfg.geometry.d != 2:
        raise DomainViolated("elementary moves are built for d=2")


# column exchange


def column_exchange_move(ell: int, anchor=(0, 0)) -> MoveSpec:
    ax, ay = anchor
    A, B = _column(ax, ay, ell), _column(ax + 1, ay, ell)

    def domain(cfg, marked):
        _require_2d(cfg)
        return all(cfg.value(x) == 0 for x in A) and any(cfg.value(x) == 0 for x in B)

    def builder(cfg, marked):
        w = _Work(cfg, marked, 2, A + B)
        w.note("column-exchange", anchor, ell=ell)
        w.line_exchange(A, B)
        return w.trace()

    def post(cfg0, m0, cfg1, m1):
        ok = all(cfg1.value(a) == cfg0.value(b) and cfg1.value(b) == 0 for a, b in zip(A, B))
        want = (m0[0] - 1, m0[1]) if m0 in B else m0
        return ok and m1 == want and _unchanged_outside(cfg0, cfg1, A + B)

    return MoveSpec("column-exchange", 2, frozenset(A + B), domain, builder, post,
                    lambda ell_, L=None: 4 * ell_, lambda ell_: 2 * math.log2(ell_) + 2,
                    {"ell": ell, "anchor": tuple(anchor)})


# framing


def _box_sites(anchor, ell):
    return [(anchor[0] + u, anchor[1] + v) for u in range(1, ell + 1) for v in range(1, ell + 1)]


def _box_array(cfg, anchor, ell) -> np.ndarray:
    return np.array([[cfg.value((anchor[0] + u, anchor[1] + v)) for v in range(1, ell + 1)]
                     for u in range(1, ell + 1)], dtype=np.uint8)


def _frame(w: _Work, anchor, ell):
    """Empty the left column of a box whose bottom row is empty and whose rows all hold a vacancy."""
    ax, ay = anchor
    row = lambda r: [(ax + u, ay + r) for u in range(1, ell + 1)]
    for r in range(2, ell + 1):
        line = row(r)
        holes = [i for i, x in enumerate(line) if w.val(x) == 0]
        if not holes:
            raise DomainViolated(f"row {r} of the box has no vacancy")
        w.slide(line, holes[0], 0)
        w.line_exchange(row(r - 1), line)
    for r in range(ell, 1, -1):
        w.line_exchange(row(r), row(r - 1))


def framing_move(ell: int, box_anchor=(0, 0)) -> MoveSpec:
    from .coarse import is_good_array

    sites = _box_sites(box_anchor, ell)
    ax, ay = box_anchor
    bottom = [(ax + u, ay + 1) for u in range(1, ell + 1)]
    left = [(ax + 1, ay + v) for v in range(1, ell + 1)]

    def domain(cfg, marked):
        _require_2d(cfg)
        return all(cfg.value(x) == 0 for x in bottom) and is_good_array(_box_array(cfg, box_anchor, ell))

    def builder(cfg, marked):
        w = _Work(cfg, marked, 2, sites)
        w.note("frame", box_anchor, ell=ell)
        _frame(w, box_anchor, ell)
        return w.trace()

    def post(cfg0, m0, cfg1, m1):
        framed = all(cfg1.value(x) == 0 for x in bottom + left)
        inside = m1 in sites if m0 in sites else m1 == m0
        same_n = sum(cfg0.value(x) for x in sites) == sum(cfg1.value(x) for x in sites)
        return framed and inside and same_n and _unchanged_outside(cfg0, cfg1, sites)

    return MoveSpec("framing", 2, frozenset(sites), domain, builder, post,
                    lambda ell_, L=None: 9 * ell_ * ell_, lambda ell_: ell_ * (2 * math.log2(ell_) + 2),
                    {"ell": ell, "anchor": tuple(box_anchor)})


# permutation


class _FramedBox:
    """Framed box with a movable empty lane; orientation 0 moves rows, 1 moves columns.

    Local coordinates are 0-based: the frame is u=0 and v=0. With the lane of one
    orientation at level r the lines 0..r-1 hold shifted copies of lines 1..r, and
    the frame line of the other orientation stays empty.
    """

    def __init__(self, w: _Work, anchor, ell: int):
        self.w, self.ell = w, ell
        self.ax, self.ay = anchor[0] + 1, anchor[1] + 1
        self.level = [0, 0]

    def site(self, u, v, o):
        return (self.ax + u, self.ay + v) if o == 0 else (self.ax + v, self.ay + u)

    def line(self, r, o):
        return [self.site(u, r, o) for u in range(self.ell)]

    def set_level(self, o, target):
        if self.level[1 - o]:
            self.set_level(1 - o, 0)
        r = self.level[o]
        while r < target:
            self.w.line_exchange(self.line(r, o), self.line(r + 1, o))
            r += 1
        while r > target:
            self.w.line_exchange(self.line(r, o), self.line(r - 1, o))
            r -= 1
        self.level[o] = r

    def transpose(self, x, y, o):
        """Exchange local sites (x, y) and (x+1, y) of orientation ``o``, marked included."""
        w, S = self.w, lambda u, v: self.site(u, v, o)
        a, b = S(x, y), S(x + 1, y)
        # lines past the lane hold their own content only once the other lane is home
        self.set_level(o, y - 1)
        va, vb = w.val(a), w.val(b)
        if va == vb and not (va and w.marked in (a, b)):
            return
        if va != vb:
            w.step(a, b)
            return
        # two particles, one marked: go round through the lane below
        row = self.line(y, o)
        w.slide(row, 0, x - 1)
        w.step(a, S(x, y - 1))
        w.step(b, a)
        w.step(a, S(x - 1, y))
        w.step(S(x, y - 1), S(x + 1, y - 1))
        w.step(S(x + 1, y - 1), b)
        w.step(S(x - 1, y), a)
        w.slide(row, x - 1, 0)


def _snake(ell):
    out = []
    for v in range(1, ell):
        us = range(1, ell) if v % 2 else range(ell - 1, 0, -1)
        out.extend((u, v) for u in us)
    return out


def _sort_keys(cur, tgt, mi, mt):
    """Destination snake index for each current item; same-kind items keep their order."""
    keys = [0] * len(cur)
    for val in (0, 1):
        src = [i for i, c in enumerate(cur) if c == val and i != mi]
        dst = [j for j, c in enumerate(tgt) if c == val and j != mt]
        for i, j in zip(src, dst):
            keys[i] = j
    if mi is not None:
        keys[mi] = mt
    return keys


def _permute(w: _Work, anchor, ell, sigma: dict):
    fb = _FramedBox(w, anchor, ell)
    P = _snake(ell)
    glob = [fb.site(u, v, 0) for u, v in P]
    pos = {s: i for i, s in enumerate(glob)}
    cur = [w.val(s) for s in glob]
    tgt = [0] * len(glob)
    for i, s in enumerate(glob):
        tgt[pos[sigma.get(s, s)]] = cur[i]
    mi = pos.get(w.marked)
    mt = None if mi is None else pos[sigma.get(w.marked, w.marked)]
    keys = _sort_keys(cur, tgt, mi, mt)
    n = len(keys)
    for end in range(n - 1, 0, -1):
        swapped = False
        for i in range(end):
            if keys[i] > keys[i + 1]:
                (u0, v0), (u1, v1) = P[i], P[i + 1]
                if v0 == v1:
                    fb.transpose(min(u0, u1), v0, 0)
                else:
                    fb.transpose(min(v0, v1), u0, 1)
                keys[i], keys[i + 1] = keys[i + 1], keys[i]
                swapped = True
        if not swapped:
            break
    fb.set_level(0, 0)
    fb.set_level(1, 0)


def _check_sigma(sigma: dict, interior) -> dict:
    sigma = {tuple(a): tuple(b) for a, b in sigma.items()}
    inner = set(interior)
    if not set(sigma) <= inner or set(sigma.values()) != set(sigma):
        raise ValueError("sigma must permute sites of the box interior")
    return sigma


def permutation_move(ell: int, sigma: dict, box_anchor=(0, 0)) -> MoveSpec:
    ax, ay = box_anchor
    sites = _box_sites(box_anchor, ell)
    frame = [x for x in sites if x[0] == ax + 1 or x[1] == ay + 1]
    interior = [x for x in sites if x[0] > ax + 1 and x[1] > ay + 1]
    sigma = _check_sigma(sigma, interior)

    def domain(cfg, marked):
        _require_2d(cfg)
        return all(cfg.value(x) == 0 for x in frame) and any(cfg.value(x) == 0 for x in interior)

    def builder(cfg, marked):
        w = _Work(cfg, marked, 2, sites)
        w.note("permute", box_anchor, ell=ell)
        _permute(w, box_anchor, ell, sigma)
        return w.trace()

    def post(cfg0, m0, cfg1, m1):
        ok = all(cfg1.value(sigma.get(x, x)) == cfg0.value(x) for x in interior)
        ok = ok and all(cfg1.value(x) == 0 for x in frame)
        return ok and m1 == sigma.get(m0, m0) and _unchanged_outside(cfg0, cfg1, sites)

    n = (ell - 1) ** 2
    return MoveSpec("permutation", 2, frozenset(sites), domain, builder, post,
                    lambda ell_, L=None: (n * (n - 1) // 2) * (8 * ell_ * ell_ + 2 * ell_ + 8) + 8 * ell_ * ell_,
                    lambda ell_: ell_ * ell_ * (2 * math.log2(ell_) + 2),
                    {"ell": ell, "anchor": tuple(box_anchor), "sigma": sigma})


# jump


_LOCAL_CACHE: dict = {}


def _local_swap_path(vals: tuple, shape, marked: int, a: int, b: int, k: int, max_states=200_000):
    """Shortest legal swap sequence inside a window (exterior occupied) exchanging
    window cells ``a`` and ``b`` with the marked particle at ``marked`` carried along.

    Cells are numbered ``i * ny + j``. Returns a list of cell pairs or None.
    """
    key = (vals, shape, marked, a, b, k)
    if key in _LOCAL_CACHE:
        return _LOCAL_CACHE[key]
    nx, ny = shape
    nbrs = []
    for c in range(nx * ny):
        i, j = divmod(c, ny)
        nbrs.append([(i + di) * ny + j + dj for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
                     if 0 <= i + di < nx and 0 <= j + dj < ny])
    goal = list(vals)
    goal[a], goal[b] = vals[b], vals[a]
    goal_m = {a: b, b: a}.get(marked, marked)
    start, target = (vals, marked), (tuple(goal), goal_m)
    prev = {start: None}
    queue = deque([start])
    found = start == target
    while queue and not found:
        s = queue.popleft()
        occ, m = s
        for x in range(nx * ny):
            if not occ[x]:
                continue
            for y in nbrs[x]:
                if occ[y]:
                    continue
                ex = sum(1 - occ[z] for z in nbrs[x] if z != y)
                ey = sum(1 - occ[z] for z in nbrs[y] if z != x)
                if ex < k - 1 or ey < k - 1:
                    continue
                nocc = list(occ)
                nocc[x], nocc[y] = 0, 1
                t = (tuple(nocc), y if m == x else m)
                if t in prev:
                    continue
                prev[t] = (s, (x, y))
                if t == target:
                    found = True
                    break
                queue.append(t)
            if found:
                break
        if len(prev) > max_states:
            raise StateSpaceTooLarge(f"local search exceeded {max_states} states")
    path = None
    if found:
        path, s = [], target
        while prev[s] is not None:
            s, mv = prev[s]
            path.append(mv)
        path.reverse()
    _LOCAL_CACHE[key] = path
    return path


def _local_swap(w: _Work, a, b, cols, rows):
    """Exchange sites ``a`` and ``b`` using swaps inside ``cols x rows`` only."""
    cells = [(x, y) for x in cols for y in rows]
    idx = {s: i for i, s in enumerate(cells)}
    vals = tuple(w.val(s) for s in cells)
    path = _local_swap_path(vals, (len(cols), len(rows)), idx.get(w.marked, -1), idx[a], idx[b], w.k)
    if path is None:
        return False
    for x, y in path:
        w.step(cells[x], cells[y])
    return True


def _pocket(w: _Work, line, s):
    """Bring the nearest vacancy of ``line`` (other than index ``s``) next to ``s``; returns (from, to)."""
    holes = [i for i, x in enumerate(line) if w.val(x) == 0 and i != s]
    if not holes:
        raise DomainViolated("no vacancy to bring next to the jump site")
    h = min(holes, key=lambda i: (abs(i - s), i))
    to = s - 1 if h < s else s + 1
    w.slide(line, h, to)
    return h, to


def _jump(w: _Work, A, M, C, s):
    """Carry the content of ``A[s]`` to ``C[s]`` and back (``M`` empty throughout the ends)."""
    ell = len(A)
    ha = _pocket(w, A, s)
    w.line_exchange(M, C)
    hm = _pocket(w, M, s)
    a, b = A[s], M[s]
    if w.val(a) != w.val(b):
        w.step(a, b)
    elif w.val(a) and w.marked in (a, b):
        cols = [A[0][0], M[0][0], C[0][0]]
        done = False
        for half in (1, 2, 3):
            lo, hi = max(0, s - half), min(ell - 1, s + half)
            rows = [A[i][1] for i in range(lo, hi + 1)]
            if _local_swap(w, a, b, cols, rows):
                done = True
                break
        if not done:
            raise MoveError("local exchange next to the jump site not found")
    w.slide(M, hm[1], hm[0])
    w.line_exchange(C, M)
    w.slide(A, ha[1], ha[0])


def jump_move(ell: int, anchor=(0, 0), star=None) -> MoveSpec:
    ax, ay = anchor
    A, M, C = (_column(ax + i, ay, ell) for i in range(3))
    star = A[0] if star is None else tuple(star)
    if star not in A:
        raise ValueError("star must lie in the left column")
    s = A.index(star)
    target = C[s]

    def domain(cfg, marked):
        _require_2d(cfg)
        return (all(cfg.value(x) == 0 for x in M)
                and any(cfg.value(x) == 0 for x in A if x != star)
                and sum(cfg.value(x) == 0 for x in C) >= 2)

    def builder(cfg, marked):
        w = _Work(cfg, marked, 2, A + M + C)
        w.note("jump", anchor, ell=ell, star=star)
        _jump(w, A, M, C, s)
        return w.trace()

    def post(cfg0, m0, cfg1, m1):
        want = {star: cfg0.value(target), target: cfg0.value(star)}
        ok = all(cfg1.value(x) == want.get(x, cfg0.value(x)) for x in A + M + C)
        return ok and m1 == {star: target, target: star}.get(m0, m0) and _unchanged_outside(cfg0, cfg1, A + M + C)

    return MoveSpec("jump", 2, frozenset(A + M + C), domain, builder, post,
                    lambda ell_, L=None: 12 * ell_ + 64, lambda ell_: 4 * math.log2(ell_) + 4,
                    {"ell": ell, "anchor": tuple(anchor), "star": star})


# composed block exchange


def _straight_band(cfg, sc):
    """Lowest sites of the bottom-band boxes and the index of the first frameable one, or None."""
    from . import coarse

    lows = [(a + 1, 1) for a in coarse.box_anchors(sc.L, sc.ell)]
    arrays = [coarse.subarray(cfg, lo, (sc.ell, sc.ell)) for lo in lows]
    if not all(coarse.is_good_array(a, 2) for a in arrays):
        return None
    for f, a in enumerate(arrays):
        if coarse.is_frameable_exact(a, 2):
            return lows, f
    return None


def _block_exchange(w: _Work, sc, lows, f):
    from . import coarse

    ell, L = sc.ell, sc.L
    col = lambda c: _column(c, 0, ell)
    row0 = [(x, 0) for x in range(1, L + 1)]

    # preparation: frame one box, bring its empty column to x=1, then empty row 1 of the band
    p0 = len(w.steps)
    lo = lows[f]
    w.note("frame-box", lo, ell=ell)
    path = coarse.frame_search(coarse.subarray(w.configuration(), lo, (ell, ell)), 2)
    for a, b in path:
        (ua, va), (ub, vb) = divmod(a, ell), divmod(b, ell)
        w.step((lo[0] + ua, lo[1] + va), (lo[0] + ub, lo[1] + vb))
    w.note("sweep-column", (lo[0], 1), to=1)
    for c in range(lo[0], 1, -1):
        w.line_exchange(col(c), col(c - 1))
    w.note("empty-band-row", (1, 1), length=L)
    for c in range(2, L + 1):
        holes = [i for i, x in enumerate(col(c)) if w.val(x) == 0]
        w.slide(col(c), holes[0], 0)
        w.line_exchange(col(c - 1), col(c))
    for c in range(L, 1, -1):
        w.line_exchange(col(c), col(c - 1))
    p1 = len(w.steps)

    # transport along the two bottom lanes
    w.note("open-lanes", (0, 1))
    f0 = col(0)
    v0 = min(i for i, x in enumerate(f0) if w.val(x) == 0)
    w.slide(f0, v0, 0)
    for c in range(1, L):
        w.line_exchange(col(c), col(c + 1))
    fj = col(L + 1)
    vj = min(i for i, x in enumerate(fj) if w.val(x) == 0)
    w.slide(fj, vj, 0)
    holes = [i for i, x in enumerate(row0) if w.val(x) == 0]
    e1, e2 = holes[0], holes[-1]
    w.slide(row0, e1, 0)
    w.note("carry", (0, 0), to=(L + 1, 0))
    w.step((0, 0), (0, 1))
    w.slide(row0, e2, L - 1)
    w.slide(row0, 0, L - 2)
    for x in range(0, L - 2):
        w.step((x, 1), (x + 1, 1))
    star = (L + 1, 0)
    occupied = w.val(star)
    if occupied:
        for a, b in (((L + 1, 0), (L + 1, 1)), ((L + 1, 1), (L, 1)), ((L, 1), (L, 0)), ((L, 0), (L - 1, 0))):
            w.step(a, b)
    for x in range(L - 2, L + 1):
        w.step((x, 1), (x + 1, 1))
    w.step((L + 1, 1), star)
    if occupied:
        w.step((L - 1, 0), (L - 1, 1))
        for x in range(L - 1, 0, -1):
            w.step((x, 1), (x - 1, 1))
        w.slide(row0, L - 2, 0)
        w.step((0, 1), (0, 0))
    else:
        w.slide(row0, L - 2, 0)
    w.note("close-lanes", (0, 1))
    w.slide(row0, L - 1, e2)
    w.slide(row0, 0, e1)
    w.slide(fj, 0, vj)
    for c in range(L, 1, -1):
        w.line_exchange(col(c), col(c - 1))
    w.slide(f0, 0, v0)

    # undo the preparation; none of its swaps touches a neighbour of 0 or (L+1, 0)
    w.note("undo-preparation", (1, 1))
    for e in reversed(w.steps[p0:p1]):
        w.step(e.a, e.b)


def sample_block_instance(sc, q: float, rng, max_tries: int = 10_000):
    """Configuration on ``[-1, L+2] x [-1, L+1]`` with a straight super-good bottom band.

    Product measure, then the band boxes are resampled conditioned good (one of them
    also frameable), the four end faces conditioned to hold a vacancy, and 0 occupied.
    """
    from . import coarse
    from .lattice import LatticeGeometry

    ell, L = sc.ell, sc.L
    g = LatticeGeometry.box((-1, -1), (L + 2, L + 1))
    occ = (rng.random(g.extent) >= q).astype(np.uint8)
    at = lambda x, y: (x + 1, y + 1)
    anchors = coarse.box_anchors(L, ell)
    f = int(rng.integers(len(anchors)))
    for n, a in enumerate(anchors):
        fixed = max(0, (anchors[n - 1] + ell) - a) if n else 0
        for _ in range(max_tries):
            box = occ[a + 1 + 1: a + ell + 2, 2: ell + 2].copy()
            box[fixed:] = (rng.random((ell - fixed, ell)) >= q)
            if coarse.is_good_array(box, 2) and (n != f or coarse.is_frameable_exact(box, 2)):
                occ[a + 2: a + ell + 2, 2: ell + 2] = box
                break
        else:
            raise MoveError("could not sample a good box; raise max_tries or lower the density")
    faces = [(lambda: occ[at(0, 1)[0], 2: ell + 2]), (lambda: occ[2: ell + 2, at(0, 0)[1]]),
             (lambda: occ[at(L + 1, 1)[0], 2: ell + 2]), (lambda: occ[L - ell + 2: L + 2, at(0, 0)[1]])]
    for face in faces:
        view = face()
        while view.all():
            view[:] = rng.random(view.shape) >= q
    occ[at(0, 0)] = 1
    return Configuration(g, occ)


def exchange_block_move(sc) -> MoveSpec:
    """Carry the marked particle at 0 to ``(L+1) e_1`` through a straight super-good band (k=d=2).

    Instances whose only super-good paths bend raise UnsupportedInstance.
    """
    from . import coarse

    ell, L = sc.ell, sc.L
    if L < max(4, 2 * ell):
        raise ValueError("the block exchange needs L >= max(4, 2 ell)")
    j = (L + 1, 0)
    region = frozenset((x, y) for x in range(0, L + 2) for y in range(0, ell + 1))

    def domain(cfg, marked):
        _require_2d(cfg)
        return tuple(marked) == (0, 0) and coarse.block_connected(cfg, sc, (0, 0), j)

    def builder(cfg, marked):
        band = _straight_band(cfg, sc)
        if band is None:
            raise UnsupportedInstance("no straight super-good path along the bottom band")
        w = _Work(cfg, marked, 2, region)
        _block_exchange(w, sc, *band)
        return w.trace()

    def post(cfg0, m0, cfg1, m1):
        want = cfg0.with_values({(0, 0): cfg0.value(j), j: cfg0.value((0, 0))})
        return cfg1 == want and m1 == j

    return MoveSpec("block-exchange", 2, region, domain, builder, post,
                    lambda ell_, L_: 40 * L_ * ell_ + 9 * ell_ * ell_, lambda ell_: math.inf,
                    {"ell": ell, "L": L})


# information loss


class DomainTooLarge(MoveError):
    pass


@dataclass(frozen=True)
class LossEstimate:
    value: float
    mode: str
    max_collisions: int
    n_domain: int
    T: int

    @property
    def bits(self) -> int:
        return math.ceil(self.value - 1e-12)


def _key(cfg: Configuration) -> bytes:
    return cfg.occupancy.tobytes()


def compute_loss(spec: MoveSpec, domain_iter, mode: str = "exact", max_configs: int = 2**24) -> LossEstimate:
    """``log2`` of the largest number of domain configurations that agree at two consecutive times.

    Domain elements are ``(cfg, marked)`` pairs identified by their configuration; traces are
    padded with no-ops to a common length. ``exact`` requires ``domain_iter`` to enumerate the
    whole domain; ``sampled`` reports the same maximum over a sample, a lower bound on the loss.
    """
    if mode not in ("exact", "sampled"):
        raise ValueError("mode must be 'exact' or 'sampled'")
    seqs, seen = [], set()
    for n, (cfg, marked) in enumerate(domain_iter):
        if n >= max_configs:
            raise DomainTooLarge(f"domain exceeds {max_configs} configurations")
        k0 = _key(cfg)
        if k0 in seen or not spec.in_domain(cfg, marked):
            continue
        seen.add(k0)
        trace = spec.build(cfg, marked)
        seqs.append([_key(c) for c, _ in replay(cfg, marked, spec.k, trace)])
    if not seqs:
        raise DomainViolated("no domain element supplied")
    T = max(len(s) for s in seqs) - 1
    for s in seqs:
        s.extend([s[-1]] * (T + 1 - len(s)))
    worst = 1
    for t in range(1, T + 1):
        counts = Counter((s[t - 1], s[t]) for s in seqs)
        worst = max(worst, max(counts.values()))
    return LossEstimate(math.log2(worst), "exact" if mode == "exact" else "sampled-lower-bound",
                        worst, len(seqs), T)


def enumerate_region(base: Configuration, sites, marked_rule: str = "first"):
    """Every assignment of ``sites`` on top of ``base``, with the first particle in ``sites`` marked."""
    sites = [tuple(s) for s in sites]
    for bits in itertools.product((0, 1), repeat=len(sites)):
        if not any(bits):
            continue
        cfg = base.with_values(dict(zip(sites, bits)))
        marked = next(s for s, b in zip(sites, bits) if b)
        yield cfg, marked


# translated moves


def translate_trace(cfg: Configuration, marked, k: int, trace: MoveTrace) -> MoveTrace:
    """Steps recentred on the marked particle's position after each step."""
    out = []
    X = tuple(marked)
    for e in trace.steps:
        if e is None:
            out.append(None)
            continue
        X = _track(X, e)
        out.append(Edge(tuple(a - b for a, b in zip(e.a, X)), tuple(a - b for a, b in zip(e.b, X))))
    return MoveTrace(out, trace.plan)


def untranslate_trace(marked, trace: MoveTrace) -> MoveTrace:
    zero = tuple(0 for _ in marked)
    X = tuple(marked)
    out = []
    for e in trace.steps:
        if e is None:
            out.append(None)
            continue
        if zero in (e.a, e.b):
            o = e.other(zero)
            X = tuple(x - c for x, c in zip(X, o))
        out.append(Edge(tuple(a + b for a, b in zip(e.a, X)), tuple(a + b for a, b in zip(e.b, X))))
    return MoveTrace(out, trace.plan)


def translate_move(spec: MoveSpec) -> MoveSpec:
    """The same move seen from the marked particle: its builder emits recentred traces."""

    def builder(cfg, marked):
        return translate_trace(cfg, marked, spec.k, spec.builder(cfg, marked))

    return MoveSpec(spec.name + "-translated", spec.k, spec.region, spec.domain, builder,
                    spec.postcondition, spec.declared_T_bound, spec.declared_loss_bound,
                    {**spec.params, "translated": True})


def replay_translated(cfg: Configuration, marked, k: int, trace: MoveTrace) -> tuple:
    return verify_trace(cfg, marked, k, untranslate_trace(marked, trace))


# serialization


def _fmt_site(x) -> str:
    return ",".join(str(int(c)) for c in x)


def _parse_site(s: str) -> tuple:
    return tuple(int(c) for c in s.split(","))


def dumps_trace(trace: MoveTrace, ell: int, L: int | None, k: int, d: int, region=None, marked=None, **extra) -> str:
    head = [f"ell={ell}", f"L={L if L is not None else ''}", f"k={k}", f"d={d}"]
    if region:
        pts = np.array(sorted(region))
        head.append(f"region={_fmt_site(pts.min(axis=0))}:{_fmt_site(pts.max(axis=0))}")
    if marked is not None:
        head.append(f"marked={_fmt_site(marked)}")
    head += [f"{a}={b}" for a, b in extra.items()]
    lines = ["# kalab-trace " + " ".join(head), f"T {trace.T}"]
    for t, e in enumerate(trace.steps, start=1):
        lines.append(f"{t} noop" if e is None else f"{t} {_fmt_site(e.a)} {_fmt_site(e.b)}")
    return "\n".join(lines) + "\n"


def loads_trace(text: str) -> tuple:
    """``(trace, header)``; header values are strings."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# kalab-trace"):
        raise ValueError("not a trace file")
    header = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    T = int(lines[1].split()[1])
    steps = []
    for n, ln in enumerate(lines[2:], start=1):
        parts = ln.split()
        if int(parts[0]) != n:
            raise ValueError(f"step {n} out of order")
        steps.append(None if parts[1] == "noop" else Edge(_parse_site(parts[1]), _parse_site(parts[2])))
    if len(steps) != T:
        raise ValueError(f"trace declares T={T} but holds {len(steps)} steps")
    return MoveTrace(steps), header


def dumps_plan(trace: MoveTrace) -> str:
    """One line per scheduled piece: name, anchor, parameters, first step index."""
    lines = ["# kalab-plan name anchor params start_step"]
    for name, anchor, params, start in trace.plan:
        ps = " ".join(f"{k}={str(v).replace(' ', '')}" for k, v in params.items())
        lines.append(f"{name} {_fmt_site(anchor)} {ps or '-'} {start}")
    return "\n".join(lines) + "\n"


# measurement harness


def _bern(rng, shape, q):
    return (rng.random(shape) >= q).astype(np.uint8)


def sample_instance(name: str, ell: int, q: float, rng, max_tries: int = 100_000):
    """Random domain element ``(spec, cfg, marked)`` of an elementary move, product law conditioned on the domain."""
    from .lattice import LatticeGeometry

    for _ in range(max_tries):
        if name == "column-exchange":
            g = LatticeGeometry.box((1, 1), (2, ell))
            occ = np.zeros((2, ell), np.uint8)
            occ[1] = _bern(rng, ell, q)
            spec = column_exchange_move(ell, (1, 0))
        elif name == "jump":
            g = LatticeGeometry.box((1, 1), (3, ell))
            occ = np.zeros((3, ell), np.uint8)
            occ[0], occ[2] = _bern(rng, ell, q), _bern(rng, ell, q)
            star = (1, int(rng.integers(1, ell + 1)))
            spec = jump_move(ell, (1, 0), star)
        elif name == "framing":
            g = LatticeGeometry.box((1, 1), (ell, ell))
            occ = _bern(rng, (ell, ell), q)
            occ[:, 0] = 0
            spec = framing_move(ell, (0, 0))
        else:
            raise ValueError(f"unknown elementary move {name!r}")
        cfg = Configuration(g, occ)
        parts = [tuple(int(c) + o for c, o in zip(x, g.origin)) for x in np.argwhere(occ)]
        if not parts:
            continue
        marked = parts[int(rng.integers(len(parts)))]
        if name == "jump" and cfg.value(spec.params["star"]):
            marked = spec.params["star"]
        if spec.in_domain(cfg, marked):
            return spec, cfg, marked
    raise MoveError(f"no {name} domain element found in {max_tries} draws")


@dataclass(frozen=True)
class ScalingFit:
    name: str
    ells: tuple
    mean_T: tuple
    slope: float
    intercept: float


SCALING_CSV_HEADER = ["move", "ell", "instances", "mean_T", "max_T", "seed"]


def measure_T(name: str, ells=(4, 8, 16, 32), n: int = 50, q: float = 0.5, seed: int = 0) -> tuple:
    """Mean trace length of verified random instances per ``ell`` and the log-log slope."""
    from scipy import stats

    from .lattice import make_rng, spawn_seeds

    rows, means = [], []
    for ell, ss in zip(ells, spawn_seeds(seed, len(ells))):
        rng = make_rng(ss)
        Ts = []
        for _ in range(n):
            spec, cfg, marked = sample_instance(name, ell, q, rng)
            trace, _, _ = spec.run(cfg, marked)
            Ts.append(trace.T)
        means.append(float(np.mean(Ts)))
        rows.append([name, ell, n, means[-1], int(max(Ts)), seed])
    fit = stats.linregress(np.log(ells), np.log(means))
    return ScalingFit(name, tuple(ells), tuple(means), float(fit.slope), float(fit.intercept)), rows


def elementary_domain(name: str, ell: int):
    """``(spec, iterator)`` over the whole domain of a small elementary move, for exact loss."""
    from .lattice import LatticeGeometry

    if name == "column-exchange":
        g = LatticeGeometry.box((1, 1), (2, ell))
        spec = column_exchange_move(ell, (1, 0))
        base = Configuration(g, np.zeros((2, ell), np.uint8))
        sites = _column(2, 0, ell)
    elif name == "jump":
        g = LatticeGeometry.box((1, 1), (3, ell))
        spec = jump_move(ell, (1, 0), (1, 1))
        base = Configuration(g, np.zeros((3, ell), np.uint8))
        sites = [(1, 1)] + _column(1, 0, ell)[1:] + _column(3, 0, ell)
    else:
        raise ValueError(f"no enumerable domain for {name!r}")
    dom = ((c, m) for c, m in enumerate_region(base, sites) if spec.in_domain(c, m))
    return spec, dom
