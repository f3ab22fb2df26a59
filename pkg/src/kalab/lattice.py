"""Lattice geometry, occupancy configurations and the Kob-Andersen constraint.

Sites are integer tuples. Occupancy is a C-ordered ``uint8`` array, so the flat
index of a site is ``sum((x[i] - origin[i]) * stride[i])`` with the last axis
varying fastest. Two boundary modes exist:

* ``torus``: coordinates wrap modulo the extents (used for stationary dynamics);
* ``occupied-exterior``: the region is finite and every site outside it reads
  as occupied (the finite-volume convention of the constraint).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

TORUS = "torus"
OCCUPIED_EXTERIOR = "occupied-exterior"
BOUNDARIES = (TORUS, OCCUPIED_EXTERIOR)

Site = tuple


class LatticeError(ValueError):
    """Base class for invalid lattice queries."""


class DimensionMismatch(LatticeError):
    pass


class ExteriorSite(LatticeError):
    pass


class ConstraintViolated(LatticeError):
    pass


class NoParticleExchange(LatticeError):
    pass


@dataclass(frozen=True)
class LatticeGeometry:
    d: int
    extent: tuple
    boundary: str = TORUS
    origin: tuple = None

    def __post_init__(self):
        extent = tuple(int(e) for e in self.extent)
        object.__setattr__(self, "extent", extent)
        if self.d < 2:
            raise LatticeError(f"dimension must be >= 2, got {self.d}")
        if len(extent) != self.d:
            raise DimensionMismatch(f"{len(extent)} extents for d={self.d}")
        if min(extent) < 1:
            raise LatticeError(f"extents must be >= 1, got {extent}")
        if self.boundary not in BOUNDARIES:
            raise LatticeError(f"unknown boundary mode {self.boundary!r}")
        origin = (0,) * self.d if self.origin is None else tuple(int(o) for o in self.origin)
        if len(origin) != self.d:
            raise DimensionMismatch("origin length differs from d")
        object.__setattr__(self, "origin", origin)

    @classmethod
    def box(cls, lo: Sequence[int], hi: Sequence[int]) -> "LatticeGeometry":
        """Occupied-exterior region ``prod [lo_i, hi_i]`` (inclusive)."""
        lo = tuple(lo)
        ext = tuple(h - l + 1 for l, h in zip(lo, hi))
        return cls(len(lo), ext, OCCUPIED_EXTERIOR, lo)

    @classmethod
    def centered_box(cls, d: int, half: int) -> "LatticeGeometry":
        return cls.box((-half,) * d, (half,) * d)

    @property
    def shape(self) -> tuple:
        return self.extent

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.extent))

    @property
    def strides(self) -> tuple:
        s, out = 1, []
        for e in reversed(self.extent):
            out.append(s)
            s *= e
        return tuple(reversed(out))

    @property
    def is_torus(self) -> bool:
        return self.boundary == TORUS

    def _check(self, x) -> None:
        if len(x) != self.d:
            raise DimensionMismatch(f"site {x} has {len(x)} coordinates, expected {self.d}")

    def wrap(self, x) -> Site:
        self._check(x)
        if not self.is_torus:
            return tuple(int(c) for c in x)
        return tuple(o + (int(c) - o) % e for c, o, e in zip(x, self.origin, self.extent))

    def contains(self, x) -> bool:
        self._check(x)
        if self.is_torus:
            return True
        return all(o <= c < o + e for c, o, e in zip(x, self.origin, self.extent))

    def array_index(self, x) -> tuple:
        """Numpy index tuple of an in-region site (wrapping under torus)."""
        x = self.wrap(x)
        if not self.contains(x):
            raise ExteriorSite(f"site {x} lies outside the region")
        return tuple(c - o for c, o in zip(x, self.origin))

    def index(self, x) -> int:
        return int(sum(i * s for i, s in zip(self.array_index(x), self.strides)))

    def site(self, index: int) -> Site:
        idx = np.unravel_index(int(index), self.extent)
        return tuple(int(i) + o for i, o in zip(idx, self.origin))

    def sites(self) -> Iterator[Site]:
        for idx in np.ndindex(*self.extent):
            yield tuple(i + o for i, o in zip(idx, self.origin))

    def adjacent(self, a, b) -> bool:
        a, b = self.wrap(a), self.wrap(b)
        return any(n.site == b for n in neighbors(self, a))

    def displacement(self, a, b) -> tuple:
        """Shortest vector from ``a`` to ``b`` (minimal image under torus)."""
        out = []
        for ca, cb, e in zip(a, b, self.extent):
            v = cb - ca
            if self.is_torus:
                v = (v + e // 2) % e - e // 2
            out.append(v)
        return tuple(out)

    def neighbor_table(self) -> np.ndarray:
        """``(n_sites, 2d)`` flat neighbor indices; ``-1`` marks exterior."""
        n = self.n_sites
        idx = np.arange(n).reshape(self.extent)
        table = np.empty((n, 2 * self.d), dtype=np.int64)
        for axis in range(self.d):
            for j, step in enumerate((1, -1)):
                col = 2 * axis + j
                shifted = np.roll(idx, -step, axis=axis)
                if not self.is_torus:
                    shifted = shifted.copy()
                    sl = [slice(None)] * self.d
                    sl[axis] = -1 if step == 1 else 0
                    shifted[tuple(sl)] = -1
                table[:, col] = shifted.ravel()
        return table


class Neighbor(NamedTuple):
    site: Site
    exterior: bool


def neighbors(geom: LatticeGeometry, x) -> list:
    """The ``2d`` nearest neighbours of ``x``, exterior ones flagged."""
    geom._check(x)
    x = geom.wrap(x)
    out = []
    for axis in range(geom.d):
        for step in (1, -1):
            y = list(x)
            y[axis] += step
            y = geom.wrap(y)
            out.append(Neighbor(y, not geom.contains(y)))
    return out


@dataclass(frozen=True, eq=False)
class Configuration:
    """Immutable occupancy field on a geometry (1 occupied, 0 empty)."""

    geometry: LatticeGeometry
    occupancy: np.ndarray = field(repr=False)

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=np.uint8).reshape(self.geometry.extent)
        if occ.size and occ.max() > 1:
            raise LatticeError("occupancy values must be 0 or 1")
        if occ is self.occupancy:
            occ = occ.copy()
        occ.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def full(cls, geom: LatticeGeometry, value: int = 1) -> "Configuration":
        return cls(geom, np.full(geom.extent, value, dtype=np.uint8))

    @classmethod
    def from_empty_sites(cls, geom: LatticeGeometry, empty) -> "Configuration":
        occ = np.ones(geom.extent, dtype=np.uint8)
        for x in empty:
            occ[geom.array_index(x)] = 0
        return cls(geom, occ)

    def __getitem__(self, x) -> int:
        return self.value(x)

    def value(self, x) -> int:
        g = self.geometry
        x = g.wrap(x)
        if not g.contains(x):
            return 1
        return int(self.occupancy[g.array_index(x)])

    @property
    def n_particles(self) -> int:
        return int(self.occupancy.sum())

    def empty_sites(self) -> list:
        g = self.geometry
        return [tuple(int(i) + o for i, o in zip(idx, g.origin)) for idx in np.argwhere(self.occupancy == 0)]

    def with_values(self, updates: dict) -> "Configuration":
        occ = self.occupancy.copy()
        for x, v in updates.items():
            occ[self.geometry.array_index(x)] = v
        return Configuration(self.geometry, occ)

    def flat(self) -> np.ndarray:
        return self.occupancy.ravel()

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.occupancy, other.occupancy)

    def __hash__(self):
        return hash((self.geometry, self.occupancy.tobytes()))


@dataclass(frozen=True)
class Edge:
    """Undirected nearest-neighbour edge; endpoints kept in sorted order."""

    a: Site
    b: Site

    def __post_init__(self):
        a, b = tuple(self.a), tuple(self.b)
        if b < a:
            a, b = b, a
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def other(self, x) -> Site:
        return self.b if tuple(x) == self.a else self.a


def make_edge(geom: LatticeGeometry, a, b) -> Edge:
    a, b = geom.wrap(a), geom.wrap(b)
    if not geom.adjacent(a, b):
        raise LatticeError(f"{a} and {b} are not nearest neighbours")
    return Edge(a, b)


def edges(geom: LatticeGeometry) -> Iterator[Edge]:
    """All edges with both endpoints in the region (each once)."""
    seen = set()
    for x in geom.sites():
        for n in neighbors(geom, x):
            if n.exterior:
                continue
            e = Edge(x, n.site)
            if e not in seen:
                seen.add(e)
                yield e


def _check_k(geom: LatticeGeometry, k: int) -> None:
    if not 2 <= k <= geom.d:
        raise LatticeError(f"k must satisfy 2 <= k <= d={geom.d}, got {k}")


def _other_empty(cfg: Configuration, x, y) -> int:
    return sum(1 - cfg.value(n.site) for n in neighbors(cfg.geometry, x) if n.site != y)


def constraint(cfg: Configuration, k: int, e: Edge) -> bool:
    """Kinetic constraint of edge ``e``: both endpoints see >= k-1 other vacancies."""
    g = cfg.geometry
    _check_k(g, k)
    x, y = g.wrap(e.a), g.wrap(e.b)
    if not g.adjacent(x, y):
        raise LatticeError(f"{e} is not a nearest-neighbour edge")
    return _other_empty(cfg, x, y) >= k - 1 and _other_empty(cfg, y, x) >= k - 1


def swap(cfg: Configuration, e: Edge) -> Configuration:
    g = cfg.geometry
    ia, ib = g.array_index(e.a), g.array_index(e.b)
    occ = cfg.occupancy.copy()
    occ[ia], occ[ib] = occ[ib], occ[ia]
    return Configuration(g, occ)


def apply_legal(cfg: Configuration, k: int, e: Edge) -> Configuration:
    """Perform the particle jump across ``e``; raise unless it is a legal transition."""
    if not constraint(cfg, k, e):
        raise ConstraintViolated(f"constraint fails on {e}")
    if cfg.value(e.a) == cfg.value(e.b):
        raise NoParticleExchange(f"endpoints of {e} hold equal values")
    return swap(cfg, e)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_seeds(seed: int, n: int) -> list:
    """Independent child seed sequences, one per stream index."""
    return np.random.SeedSequence(seed).spawn(n)


def sample_config(geom: LatticeGeometry, q: float, rng) -> Configuration:
    """I.i.d. occupancy with P(occupied) = 1 - q."""
    if not 0.0 < q < 1.0:
        raise LatticeError(f"q must lie in (0, 1), got {q}")
    rng = make_rng(rng)
    occ = (rng.random(geom.extent) >= q).astype(np.uint8)
    return Configuration(geom, occ)


def empty_neighbor_counts(occ: np.ndarray, torus: bool) -> np.ndarray:
    """Number of empty neighbours of every site (exterior counts as occupied)."""
    empty = 1 - occ.astype(np.int16)
    out = np.zeros_like(empty)
    for axis in range(occ.ndim):
        if torus:
            out += np.roll(empty, 1, axis) + np.roll(empty, -1, axis)
        else:
            pad = [(0, 0)] * occ.ndim
            pad[axis] = (1, 1)
            p = np.pad(empty, pad)
            sl_lo = [slice(None)] * occ.ndim
            sl_hi = [slice(None)] * occ.ndim
            sl_lo[axis] = slice(0, -2)
            sl_hi[axis] = slice(2, None)
            out += p[tuple(sl_lo)] + p[tuple(sl_hi)]
    return out


# -- text serialization -------------------------------------------------------

def dumps(cfg: Configuration, k: int | None = None) -> str:
    g = cfg.geometry
    lines = [
        f"d {g.d}",
        "extent " + " ".join(map(str, g.extent)),
        f"boundary {g.boundary}",
        "origin " + " ".join(map(str, g.origin)),
        f"k {'-' if k is None else k}",
    ]
    rows = cfg.occupancy.reshape(-1, g.extent[-1])
    lines.extend("".join("1" if v else "0" for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple:
    """Parse :func:`dumps` output; returns ``(configuration, k or None)``."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    header = {}
    for ln in lines[:5]:
        key, _, rest = ln.partition(" ")
        header[key] = rest.split()
    d = int(header["d"][0])
    extent = tuple(int(v) for v in header["extent"])
    geom = LatticeGeometry(d, extent, header["boundary"][0], tuple(int(v) for v in header["origin"]))
    kval = header["k"][0]
    rows = lines[5:]
    if len(rows) != geom.n_sites // extent[-1] or any(len(r) != extent[-1] for r in rows):
        raise LatticeError("row count or row width does not match the header")
    occ = np.array([[int(c) for c in r] for r in rows], dtype=np.uint8).reshape(extent)
    return Configuration(geom, occ), (None if kval == "-" else int(kval))
