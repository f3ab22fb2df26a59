"""Continuous-time kinetic Monte Carlo of the KA dynamics with a tagged particle.

Two layers share one event semantics. ``build_event_list``/``kmc_step`` work on
immutable :class:`Configuration` values and are meant for audits and small
systems; :class:`KMCEngine` keeps flat arrays and runs the compiled loop for
production trajectories.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernels
from .lattice import (
    Configuration,
    Edge,
    LatticeError,
    LatticeGeometry,
    apply_legal,
    empty_neighbor_counts,
    make_rng,
    spawn_seeds,
)

log = logging.getLogger(__name__)


class Frozen(RuntimeError):
    """No legal transition is enabled."""


@dataclass(frozen=True)
class EventList:
    k: int
    enabled: frozenset

    @property
    def total_rate(self) -> int:
        return len(self.enabled)


@dataclass(frozen=True)
class TaggedState:
    cfg: Configuration
    tagged: tuple
    unwrapped: tuple

    def __post_init__(self):
        if self.cfg.value(self.tagged) != 1:
            raise LatticeError("tagged site must be occupied")


def _require_torus(cfg: Configuration) -> LatticeGeometry:
    if not cfg.geometry.is_torus:
        raise LatticeError("dynamics run on the torus")
    return cfg.geometry


def enabled_jump_mask(occ: np.ndarray, k: int) -> np.ndarray:
    """Boolean ``(2d,) + shape`` array: jump from each site along each direction is enabled.

    Directions are ordered ``+e_0, -e_0, +e_1, -e_1, ...``.
    """
    cnt = empty_neighbor_counts(occ, torus=True)
    out = []
    for axis in range(occ.ndim):
        for step in (1, -1):
            occ_y = np.roll(occ, -step, axis)
            cnt_y = np.roll(cnt, -step, axis)
            # x occupied, y empty: x's other vacancies exclude y, y's exclude nothing
            out.append((occ == 1) & (occ_y == 0) & (cnt - 1 >= k - 1) & (cnt_y >= k - 1))
    return np.stack(out)


def build_event_list(cfg: Configuration, k: int) -> EventList:
    g = _require_torus(cfg)
    mask = enabled_jump_mask(cfg.occupancy, k)
    jumps = set()
    for j, *idx in np.argwhere(mask):
        x = tuple(int(i) + o for i, o in zip(idx, g.origin))
        y = list(x)
        y[j // 2] += 1 if j % 2 == 0 else -1
        jumps.add((x, g.wrap(y)))
    return EventList(k, frozenset(jumps))


def _affected(g: LatticeGeometry, x, y) -> set:
    from .lattice import neighbors

    near = {x, y}
    for s in (x, y):
        near.update(n.site for n in neighbors(g, s))
    return near


def kmc_step(state: TaggedState, ev: EventList, rng) -> tuple:
    """One Gillespie step; returns ``(state, events, dt)``.

    Only jumps with an endpoint next to the swapped edge are re-evaluated.
    """
    from .lattice import constraint, neighbors

    if ev.total_rate == 0:
        raise Frozen("no enabled transitions")
    rng = make_rng(rng)
    g = state.cfg.geometry
    dt = float(rng.exponential(1.0 / ev.total_rate))
    ordered = sorted(ev.enabled)
    x, y = ordered[int(rng.integers(len(ordered)))]
    cfg = apply_legal(state.cfg, ev.k, Edge(x, y))
    tagged, unwrapped = state.tagged, state.unwrapped
    if x == tagged:
        tagged = y
        step = g.displacement(x, y)
        unwrapped = tuple(u + s for u, s in zip(unwrapped, step))
    enabled = set(ev.enabled)
    for a in _affected(g, x, y):
        for n in neighbors(g, a):
            b = n.site
            for u, v in ((a, b), (b, a)):
                ok = cfg.value(u) == 1 and cfg.value(v) == 0 and constraint(cfg, ev.k, Edge(u, v))
                if ok:
                    enabled.add((u, v))
                else:
                    enabled.discard((u, v))
    return TaggedState(cfg, tagged, unwrapped), EventList(ev.k, frozenset(enabled)), dt


class KMCEngine:
    """Array-backed tagged-particle KMC on a torus."""

    def __init__(self, cfg: Configuration, k: int, tagged):
        g = _require_torus(cfg)
        self.geometry = g
        self.k = k
        self.nbr = g.neighbor_table()
        self.occ = cfg.flat().copy()
        m = self.nbr.shape[1]
        self.ev_list = np.empty(self.occ.size * m, np.int64)
        self.ev_pos = np.empty(self.occ.size * m, np.int64)
        n_ev = _kernels.build_events(self.occ, self.nbr, k, self.ev_list, self.ev_pos)
        tag = g.index(tagged)
        if self.occ[tag] != 1:
            raise LatticeError("tagged site must be occupied")
        self.istate = np.array([n_ev, tag, 0, 0, 0, 0], np.int64)
        self.fstate = np.zeros(1)
        self.unwrapped = np.zeros(g.d, np.int64)

    @property
    def n_events(self) -> int:
        return int(self.istate[0])

    @property
    def steps(self) -> int:
        return int(self.istate[4])

    @property
    def time(self) -> float:
        return float(self.fstate[0])

    def configuration(self) -> Configuration:
        return Configuration(self.geometry, self.occ.reshape(self.geometry.extent))

    def events(self) -> frozenset:
        g, m = self.geometry, self.nbr.shape[1]
        out = set()
        for jid in self.ev_list[: self.n_events]:
            x = int(jid) // m
            out.add((g.site(x), g.site(int(self.nbr[x, int(jid) % m]))))
        return frozenset(out)

    def run(self, grid: np.ndarray, rng: np.random.Generator, chunk: int = 1 << 15) -> np.ndarray:
        """Record unwrapped positions at ``grid`` times (must start >= current time)."""
        grid = np.ascontiguousarray(grid, dtype=float)
        out = np.zeros((grid.size, self.geometry.d), np.int64)
        self.istate[2] = 0
        while True:
            exp_draws = rng.standard_exponential(chunk)
            uni_draws = rng.random(chunk)
            self.istate[3] = 0
            done = _kernels.kmc_run(self.occ, self.nbr, self.k, self.ev_list, self.ev_pos,
                                    self.istate, self.fstate, self.unwrapped,
                                    exp_draws, uni_draws, grid, out)
            if done:
                return out

    @property
    def frozen(self) -> bool:
        return bool(self.istate[5])


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    seed: int | None = None
    frozen_at: float | None = None
    steps: int = 0
    meta: dict = field(default_factory=dict)


def time_grid(horizon: float, base_dt: float = 1.0 / 64, n_linear: int | None = None) -> np.ndarray:
    """t=0, geometric points ``base_dt * 2**j`` below the horizon, and a uniform grid to it.

    The uniform part has ``n_linear`` intervals (default: unit spacing, between 64 and 4096).
    """
    if horizon <= 0:
        return np.zeros(1)
    if n_linear is None:
        n_linear = int(min(4096, max(64, np.ceil(horizon))))
    geo = base_dt * 2.0 ** np.arange(0, int(np.ceil(np.log2(horizon / base_dt))) + 1)
    geo = geo[geo < horizon]
    lin = np.linspace(0.0, horizon, n_linear + 1)
    return np.unique(np.concatenate([geo, lin]))


def uniform_part(times: np.ndarray) -> np.ndarray:
    """Indices of the evenly spaced sub-grid ``0, h/n, ..., h`` inside ``times``."""
    h = times[-1]
    steps = np.diff(times)
    spacing = steps.max()
    idx = np.flatnonzero(np.isclose(times / spacing, np.round(times / spacing), atol=1e-9))
    n = int(round(h / spacing))
    if idx.size != n + 1:
        raise ValueError("time grid has no uniform sub-grid")
    return idx


def sample_mu0(geom: LatticeGeometry, q: float, rng) -> Configuration:
    """Product measure conditioned on the origin being occupied (rejection)."""
    from .lattice import sample_config

    origin = (0,) * geom.d
    while True:
        cfg = sample_config(geom, q, rng)
        if cfg.value(origin) == 1:
            return cfg


def simulate_tagged(q: float, k: int, d: int, extent: int, horizon: float, n_replicas: int,
                    seed: int = 0, grid: np.ndarray | None = None) -> list:
    """Independent replicas of the tagged process started from the conditioned measure."""
    if not 0.0 < q < 1.0 or not 2 <= k <= d or extent < 3 or horizon < 0 or n_replicas < 1:
        raise ValueError("invalid simulation parameters")
    geom = LatticeGeometry(d, (extent,) * d)
    if grid is None:
        grid = time_grid(horizon)
    trajs = []
    too_far = 0
    for r, ss in enumerate(spawn_seeds(seed, n_replicas)):
        rng = make_rng(ss)
        cfg = sample_mu0(geom, q, rng)
        eng = KMCEngine(cfg, k, (0,) * d)
        pos = eng.run(grid, rng)
        frozen_at = eng.time if eng.frozen else None
        trajs.append(Trajectory(grid.copy(), pos, seed, frozen_at, eng.steps, {"replica": r}))
        too_far += np.abs(pos).max(initial=0) >= extent / 2
    if too_far:
        warnings.warn(f"{too_far}/{n_replicas} replicas moved at least half the torus extent; "
                      "check D stability against a larger extent", RuntimeWarning)
    return trajs


@dataclass(frozen=True)
class DiffusionEstimate:
    D_hat: float
    stderr: float
    frozen_fraction: float
    window: tuple
    method: str = "ensemble"
    through_origin: bool = False


def _slope(t: np.ndarray, msd: np.ndarray, through_origin: bool = False) -> float:
    if through_origin:
        # MSD(0) = 0 exactly, so the intercept need not be fitted
        return float((t * msd).sum() / (2.0 * (t * t).sum()))
    if np.allclose(msd, msd[0]):
        return 0.0
    return float(stats.linregress(2.0 * t, msd).slope)


def _per_replica_msd(trajs: list, window: tuple, method: str) -> tuple:
    """Lag times in the window and one axis-averaged MSD curve per replica."""
    t = trajs[0].times
    horizon = t[-1]
    lo, hi = window[0] * horizon, window[1] * horizon
    if method == "ensemble":
        sel = (t >= lo) & (t <= hi)
        if window[0] >= window[1] or sel.sum() < 2:
            raise ValueError(f"degenerate fit window {window}")
        curves = np.stack([(tr.positions[sel].astype(float) ** 2).mean(axis=1) for tr in trajs])
        return t[sel], curves
    if method != "time-average":
        raise ValueError(f"unknown MSD method {method!r}")
    idx = uniform_part(t)
    spacing = t[idx[1]] - t[idx[0]]
    lags = np.arange(1, idx.size)
    lags = lags[(lags * spacing >= lo) & (lags * spacing <= hi)]
    if window[0] >= window[1] or lags.size < 1:
        raise ValueError(f"degenerate fit window {window}")
    curves = []
    for tr in trajs:
        x = tr.positions[idx].astype(float)
        curves.append([((x[lag:] - x[:-lag]) ** 2).mean() for lag in lags])
    return lags * spacing, np.asarray(curves)


def estimate_D(trajs: list, window: tuple = (0.5, 1.0), method: str = "ensemble",
               n_boot: int = 200, seed: int = 0, through_origin: bool = False) -> DiffusionEstimate:
    """Slope of the axis-averaged MSD against ``2t`` over a window given as horizon fractions.

    ``method="ensemble"`` uses displacement from the start at each grid time;
    ``"time-average"`` averages squared increments over all start times on the
    uniform sub-grid, with the window applied to the lag. ``through_origin`` fits
    ``MSD = 2Dt`` without an intercept. The standard error is a bootstrap over replicas.
    """
    if len(trajs) < 2:
        raise ValueError("need at least two replicas")
    t, curves = _per_replica_msd(trajs, window, method)
    if not through_origin and t.size < 2:
        raise ValueError(f"degenerate fit window {window}")
    d_hat = _slope(t, curves.mean(axis=0), through_origin)
    rng = np.random.default_rng(seed)
    boots = [_slope(t, curves[rng.integers(0, len(trajs), len(trajs))].mean(axis=0), through_origin)
             for _ in range(n_boot)]
    frozen = np.mean([tr.frozen_at is not None for tr in trajs])
    return DiffusionEstimate(d_hat, float(np.std(boots, ddof=1)), float(frozen), tuple(window), method,
                             through_origin)


TRAJECTORY_CSV_HEADER = ["replica", "t"]
SUMMARY_CSV_HEADER = ["q", "k", "d", "extent", "horizon", "replicas", "D_hat", "stderr", "frozen_fraction"]


def trajectory_rows(trajs: list):
    for r, tr in enumerate(trajs):
        rep = tr.meta.get("replica", r)
        for t, x in zip(tr.times, tr.positions):
            yield [rep, float(t), *(int(c) for c in x), tr.seed]


def write_trajectories(path, trajs: list, seed=None) -> None:
    from ._csvio import write_csv

    d = trajs[0].positions.shape[1] if trajs else 0
    header = TRAJECTORY_CSV_HEADER + [f"x_{i + 1}" for i in range(d)] + ["seed"]
    write_csv(path, header, trajectory_rows(trajs), seed)


def write_summary(path, est: DiffusionEstimate, q, k, d, extent, horizon, replicas, seed=None) -> None:
    from ._csvio import write_csv

    row = [q, k, d, extent, float(horizon), replicas, est.D_hat, est.stderr, est.frozen_fraction]
    write_csv(path, SUMMARY_CSV_HEADER, [row], seed, method=est.method,
              window=f"{est.window[0]}:{est.window[1]}")
