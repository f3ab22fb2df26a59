import numpy as np
import pytest

from kalab import dynamics
from kalab.dynamics import (DiffusionEstimate, EventList, Frozen, KMCEngine, TaggedState, build_event_list,
                            enabled_jump_mask, estimate_D, kmc_step, sample_mu0, simulate_tagged, time_grid,
                            uniform_part)
from kalab.lattice import Configuration, LatticeError, LatticeGeometry, constraint, edges, make_rng, sample_config


def events_by_scan(cfg, k):
    out = set()
    for e in edges(cfg.geometry):
        for x, y in ((e.a, e.b), (e.b, e.a)):
            if cfg.value(x) == 1 and cfg.value(y) == 0 and constraint(cfg, k, e):
                out.add((x, y))
    return out


def test_event_list_matches_edge_scan():
    g = LatticeGeometry(2, (6, 6))
    rng = make_rng(0)
    for q in (0.2, 0.5, 0.8):
        cfg = sample_config(g, q, rng)
        assert set(build_event_list(cfg, 2).enabled) == events_by_scan(cfg, 2)


def test_event_list_in_three_dimensions():
    g = LatticeGeometry(3, (4, 4, 4))
    cfg = sample_config(g, 0.4, make_rng(1))
    for k in (2, 3):
        assert set(build_event_list(cfg, k).enabled) == events_by_scan(cfg, k)


def test_incremental_step_keeps_event_list_exact():
    g = LatticeGeometry(2, (5, 5))
    rng = make_rng(2)
    cfg = sample_mu0(g, 0.4, rng)
    state = TaggedState(cfg, (0, 0), (0, 0))
    ev = build_event_list(cfg, 2)
    for _ in range(200):
        state, ev, dt = kmc_step(state, ev, rng)
        assert dt > 0
        assert set(ev.enabled) == events_by_scan(state.cfg, 2)
        assert state.cfg.value(state.tagged) == 1


def test_frozen_configuration_raises():
    g = LatticeGeometry(2, (4, 4))
    cfg = Configuration.full(g)
    with pytest.raises(Frozen):
        kmc_step(TaggedState(cfg, (0, 0), (0, 0)), build_event_list(cfg, 2), make_rng(0))


def test_engine_conserves_particles_and_tracks_tag():
    g = LatticeGeometry(2, (12, 12))
    rng = make_rng(3)
    cfg = sample_mu0(g, 0.3, rng)
    eng = KMCEngine(cfg, 2, (0, 0))
    grid = time_grid(20.0)
    pos = eng.run(grid, rng)
    assert eng.occ.sum() == cfg.n_particles
    tag = g.site(int(eng.istate[1]))
    assert eng.occ[int(eng.istate[1])] == 1
    wrapped = tuple(int(p) % 12 for p in pos[-1])
    assert wrapped == tag
    assert eng.events() == frozenset(build_event_list(eng.configuration(), 2).enabled)


def test_engine_rejects_empty_tag():
    g = LatticeGeometry(2, (4, 4))
    with pytest.raises(LatticeError):
        KMCEngine(Configuration.full(g, 0), 2, (0, 0))


def test_time_grid_shape():
    t = time_grid(100.0)
    assert t[0] == 0 and t[-1] == 100.0 and np.all(np.diff(t) > 0)
    idx = uniform_part(t)
    assert np.allclose(np.diff(t[idx]), 100.0 / (len(idx) - 1))


def test_simulation_is_reproducible():
    a = simulate_tagged(0.3, 2, 2, 10, 10.0, 3, seed=4)
    b = simulate_tagged(0.3, 2, 2, 10, 10.0, 3, seed=4)
    for x, y in zip(a, b):
        assert np.array_equal(x.positions, y.positions)


def test_estimate_D_on_synthetic_brownian_paths():
    # exact unit-rate lattice walks: D = 1 under the MSD = 2 D t convention
    rng = make_rng(5)
    t = np.linspace(0, 200, 201)
    trajs = []
    for _ in range(400):
        n = rng.poisson(4.0 * np.diff(t))
        steps = np.zeros((len(t), 2), np.int64)
        for i, m in enumerate(n, start=1):
            d = rng.integers(0, 4, m)
            steps[i, 0] = (d == 0).sum() - (d == 1).sum()
            steps[i, 1] = (d == 2).sum() - (d == 3).sum()
        trajs.append(dynamics.Trajectory(t, np.cumsum(steps, axis=0)))
    est = estimate_D(trajs, seed=0)
    assert abs(est.D_hat - 1.0) < 4 * est.stderr + 0.02


def test_invalid_parameters():
    with pytest.raises(ValueError):
        simulate_tagged(1.5, 2, 2, 10, 1.0, 1)
    with pytest.raises(ValueError):
        estimate_D(simulate_tagged(0.3, 2, 2, 8, 4.0, 1, seed=0))
