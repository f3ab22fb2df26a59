import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kalab.lattice import (
    Configuration, ConstraintViolated, DimensionMismatch, ExteriorSite, LatticeGeometry,
    NoParticleExchange, apply_legal, constraint, dumps, edges, loads, make_edge, neighbors,
    sample_config, spawn_seeds, make_rng, swap,
)


def torus(n=4, d=2):
    return LatticeGeometry(d, (n,) * d)


def occupancies(shape):
    size = int(np.prod(shape))
    return st.lists(st.integers(0, 1), min_size=size, max_size=size).map(
        lambda v: np.array(v, dtype=np.uint8).reshape(shape))


def naive_constraint(occ, a, b, k, torus_=True):
    # counts the other empty neighbours by hand, exterior read as occupied
    def other(x, y):
        n = 0
        for ax in range(occ.ndim):
            for s in (1, -1):
                z = list(x)
                z[ax] += s
                if torus_:
                    z[ax] %= occ.shape[ax]
                elif not 0 <= z[ax] < occ.shape[ax]:
                    continue
                z = tuple(z)
                if z != tuple(y):
                    n += occ[z] == 0
        return n
    return other(a, b) >= k - 1 and other(b, a) >= k - 1


def test_torus_wraps_neighbours():
    g = torus(3)
    sites = {n.site for n in neighbors(g, (0, 0))}
    assert sites == {(1, 0), (2, 0), (0, 1), (0, 2)}
    assert not any(n.exterior for n in neighbors(g, (0, 0)))


def test_box_flags_exterior():
    g = LatticeGeometry.box((0, 0), (3, 3))
    ext = [n for n in neighbors(g, (0, 0)) if n.exterior]
    assert len(ext) == 2
    # exterior reads as occupied; indexing into it is an error
    assert Configuration.full(g, 0).value((5, 5)) == 1
    with pytest.raises(ExteriorSite):
        g.array_index((5, 5))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        neighbors(torus(), (0, 0, 0))


def test_edge_count_torus():
    assert len(list(edges(torus(4)))) == 2 * 16


def test_centered_box_coordinates():
    g = LatticeGeometry.centered_box(2, 2)
    assert g.contains((-2, 2)) and not g.contains((3, 0))
    assert g.n_sites == 25


@settings(max_examples=60, deadline=None)
@given(occupancies((4, 4)), st.integers(2, 2))
def test_constraint_matches_hand_count(occ, k):
    g = torus(4)
    cfg = Configuration(g, occ)
    for e in edges(g):
        assert constraint(cfg, k, e) == naive_constraint(occ, e.a, e.b, k)


@settings(max_examples=60, deadline=None)
@given(occupancies((4, 4)))
def test_swap_is_involution_and_conserves(occ):
    g = torus(4)
    cfg = Configuration(g, occ)
    for e in edges(g):
        twice = swap(swap(cfg, e), e)
        assert twice == cfg
        assert swap(cfg, e).n_particles == cfg.n_particles


@settings(max_examples=60, deadline=None)
@given(occupancies((4, 4)))
def test_constraint_monotone_in_vacancies(occ):
    g = torus(4)
    cfg = Configuration(g, occ)
    occupied = [tuple(x) for x in np.argwhere(occ)]
    if not occupied:
        return
    more = cfg.with_values({occupied[0]: 0})
    for e in edges(g):
        if occupied[0] in (e.a, e.b):
            continue
        if constraint(cfg, 2, e):
            assert constraint(more, 2, e)


@settings(max_examples=40, deadline=None)
@given(occupancies((4, 4)))
def test_legal_swap_is_reversible(occ):
    g = torus(4)
    cfg = Configuration(g, occ)
    for e in edges(g):
        if constraint(cfg, 2, e) and cfg.value(e.a) != cfg.value(e.b):
            after = apply_legal(cfg, 2, e)
            assert constraint(after, 2, e)
            assert apply_legal(after, 2, e) == cfg


def test_apply_legal_errors():
    g = torus(4)
    full = Configuration.full(g)
    e = make_edge(g, (0, 0), (0, 1))
    with pytest.raises(ConstraintViolated):
        apply_legal(full.with_values({(0, 1): 0}), 2, e)
    with pytest.raises(NoParticleExchange):
        apply_legal(Configuration.full(g, 0), 2, e)


def test_serialization_round_trip():
    g = LatticeGeometry.box((-1, 2), (3, 5))
    cfg = sample_config(g, 0.4, make_rng(7))
    back, k = loads(dumps(cfg, 2))
    assert back == cfg and k == 2
    assert back.geometry.origin == (-1, 2)


def test_sampling_is_seeded():
    g = torus(8)
    a = sample_config(g, 0.3, make_rng(spawn_seeds(5, 2)[1]))
    b = sample_config(g, 0.3, make_rng(spawn_seeds(5, 2)[1]))
    assert a == b


def test_vacancy_density():
    g = torus(64)
    cfg = sample_config(g, 0.3, make_rng(1))
    frac = 1 - cfg.n_particles / g.n_sites
    assert abs(frac - 0.3) < 3 * np.sqrt(0.3 * 0.7 / g.n_sites)
