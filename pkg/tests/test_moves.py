import math

import numpy as np
import pytest

from kalab import coarse, moves
from kalab.lattice import Configuration, Edge, LatticeGeometry, constraint, make_rng
from kalab.moves import (IllegalStep, DomainViolated, MoveTrace, compute_loss, dumps_plan, dumps_trace,
                         elementary_domain, jump_move, loads_trace, permutation_move, replay_translated,
                         sample_instance, translate_trace, untranslate_trace, verify_trace)


def independent_replay(cfg, marked, trace, k=2):
    # step-by-step replay written without the library's replay helper
    occ = {x: cfg.value(x) for x in cfg.geometry.sites()}
    geom = cfg.geometry
    for e in trace.steps:
        if e is None:
            continue
        cur = Configuration(geom, np.array([occ[x] for x in geom.sites()], np.uint8).reshape(geom.extent))
        assert occ[e.a] != occ[e.b] and constraint(cur, k, e)
        occ[e.a], occ[e.b] = occ[e.b], occ[e.a]
        if marked in (e.a, e.b):
            marked = e.b if marked == e.a else e.a
    return occ, marked


@pytest.mark.parametrize("name", ["column-exchange", "jump", "framing"])
@pytest.mark.parametrize("ell", [3, 5])
def test_elementary_moves_on_random_instances(name, ell):
    rng = make_rng(ell)
    for _ in range(15):
        spec, cfg, marked = sample_instance(name, ell, 0.4, rng)
        trace, c1, m1 = spec.run(cfg, marked)
        occ, m = independent_replay(cfg, marked, trace)
        assert all(c1.value(x) == v for x, v in occ.items())
        assert m == m1
        assert trace.T <= spec.declared_T_bound(ell)


def test_column_exchange_moves_the_column():
    spec, cfg, marked = sample_instance("column-exchange", 4, 0.5, make_rng(9))
    _, c1, _ = spec.run(cfg, marked)
    for y in range(1, 5):
        assert c1.value((1, y)) == cfg.value((2, y)) and c1.value((2, y)) == 0


def random_sigma(interior, rng):
    perm = rng.permutation(len(interior))
    return {interior[i]: interior[j] for i, j in enumerate(perm)}


@pytest.mark.parametrize("ell", [3, 4])
def test_permutation_move_realizes_sigma(ell):
    rng = make_rng(20 + ell)
    g = LatticeGeometry.box((1, 1), (ell, ell))
    interior = [(x, y) for x in range(2, ell + 1) for y in range(2, ell + 1)]
    done = 0
    while done < 10:
        occ = (rng.random((ell, ell)) >= 0.4).astype(np.uint8)
        occ[0, :] = occ[:, 0] = 0
        cfg = Configuration(g, occ)
        parts = [x for x in interior if cfg.value(x)]
        if not parts or all(cfg.value(x) for x in interior):
            continue
        spec = permutation_move(ell, random_sigma(interior, rng))
        marked = parts[int(rng.integers(len(parts)))]
        trace, c1, m1 = spec.run(cfg, marked)
        sigma = spec.params["sigma"]
        assert all(c1.value(sigma[x]) == cfg.value(x) for x in interior)
        assert m1 == sigma[marked]
        done += 1


def test_permutation_rejects_bad_sigma():
    with pytest.raises(ValueError):
        permutation_move(3, {(2, 2): (1, 1), (1, 1): (2, 2)})


def test_domain_violation():
    spec = jump_move(3, (1, 0), (1, 1))
    g = LatticeGeometry.box((1, 1), (3, 3))
    with pytest.raises(DomainViolated):
        spec.build(Configuration.full(g), (1, 1))


def test_verify_rejects_illegal_step():
    g = LatticeGeometry.box((0, 0), (3, 3))
    cfg = Configuration.full(g).with_values({(0, 0): 0})
    bad = MoveTrace([Edge((1, 1), (1, 2))])
    with pytest.raises(IllegalStep) as info:
        verify_trace(cfg, (1, 1), 2, bad)
    assert info.value.t == 1


def test_trace_file_round_trip():
    spec, cfg, marked = sample_instance("jump", 4, 0.4, make_rng(3))
    trace, _, _ = spec.run(cfg, marked)
    text = dumps_trace(trace.padded(trace.T + 2), 4, None, 2, 2, spec.region, marked)
    back, head = loads_trace(text)
    assert back.steps == trace.padded(trace.T + 2).steps
    assert head["marked"] == ",".join(map(str, marked)) and head["k"] == "2"
    assert dumps_plan(trace).splitlines()[1].startswith("jump")


def test_translated_trace_round_trip():
    spec, cfg, marked = sample_instance("jump", 4, 0.4, make_rng(4))
    trace, c1, m1 = spec.run(cfg, marked)
    tt = translate_trace(cfg, marked, 2, trace)
    assert untranslate_trace(marked, tt).steps == trace.steps
    assert replay_translated(cfg, marked, 2, tt) == (c1, m1)


def brute_loss(spec, dom):
    # count preimages of each (eta_{t-1}, eta_t) pair directly
    runs = []
    for cfg, m in dom:
        trace, _, _ = spec.run(cfg, m)
        states = [cfg]
        for e in trace.steps:
            states.append(states[-1] if e is None else states[-1].with_values(
                {e.a: states[-1].value(e.b), e.b: states[-1].value(e.a)}))
        runs.append(states)
    T = max(len(r) for r in runs)
    for r in runs:
        r.extend([r[-1]] * (T - len(r)))
    worst = 1
    for t in range(1, T):
        pairs = {}
        for r in runs:
            key = (r[t - 1].occupancy.tobytes(), r[t].occupancy.tobytes())
            pairs[key] = pairs.get(key, 0) + 1
        worst = max(worst, max(pairs.values()))
    return math.log2(worst)


@pytest.mark.parametrize("name,ell", [("column-exchange", 4), ("jump", 3), ("jump", 4)])
def test_loss_matches_brute_force(name, ell):
    spec, dom = elementary_domain(name, ell)
    dom = list(dom)
    assert compute_loss(spec, dom).value == brute_loss(spec, dom)


def test_sampled_loss_is_below_exact():
    spec, dom = elementary_domain("jump", 4)
    dom = list(dom)
    exact = compute_loss(spec, dom)
    part = compute_loss(spec, dom[::3], mode="sampled")
    assert part.value <= exact.value and part.mode != "exact"


def test_block_move_small():
    sc = coarse.ScaleParams(0.25, 2, 2, 1.0, 4, 14)
    spec = moves.exchange_block_move(sc)
    rng = make_rng(1)
    for _ in range(3):
        cfg = moves.sample_block_instance(sc, 0.25, rng)
        trace, c1, m1 = spec.run(cfg, (0, 0))
        assert m1 == (15, 0)
        assert trace.T <= spec.declared_T_bound(4, 14)


def test_measure_T_rows():
    fit, rows = moves.measure_T("column-exchange", (3, 6), n=5, q=0.5, seed=0)
    assert len(rows) == 2 and fit.slope > 0
