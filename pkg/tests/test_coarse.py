import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kalab import coarse
from kalab.coarse import (CoarseEdgeConfig, OriginIsolated, ScaleWarning, block_connected, box_anchors,
                          frame_empty, frame_mask, frame_search, is_frameable_exact, is_good_array,
                          lower_bound_assembly, min_vacancies, rw_on_cluster_D, scales)
from kalab.lattice import Configuration, LatticeGeometry, constraint, edges, make_rng
from kalab.moves import LossEstimate


def reachable_frame_empty(arr):
    # BFS over legal swaps inside the box, exterior occupied
    g = LatticeGeometry.box((0, 0), tuple(s - 1 for s in arr.shape))
    start = arr.astype(np.uint8)
    mask = frame_mask(arr.shape, 2)
    seen = {start.tobytes()}
    todo = [start]
    es = list(edges(g))
    while todo:
        cur = todo.pop()
        if not cur[mask].any():
            return True
        cfg = Configuration(g, cur)
        for e in es:
            if cur[e.a] != cur[e.b] and constraint(cfg, 2, e):
                nxt = cur.copy()
                nxt[e.a], nxt[e.b] = cur[e.b], cur[e.a]
                key = nxt.tobytes()
                if key not in seen:
                    seen.add(key)
                    todo.append(nxt)
    return False


def test_box_anchors():
    assert box_anchors(14, 4) == [0, 4, 8, 10]
    assert box_anchors(8, 4) == [0, 4]
    with pytest.raises(ValueError):
        box_anchors(3, 4)


def test_frame_mask_is_first_row_and_column():
    m = frame_mask((3, 3), 2)
    assert m.sum() == 5 and m[0].all() and m[:, 0].all()
    assert frame_mask((3, 3, 3), 2).sum() == 7


def test_frameability_matches_bfs_on_all_3x3():
    for bits in itertools.product((0, 1), repeat=9):
        arr = np.array(bits, np.uint8).reshape(3, 3)
        assert is_frameable_exact(arr, 2) == reachable_frame_empty(arr)


def test_frame_search_path_is_legal():
    rng = make_rng(0)
    found = 0
    while found < 20:
        arr = (rng.random((4, 4)) >= 0.5).astype(np.uint8)
        path = frame_search(arr, 2)
        if path is None:
            continue
        g = LatticeGeometry.box((0, 0), (3, 3))
        cur = arr.ravel().copy()
        for a, b in path:
            cfg = Configuration(g, cur.reshape(4, 4))
            e = coarse_edge(g, a, b)
            assert cur[a] != cur[b] and constraint(cfg, 2, e)
            cur[a], cur[b] = cur[b], cur[a]
        assert frame_empty(cur.reshape(4, 4), 2)
        found += 1


def coarse_edge(g, a, b):
    from kalab.lattice import make_edge
    return make_edge(g, g.site(a), g.site(b))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**16 - 1))
def test_fast_goodness_agrees_with_general_on_4x4(v):
    arr = np.array([(v >> i) & 1 for i in range(16)], np.uint8).reshape(4, 4)
    assert is_good_array(arr, 2) == is_good_array(arr, 2, general=True)


def test_min_vacancies_small():
    assert min_vacancies((3, 3), 2) == 6


def test_goodness_requires_two_per_line():
    arr = np.zeros((4, 4), np.uint8)
    assert is_good_array(arr, 2)
    arr[0] = 1
    assert not is_good_array(arr, 2)


def test_scales_small_q_caps_L():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        sc = scales(0.1)
    assert sc.ell == 24 and sc.capped
    assert any(issubclass(x.category, ScaleWarning) for x in w)
    assert scales(0.3).with_overrides(4, 14).L == 14


def test_cluster_stats():
    n = 4
    full = CoarseEdgeConfig(n, 2, np.ones((2, n, n), bool))
    assert full.stats()["n_clusters"] == 1 and full.stats()["origin_in_largest"]
    none = CoarseEdgeConfig(n, 2, np.zeros((2, n, n), bool))
    assert none.stats()["n_clusters"] == n * n


def test_walk_normalization_on_full_lattice():
    aux = rw_on_cluster_D(1.0, 400, 64, seed=1)
    assert abs(aux.D - 1.0) < 4 * aux.stderr


def test_isolated_origin():
    with pytest.raises(OriginIsolated):
        rw_on_cluster_D(CoarseEdgeConfig(3, 2, np.zeros((2, 3, 3), bool)), 10, 2)


def test_block_connected_extremes():
    sc = coarse.ScaleParams(0.3, 2, 2, 1.0, 4, 10)
    g = LatticeGeometry(2, (22, 22))
    empty = Configuration(g, np.zeros((22, 22), np.uint8))
    full = Configuration.full(g)
    assert block_connected(empty, sc, (0, 0), (11, 0))
    assert not block_connected(full, sc, (0, 0), (11, 0))


def test_lower_bound_assembly():
    lb = lower_bound_assembly(10, LossEstimate(2.0, "exact", 4, 10, 10), 0.5, 0.1)
    assert lb.value == pytest.approx(0.5 / (100 * 4)) and lb.rigorous
    sampled = lower_bound_assembly(10, LossEstimate(2.0, "sampled-lower-bound", 4, 10, 10), 0.5)
    assert not sampled.rigorous
