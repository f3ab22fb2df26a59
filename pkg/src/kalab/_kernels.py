"""Compiled inner loops on flat occupancy arrays and neighbour tables.

Neighbour tables are ``(n_sites, 2d)`` int64 arrays with ``-1`` for sites
outside an occupied-exterior region (see ``LatticeGeometry.neighbor_table``).
"""
import numpy as np
from numba import njit


@njit(cache=True)
def bp_closure(occ, nbr, k):
    """k-neighbour bootstrap closure with a frontier queue; exterior ignored."""
    n = occ.shape[0]
    m = nbr.shape[1]
    out = occ.copy()
    cnt = np.zeros(n, np.int64)
    for x in range(n):
        for j in range(m):
            y = nbr[x, j]
            if y >= 0 and out[y] == 0:
                cnt[x] += 1
    queue = np.empty(n, np.int64)
    head = 0
    tail = 0
    for x in range(n):
        if out[x] == 1 and cnt[x] >= k:
            out[x] = 0
            queue[tail] = x
            tail += 1
    while head < tail:
        x = queue[head]
        head += 1
        for j in range(m):
            y = nbr[x, j]
            if y < 0:
                continue
            cnt[y] += 1
            if out[y] == 1 and cnt[y] >= k:
                out[y] = 0
                queue[tail] = y
                tail += 1
    return out


@njit(cache=True)
def origin_cluster(closed, nbr, origin):
    """Sites reachable from ``origin`` by a path of >= 1 steps through empty sites."""
    n = closed.shape[0]
    m = nbr.shape[1]
    member = np.zeros(n, np.uint8)
    queue = np.empty(n, np.int64)
    head = 0
    tail = 0
    for j in range(m):
        y = nbr[origin, j]
        if y >= 0 and closed[y] == 0 and member[y] == 0:
            member[y] = 1
            queue[tail] = y
            tail += 1
    while head < tail:
        x = queue[head]
        head += 1
        for j in range(m):
            y = nbr[x, j]
            if y >= 0 and closed[y] == 0 and member[y] == 0:
                member[y] = 1
                queue[tail] = y
                tail += 1
    return member


@njit(cache=True)
def other_empty(occ, nbr, x, y):
    c = 0
    for j in range(nbr.shape[1]):
        z = nbr[x, j]
        if z >= 0 and z != y and occ[z] == 0:
            c += 1
    return c


@njit(cache=True)
def edge_ok(occ, nbr, x, y, k):
    return other_empty(occ, nbr, x, y) >= k - 1 and other_empty(occ, nbr, y, x) >= k - 1


@njit(cache=True)
def jump_enabled(occ, nbr, x, j, k):
    y = nbr[x, j]
    if y < 0 or occ[x] == 0 or occ[y] == 1:
        return False
    return edge_ok(occ, nbr, x, y, k)


@njit(cache=True)
def _set_event(ev_list, ev_pos, n_ev, jid, on):
    """Insert/remove directed jump ``jid``; returns the new event count."""
    p = ev_pos[jid]
    if on and p < 0:
        ev_list[n_ev] = jid
        ev_pos[jid] = n_ev
        return n_ev + 1
    if not on and p >= 0:
        last = ev_list[n_ev - 1]
        ev_list[p] = last
        ev_pos[last] = p
        ev_pos[jid] = -1
        return n_ev - 1
    return n_ev


@njit(cache=True)
def build_events(occ, nbr, k, ev_list, ev_pos):
    m = nbr.shape[1]
    ev_pos[:] = -1
    n_ev = 0
    for x in range(occ.shape[0]):
        for j in range(m):
            if jump_enabled(occ, nbr, x, j, k):
                n_ev = _set_event(ev_list, ev_pos, n_ev, x * m + j, True)
    return n_ev


@njit(cache=True)
def _refresh_site(occ, nbr, k, ev_list, ev_pos, n_ev, a):
    m = nbr.shape[1]
    for j in range(m):
        b = nbr[a, j]
        if b < 0:
            continue
        n_ev = _set_event(ev_list, ev_pos, n_ev, a * m + j, jump_enabled(occ, nbr, a, j, k))
        jr = j ^ 1
        n_ev = _set_event(ev_list, ev_pos, n_ev, b * m + jr, jump_enabled(occ, nbr, b, jr, k))
    return n_ev


@njit(cache=True)
def apply_jump(occ, nbr, k, ev_list, ev_pos, n_ev, jid):
    """Execute directed jump ``jid`` and refresh every jump whose rate may change."""
    m = nbr.shape[1]
    x = jid // m
    y = nbr[x, jid % m]
    occ[x] = 0
    occ[y] = 1
    n_ev = _refresh_site(occ, nbr, k, ev_list, ev_pos, n_ev, x)
    n_ev = _refresh_site(occ, nbr, k, ev_list, ev_pos, n_ev, y)
    for j in range(m):
        for s in (x, y):
            z = nbr[s, j]
            if z >= 0:
                n_ev = _refresh_site(occ, nbr, k, ev_list, ev_pos, n_ev, z)
    return n_ev


@njit(cache=True)
def kmc_run(occ, nbr, k, ev_list, ev_pos, istate, fstate, unwrapped,
            exp_draws, uni_draws, grid, out_pos):
    """Advance the tagged KMC until the draws run out or the grid is exhausted.

    istate = [n_ev, tagged, grid_idx, draw_idx, steps, frozen]; fstate = [t].
    Returns True when the whole grid has been recorded.
    """
    m = nbr.shape[1]
    n_ev = istate[0]
    tagged = istate[1]
    gi = istate[2]
    di = istate[3]
    t = fstate[0]
    n_grid = grid.shape[0]
    done = False
    while True:
        if n_ev == 0:
            while gi < n_grid:
                out_pos[gi, :] = unwrapped
                gi += 1
            istate[5] = 1
            done = True
            break
        if di >= exp_draws.shape[0]:
            break
        new_t = t + exp_draws[di] / n_ev
        while gi < n_grid and grid[gi] < new_t:
            out_pos[gi, :] = unwrapped
            gi += 1
        if gi >= n_grid:
            di += 1
            done = True
            break
        pick = int(uni_draws[di] * n_ev)
        if pick >= n_ev:
            pick = n_ev - 1
        di += 1
        jid = ev_list[pick]
        x = jid // m
        if x == tagged:
            j = jid % m
            tagged = nbr[x, j]
            unwrapped[j // 2] += 1 if j % 2 == 0 else -1
        n_ev = apply_jump(occ, nbr, k, ev_list, ev_pos, n_ev, jid)
        t = new_t
        istate[4] += 1
    istate[0] = n_ev
    istate[1] = tagged
    istate[2] = gi
    istate[3] = di
    fstate[0] = t
    return done
