"""Event handlers and the main loop of the loss-network simulation."""

import numba as nb
import numpy as np

from ..adaptive import note_service_end, on_loss, refresh_tracking, virtual_loss_probability
from .alias import alias_draw
from .state import (CFG_RULE, CFG_VIRTUAL, RULE_NONE, check_state, fastjit, flush_all, flush_busy,
                    heap_pop, heap_push, idle_insert, idle_remove, randbelow, reset_statistics)


@fastjit
def start_service(st, rng, s, c, t):
    """Server ``s`` starts serving a request for ``c``; all its slots become unavailable."""
    d = st.server_content.shape[1]
    flush_busy(st, t)
    for k in range(d):
        idle_remove(st, s * d + k, t)
    st.serving[s] = c
    st.in_service[c] += 1
    st.n_busy[0] += 1
    heap_push(st, t + rng.exponential(1.0), s)


@fastjit
def handle_arrival(st, rng, c, t):
    """Process a request for ``c`` at time ``t``; returns True if it was lost."""
    st.arrivals[c] += 1
    st.requests_total[c] += 1
    z = st.idle_count[c]
    adaptive = st.cfg_i[CFG_RULE] != RULE_NONE
    p_virtual = 0.0
    if st.cfg_i[CFG_VIRTUAL] != 0 and z > 0:
        p_virtual = virtual_loss_probability(st, c, z)
    lost = z == 0
    if lost:
        st.losses[c] += 1
        if adaptive:
            on_loss(st, rng, c, t, True)
    else:
        slot = st.idle_list[c, randbelow(rng, z)]
        start_service(st, rng, slot // st.server_content.shape[1], c, t)
    if p_virtual > 0.0 and rng.random() < p_virtual:
        st.vlosses[c] += 1
        if adaptive:
            on_loss(st, rng, c, t, False)
    return lost


@fastjit
def handle_departure(st, s, t):
    """Server ``s`` completes its service at time ``t``."""
    c = st.serving[s]
    if c < 0:
        raise RuntimeError("departure scheduled for an idle server")
    d = st.server_content.shape[1]
    flush_busy(st, t)
    st.serving[s] = -1
    st.in_service[c] -= 1
    st.n_busy[0] -= 1
    for k in range(d):
        idle_insert(st, s * d + k, t)
    if st.cfg_i[CFG_VIRTUAL] != 0:
        note_service_end(st, c)


@nb.njit(cache=True)
def run_kernel(st, rng, alias_prob, alias_idx, total_rate, horizon, warmup,
               snap_times, snaps, batch_edges, batch_losses, batch_arrivals, busy_cum,
               refresh_every, debug_every):
    """Simulate until ``horizon``. Returns ``(events_processed, error_code)``.

    Statistics are discarded at ``warmup``. ``batch_edges`` split
    ``[warmup, horizon]`` into batches for error bars; ``busy_cum[j]`` receives
    the busy-server time integral from ``warmup`` to ``batch_edges[j]``.
    """
    n_snap = snap_times.shape[0]
    n_edges = batch_edges.shape[0]
    n_batches = n_edges - 1
    si = 0
    bi = 0
    warmed = False
    next_refresh = refresh_every if refresh_every > 0 else np.inf
    next_arrival = rng.exponential(1.0 / total_rate) if total_rate > 0 else np.inf
    events = 0
    t = 0.0
    while True:
        is_arrival = True
        t = next_arrival
        if st.heap_size[0] > 0 and st.heap_time[0] < next_arrival:
            is_arrival = False
            t = st.heap_time[0]
        done = t > horizon
        mark = horizon if done else t

        if not warmed and mark >= warmup:
            reset_statistics(st, warmup)
            warmed = True
            busy_cum[0] = 0.0
            bi = 1
        while warmed and bi < n_edges and batch_edges[bi] <= mark:
            flush_busy(st, batch_edges[bi])
            busy_cum[bi] = st.busy_int[0]
            bi += 1
        while si < n_snap and snap_times[si] <= mark:
            snaps[si, :] = st.replicas
            si += 1
        while next_refresh <= mark:
            refresh_tracking(st)
            next_refresh += refresh_every
        if done:
            break

        if is_arrival:
            c = alias_draw(alias_prob, alias_idx, rng.random())
            lost = handle_arrival(st, rng, c, t)
            if warmed and n_batches > 0:
                b = min(bi - 1, n_batches - 1)
                batch_arrivals[b, c] += 1
                if lost:
                    batch_losses[b, c] += 1
            next_arrival = t + rng.exponential(1.0 / total_rate)
        else:
            _, s = heap_pop(st)
            handle_departure(st, s, t)
        events += 1
        if debug_every > 0 and events % debug_every == 0:
            code = check_state(st)
            if code != 0:
                return events, code
    flush_all(st, horizon)
    if debug_every > 0:
        code = check_state(st)
        if code != 0:
            return events, code
    return events, 0
