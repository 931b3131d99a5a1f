"""Mutable simulation state and the O(1)/O(d) primitives that update it.

All arrays live in one ``SimState`` named tuple so that numba-compiled code
can thread a single argument through every handler. Scalars that must be
mutated in place are stored in length-1 arrays.

Idle bookkeeping works on *slots*: slot ``s * d + k`` is slot ``k`` of server
``s``. ``idle_list[c, :idle_count[c]]`` lists the slots holding ``c`` on idle
servers, and ``idle_pos[slot]`` is the position of a slot in that list (or -1
while its server is busy).
"""

from typing import NamedTuple

import numba as nb
import numpy as np

RULE_NONE = -1
RULE_RANDOM = 0
RULE_LRL = 1
RULE_LFL = 2

# cfg_i layout
CFG_RULE = 0
CFG_VIRTUAL = 1
CFG_ADAPT = 2
CFG_TRACK_K = 3
CFG_LRL_RESTRICT = 4
# cfg_f layout
CFG_TAU = 0

NEG_INF_KEY = -1e300

# Hot paths pass the whole state tuple around; without the runtime's reference
# counting a call costs a few ns instead of an incref/decref per array.
# Functions compiled this way must not allocate.
fastjit = nb.njit(cache=True, _nrt=False)


@fastjit
def randbelow(rng, k):
    """Uniform integer in ``[0, k)``; ``Generator.integers`` allocates in compiled code."""
    return min(int(rng.random() * k), k - 1)


class SimState(NamedTuple):
    server_content: np.ndarray   # int32 (m, d)
    replicas: np.ndarray         # int64 (n,)
    idle_list: np.ndarray        # int64 (n, m)
    idle_pos: np.ndarray         # int64 (m * d,)
    idle_count: np.ndarray       # int64 (n,)
    avail_list: np.ndarray       # int64 (n,)
    avail_pos: np.ndarray        # int64 (n,)
    n_avail: np.ndarray          # int64 (1,)
    serving: np.ndarray          # int64 (m,), -1 when idle
    in_service: np.ndarray       # int64 (n,)
    n_busy: np.ndarray           # int64 (1,)
    heap_time: np.ndarray        # float64 (m,)
    heap_server: np.ndarray      # int64 (m,)
    heap_size: np.ndarray        # int64 (1,)
    hist: np.ndarray             # float64 (n, zmax + 1), time spent at each Z
    z_last: np.ndarray           # float64 (n,)
    rep_int: np.ndarray          # float64 (n,), time integral of replica count
    rep_last: np.ndarray         # float64 (n,)
    busy_int: np.ndarray         # float64 (1,)
    busy_last: np.ndarray        # float64 (1,)
    arrivals: np.ndarray         # int64 (n,)
    losses: np.ndarray           # int64 (n,)
    vlosses: np.ndarray          # int64 (n,)
    evictions: np.ndarray        # int64 (n,)
    creations: np.ndarray        # int64 (n,)
    fetches: np.ndarray          # int64 (n,)
    skipped: np.ndarray          # int64 (n,)
    requests_total: np.ndarray   # int64 (n,), never reset at warmup
    lrl_prev: np.ndarray         # int64 (n,)
    lrl_next: np.ndarray         # int64 (n,)
    lrl_ends: np.ndarray         # int64 (2,): head (least recent), tail
    lfl_key: np.ndarray          # float64 (n,), log of decayed count + t / tau
    track: np.ndarray            # int64 (k,), contents used for the min z* estimate
    track_zstar: np.ndarray      # float64 (k,)
    track_slot: np.ndarray       # int64 (n,), index into ``track`` or -1
    cfg_i: np.ndarray            # int64 (5,)
    cfg_f: np.ndarray            # float64 (1,)


def make_state(server_content, n, zmax, rule=RULE_NONE, virtual=False, adapt=False,
               tau=500.0, track_k=10, lrl_restrict=False):
    """Fresh all-idle state for the given slot assignment."""
    sc = np.ascontiguousarray(server_content, dtype=np.int32)
    m, d = sc.shape
    replicas = np.bincount(sc.ravel(), minlength=n).astype(np.int64)
    idle_list = np.zeros((n, m), dtype=np.int64)
    idle_pos = np.empty(m * d, dtype=np.int64)
    idle_count = np.zeros(n, dtype=np.int64)
    for slot, c in enumerate(sc.ravel()):
        idle_pos[slot] = idle_count[c]
        idle_list[c, idle_count[c]] = slot
        idle_count[c] += 1
    avail = np.flatnonzero(idle_count > 0).astype(np.int64)
    avail_list = np.full(n, -1, dtype=np.int64)
    avail_list[:avail.size] = avail
    avail_pos = np.full(n, -1, dtype=np.int64)
    avail_pos[avail] = np.arange(avail.size)
    order = np.arange(n, dtype=np.int64)
    lrl_prev = order - 1
    lrl_next = order + 1
    lrl_next[-1] = -1
    k = min(track_k, n)
    return SimState(
        server_content=sc,
        replicas=replicas,
        idle_list=idle_list,
        idle_pos=idle_pos,
        idle_count=idle_count,
        avail_list=avail_list,
        avail_pos=avail_pos,
        n_avail=np.array([avail.size], dtype=np.int64),
        serving=np.full(m, -1, dtype=np.int64),
        in_service=np.zeros(n, dtype=np.int64),
        n_busy=np.zeros(1, dtype=np.int64),
        heap_time=np.zeros(m),
        heap_server=np.zeros(m, dtype=np.int64),
        heap_size=np.zeros(1, dtype=np.int64),
        hist=np.zeros((n, zmax + 1)),
        z_last=np.zeros(n),
        rep_int=np.zeros(n),
        rep_last=np.zeros(n),
        busy_int=np.zeros(1),
        busy_last=np.zeros(1),
        arrivals=np.zeros(n, dtype=np.int64),
        losses=np.zeros(n, dtype=np.int64),
        vlosses=np.zeros(n, dtype=np.int64),
        evictions=np.zeros(n, dtype=np.int64),
        creations=np.zeros(n, dtype=np.int64),
        fetches=np.zeros(n, dtype=np.int64),
        skipped=np.zeros(n, dtype=np.int64),
        requests_total=np.zeros(n, dtype=np.int64),
        lrl_prev=lrl_prev,
        lrl_next=lrl_next,
        lrl_ends=np.array([0, n - 1], dtype=np.int64),
        lfl_key=np.full(n, NEG_INF_KEY),
        track=np.full(k, -1, dtype=np.int64),
        track_zstar=np.zeros(k),
        track_slot=np.full(n, -1, dtype=np.int64),
        cfg_i=np.array([rule, int(virtual), int(adapt), k, int(lrl_restrict)],
                       dtype=np.int64),
        cfg_f=np.array([tau], dtype=np.float64),
    )


# ---------------------------------------------------------------- statistics

@fastjit
def flush_z(st, c, t):
    st.hist[c, st.idle_count[c]] += t - st.z_last[c]
    st.z_last[c] = t


@fastjit
def flush_rep(st, c, t):
    st.rep_int[c] += st.replicas[c] * (t - st.rep_last[c])
    st.rep_last[c] = t


@fastjit
def flush_busy(st, t):
    st.busy_int[0] += st.n_busy[0] * (t - st.busy_last[0])
    st.busy_last[0] = t


@fastjit
def flush_all(st, t):
    for c in range(st.replicas.shape[0]):
        flush_z(st, c, t)
        flush_rep(st, c, t)
    flush_busy(st, t)


@fastjit
def reset_statistics(st, t):
    """Discard everything accumulated so far; integrals restart at ``t``."""
    st.hist[:, :] = 0.0
    st.z_last[:] = t
    st.rep_int[:] = 0.0
    st.rep_last[:] = t
    st.busy_int[0] = 0.0
    st.busy_last[0] = t
    st.arrivals[:] = 0
    st.losses[:] = 0
    st.vlosses[:] = 0
    st.evictions[:] = 0
    st.creations[:] = 0
    st.fetches[:] = 0
    st.skipped[:] = 0


# ---------------------------------------------------------- available contents

@fastjit
def avail_add(st, c):
    pos = st.n_avail[0]
    st.avail_list[pos] = c
    st.avail_pos[c] = pos
    st.n_avail[0] = pos + 1


@fastjit
def avail_remove(st, c):
    pos = st.avail_pos[c]
    last = st.n_avail[0] - 1
    moved = st.avail_list[last]
    st.avail_list[pos] = moved
    st.avail_pos[moved] = pos
    st.avail_list[last] = -1
    st.avail_pos[c] = -1
    st.n_avail[0] = last


# ----------------------------------------------------------------- idle slots

@fastjit
def idle_insert(st, slot, t):
    d = st.server_content.shape[1]
    c = st.server_content[slot // d, slot % d]
    flush_z(st, c, t)
    pos = st.idle_count[c]
    st.idle_list[c, pos] = slot
    st.idle_pos[slot] = pos
    st.idle_count[c] = pos + 1
    if pos == 0:
        avail_add(st, c)


@fastjit
def idle_remove(st, slot, t):
    d = st.server_content.shape[1]
    c = st.server_content[slot // d, slot % d]
    flush_z(st, c, t)
    pos = st.idle_pos[slot]
    last = st.idle_count[c] - 1
    moved = st.idle_list[c, last]
    st.idle_list[c, pos] = moved
    st.idle_pos[moved] = pos
    st.idle_pos[slot] = -1
    st.idle_count[c] = last
    if last == 0:
        avail_remove(st, c)


@fastjit
def server_stores(st, s, c):
    for k in range(st.server_content.shape[1]):
        if st.server_content[s, k] == c:
            return True
    return False


# ----------------------------------------------------------- departure heap

@fastjit
def heap_push(st, t, s):
    i = st.heap_size[0]
    st.heap_size[0] = i + 1
    while i > 0:
        parent = (i - 1) >> 1
        if st.heap_time[parent] <= t:
            break
        st.heap_time[i] = st.heap_time[parent]
        st.heap_server[i] = st.heap_server[parent]
        i = parent
    st.heap_time[i] = t
    st.heap_server[i] = s


@fastjit
def heap_pop(st):
    """Remove the earliest departure; returns ``(time, server)``."""
    t0 = st.heap_time[0]
    s0 = st.heap_server[0]
    size = st.heap_size[0] - 1
    st.heap_size[0] = size
    if size > 0:
        t = st.heap_time[size]
        s = st.heap_server[size]
        i = 0
        while True:
            child = 2 * i + 1
            if child >= size:
                break
            if child + 1 < size and st.heap_time[child + 1] < st.heap_time[child]:
                child += 1
            if st.heap_time[child] >= t:
                break
            st.heap_time[i] = st.heap_time[child]
            st.heap_server[i] = st.heap_server[child]
            i = child
        st.heap_time[i] = t
        st.heap_server[i] = s
    return t0, s0


# ----------------------------------------------------------------- LRL list

@fastjit
def lrl_move_to_tail(st, c):
    tail = st.lrl_ends[1]
    if tail == c:
        return
    prev = st.lrl_prev[c]
    nxt = st.lrl_next[c]
    if prev >= 0:
        st.lrl_next[prev] = nxt
    else:
        st.lrl_ends[0] = nxt
    st.lrl_prev[nxt] = prev
    st.lrl_prev[c] = tail
    st.lrl_next[c] = -1
    st.lrl_next[tail] = c
    st.lrl_ends[1] = c


# ------------------------------------------------------------ consistency

@nb.njit(cache=True)
def check_state(st):
    """Recompute derived quantities from scratch; 0 if consistent, else an error code."""
    m, d = st.server_content.shape
    n = st.replicas.shape[0]
    busy = 0
    in_service = np.zeros(n, dtype=np.int64)
    for s in range(m):
        if st.serving[s] >= 0:
            busy += 1
            in_service[st.serving[s]] += 1
    if busy != st.n_busy[0] or busy != st.heap_size[0]:
        return 1
    for c in range(n):
        if in_service[c] != st.in_service[c]:
            return 1
    idle = np.zeros(n, dtype=np.int64)
    reps = np.zeros(n, dtype=np.int64)
    for s in range(m):
        for k in range(d):
            c = st.server_content[s, k]
            reps[c] += 1
            for k2 in range(k):
                if st.server_content[s, k2] == c:
                    return 5
            slot = s * d + k
            if st.serving[s] < 0:
                idle[c] += 1
                pos = st.idle_pos[slot]
                if pos < 0 or pos >= st.idle_count[c] or st.idle_list[c, pos] != slot:
                    return 3
            elif st.idle_pos[slot] != -1:
                return 3
    n_avail = 0
    for c in range(n):
        if idle[c] != st.idle_count[c]:
            return 2
        if reps[c] != st.replicas[c]:
            return 4
        if idle[c] > 0:
            n_avail += 1
            if st.avail_list[st.avail_pos[c]] != c:
                return 7
        elif st.avail_pos[c] != -1:
            return 7
    if n_avail != st.n_avail[0]:
        return 7
    seen = np.zeros(n, dtype=np.int64)
    c = st.lrl_ends[0]
    steps = 0
    while c >= 0 and steps <= n:
        seen[c] += 1
        c = st.lrl_next[c]
        steps += 1
    if steps != n:
        return 8
    for c in range(n):
        if seen[c] != 1:
            return 8
    return 0
