"""Loss-driven replica adaptation and virtual losses.

On every (real or virtual) loss for content ``c`` a coordinator evicts one
replica of another *available* content, chosen by the eviction rule, from an
idle server that does not already hold ``c``, and writes ``c`` into the freed
slot. Virtual losses are generated at request arrivals with a probability
calibrated so that their rate is the same multiple of the true loss rate for
every content; all the parameters involved are estimated from the current
state (busy servers, requests in service).
"""

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .sim.state import (CFG_ADAPT, CFG_LRL_RESTRICT, CFG_RULE, CFG_TAU, RULE_LFL,
                        RULE_LRL, RULE_NONE, RULE_RANDOM, flush_rep, idle_insert,
                        fastjit, idle_remove, lrl_move_to_tail, randbelow, server_stores)

MAX_VICTIM_ATTEMPTS = 20
RULES = {"random": RULE_RANDOM, "lrl": RULE_LRL, "lfl": RULE_LFL}


@dataclass(frozen=True)
class EvictionRule:
    """Which available content gives up a replica at each loss.

    ``tau`` is the decay time of the least-frequently-lost estimator.
    ``lrl_restrict`` limits LRL victims to contents lost less recently than
    the content being replicated.
    """

    kind: str = "random"
    tau: float = 500.0
    lrl_restrict: bool = False

    def __post_init__(self):
        if self.kind not in RULES:
            raise ValueError(f"unknown eviction rule {self.kind!r}; "
                             f"expected one of {sorted(RULES)}")
        if self.kind == "lfl" and not self.tau > 0:
            raise ValueError("LFL needs a positive decay time tau")

    @property
    def code(self):
        return RULES[self.kind]


@dataclass(frozen=True)
class VirtualLossConfig:
    enabled: bool = False
    track_k: int = 10
    refresh_every: float = 10.0

    def __post_init__(self):
        if self.track_k < 1:
            raise ValueError("track_k must be >= 1")
        if not self.refresh_every > 0:
            raise ValueError("refresh_every must be positive")


@dataclass(frozen=True)
class OnlineEstimates:
    rho_eff: float
    theta_eff: float
    lambda_hat: np.ndarray
    min_zstar: float


# ------------------------------------------------------------ scalar formulas

@fastjit
def z_star(lambda_hat, D_c, theta_hat):
    """Largest availability level at which virtual losses may fire."""
    if theta_hat <= 0:
        return 0.0
    return max(0.0, (D_c - lambda_hat) / theta_hat)


@fastjit
def _q_product(lambda_hat, D_c, theta_hat, z):
    acc = 0.0
    for i in range(1, z + 1):
        acc += math.log(lambda_hat + i * theta_hat) - math.log(D_c - i + 1)
        if acc < -700.0:
            return 0.0
    return math.exp(acc)


def q_factor(lambda_hat, D_c, theta_hat, z):
    """``prod_{i=1}^{z} (lambda + i theta) / (D - i + 1)``, i.e. ``pi(0) / pi(z)``."""
    if not 0 <= z < D_c:
        raise ValueError(f"z={z} must satisfy 0 <= z < D_c={D_c}")
    if theta_hat <= 0:
        raise ValueError("theta_hat must be positive")
    return _q_product(float(lambda_hat), int(D_c), float(theta_hat), int(z))


# ----------------------------------------------------------- online estimates

@fastjit
def rho_hat(st):
    return st.n_busy[0] / st.server_content.shape[0]


@fastjit
def theta_hat(st):
    m, d = st.server_content.shape
    busy = st.n_busy[0]
    if busy >= m:
        return np.inf
    r = busy / m
    return r / (1.0 - r) * (d - 1) / d


@fastjit
def min_zstar_estimate(st):
    total = 0.0
    count = 0
    for i in range(st.track.shape[0]):
        if st.track[i] >= 0:
            total += st.track_zstar[i]
            count += 1
    if count == 0:
        return 0.0
    return total / count


@nb.njit(cache=True)
def refresh_tracking(st):
    """Track the contents with the fewest requests seen so far."""
    k = st.track.shape[0]
    for i in range(k):
        if st.track[i] >= 0:
            st.track_slot[st.track[i]] = -1
    order = np.argsort(st.requests_total, kind="mergesort")
    th = theta_hat(st)
    for i in range(k):
        c = order[i]
        st.track[i] = c
        st.track_slot[c] = i
        st.track_zstar[i] = z_star(float(st.in_service[c]), st.replicas[c], th)


@fastjit
def note_service_end(st, c):
    i = st.track_slot[c]
    if i >= 0:
        st.track_zstar[i] = z_star(float(st.in_service[c]), st.replicas[c], theta_hat(st))


@fastjit
def virtual_loss_probability(st, c, z):
    """Probability of a virtual loss for a request to ``c`` finding ``z`` available replicas."""
    if z <= 0:
        return 0.0
    if st.n_busy[0] >= st.server_content.shape[0]:
        return 0.0
    th = theta_hat(st)
    if th <= 0:
        return 0.0
    minz = min_zstar_estimate(st)
    if minz <= 0:
        return 0.0
    lam = float(st.in_service[c])
    D = st.replicas[c]
    zs = z_star(lam, D, th)
    if zs <= 0 or z > zs:
        return 0.0
    p = minz / zs * _q_product(lam, D, th, z)
    return min(p, 1.0)


def update_online_estimates(st):
    """Snapshot of the coordinator's current estimates."""
    m = st.server_content.shape[0]
    busy = int(st.n_busy[0])
    return OnlineEstimates(
        rho_eff=busy / m,
        theta_eff=float(theta_hat(st)),
        lambda_hat=st.in_service.astype(np.float64).copy(),
        min_zstar=float(min_zstar_estimate(st)),
    )


# ---------------------------------------------------------------- eviction

@fastjit
def _logaddexp(a, b):
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


@fastjit
def replace_replica(st, rng, c, victim, t, real):
    """Move one idle replica of ``victim`` to ``c``; False if no eligible server."""
    d = st.server_content.shape[1]
    zv = st.idle_count[victim]
    eligible = 0
    for i in range(zv):
        if not server_stores(st, st.idle_list[victim, i] // d, c):
            eligible += 1
    if eligible == 0:
        return False
    r = randbelow(rng, eligible)
    chosen = -1
    for i in range(zv):
        slot = st.idle_list[victim, i]
        if not server_stores(st, slot // d, c):
            if r == 0:
                chosen = slot
                break
            r -= 1
    idle_remove(st, chosen, t)
    flush_rep(st, victim, t)
    flush_rep(st, c, t)
    st.server_content[chosen // d, chosen % d] = c
    st.replicas[victim] -= 1
    st.replicas[c] += 1
    idle_insert(st, chosen, t)
    st.evictions[victim] += 1
    st.creations[c] += 1
    if real:
        st.fetches[c] += 1
    return True


@fastjit
def _evict_random(st, rng, c, t, real):
    others = st.n_avail[0] - (1 if st.idle_count[c] > 0 else 0)
    attempts = 0
    while others > 0 and attempts < MAX_VICTIM_ATTEMPTS:
        v = st.avail_list[randbelow(rng, st.n_avail[0])]
        if v == c:
            continue
        attempts += 1
        if replace_replica(st, rng, c, v, t, real):
            return True
    return False


@fastjit
def _evict_lrl(st, rng, c, t, real):
    restrict = st.cfg_i[CFG_LRL_RESTRICT] != 0
    v = st.lrl_ends[0]
    attempts = 0
    while v >= 0 and attempts < MAX_VICTIM_ATTEMPTS:
        if v == c:
            if restrict:
                return False
        elif st.idle_count[v] > 0:
            attempts += 1
            if replace_replica(st, rng, c, v, t, real):
                return True
        v = st.lrl_next[v]
    return False


@fastjit
def _evict_lfl(st, rng, c, t, real):
    # candidates in increasing (key, id) order; each attempt takes the next one
    prev_key = -np.inf
    prev = -1
    for _ in range(MAX_VICTIM_ATTEMPTS):
        best = -1
        best_key = np.inf
        for i in range(st.n_avail[0]):
            v = st.avail_list[i]
            if v == c:
                continue
            key = st.lfl_key[v]
            if key < prev_key or (key == prev_key and v <= prev):
                continue
            if key < best_key or (key == best_key and v < best):
                best = v
                best_key = key
        if best < 0:
            return False
        if replace_replica(st, rng, c, best, t, real):
            return True
        prev, prev_key = best, best_key
    return False


@fastjit
def on_loss(st, rng, c, t, real):
    """React to a loss (``real=True``) or a virtual loss for content ``c``.

    Returns True when a replica of ``c`` was created.
    """
    rule = st.cfg_i[CFG_RULE]
    if rule == RULE_LFL:
        st.lfl_key[c] = _logaddexp(st.lfl_key[c], t / st.cfg_f[CFG_TAU])
    created = False
    if st.cfg_i[CFG_ADAPT] != 0:
        if rule == RULE_RANDOM:
            created = _evict_random(st, rng, c, t, real)
        elif rule == RULE_LRL:
            created = _evict_lrl(st, rng, c, t, real)
        elif rule == RULE_LFL:
            created = _evict_lfl(st, rng, c, t, real)
        if not created and rule != RULE_NONE:
            st.skipped[c] += 1
    lrl_move_to_tail(st, c)
    return created


def lfl_estimates(st, t):
    """Decayed loss-count estimates at time ``t``."""
    tau = st.cfg_f[CFG_TAU]
    return np.exp(st.lfl_key - t / tau)

