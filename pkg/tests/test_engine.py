import math
import warnings

import numpy as np
import pytest
from scipy import stats

from edgecdn.model import Catalog, ReplicationProfile, SystemParams, proportional_replication
from edgecdn.sim.engine import (SimConfig, StabilityWarning, run,
                                write_outputs)
from edgecdn.sim.graph import build_cache_graph
from edgecdn.sim.kernel import handle_arrival, handle_departure
from edgecdn.sim.state import check_state, heap_pop, make_state


def erlang_b(servers, load):
    b = 1.0
    for k in range(1, servers + 1):
        b = load * b / (k + load * b)
    return b


def _run(lam, reps, m, d, **kw):
    cat = Catalog(np.asarray(lam, dtype=float))
    params = SystemParams.from_catalog(cat, m, d)
    prof = ReplicationProfile(np.asarray(reps), cap_fraction=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        return run(cat, prof, params, SimConfig(**kw))


@pytest.mark.parametrize("n,d", [(1, 1), (4, 4)])
def test_erlang_b(n, d):
    m, load = 20, 15.0
    met = _run(np.full(n, load / n), np.full(n, m), m, d, horizon=8e4, warmup=1e3, seed=4)
    assert met.arrivals.sum() >= 1e6
    est = met.inefficiency
    se = met.inefficiency_se
    target = erlang_b(m, load)
    assert abs(est - target) <= 3 * se, (est, se, target)
    # carried load matches Little's law
    assert met.busy_fraction == pytest.approx(load * (1 - target) / m, rel=0.01)


def test_uncached_content_always_lost():
    met = _run([1.0, 1.0, 1.0], [10, 10, 0], 10, 2, horizon=2e3, seed=1)
    assert met.arrivals[2] > 0
    assert met.losses[2] == met.arrivals[2]
    assert np.all(met.z_probabilities[2, 0] == pytest.approx(1.0))


def test_zero_rate_content_never_requested():
    met = _run([2.0, 0.0, 2.0], [10, 10, 10], 15, 2, horizon=2e3, seed=1)
    assert met.arrivals[1] == 0 and met.losses[1] == 0


def test_arrival_counts_are_poisson(zipf08):
    cat, params = zipf08
    prof = proportional_replication(cat, params)
    met = run(cat, prof, params, SimConfig(horizon=600, warmup=100, seed=2, n_batches=50))
    expected = cat.popularities * met.interval
    # total count within 4 standard deviations of its Poisson mean
    assert abs(met.arrivals.sum() - expected.sum()) <= 4 * math.sqrt(expected.sum())
    chi2 = ((met.arrivals - expected) ** 2 / expected).sum()
    assert stats.chi2.sf(chi2, cat.n - 1) > 1e-3
    # dispersion of the per-batch totals matches a Poisson process
    per_batch = met.batch_arrivals.sum(axis=1)
    ratio = per_batch.var(ddof=1) / per_batch.mean()
    assert 0.5 < ratio < 1.6


def test_busy_fraction_matches_carried_load(zipf08):
    cat, params = zipf08
    prof = proportional_replication(cat, params)
    met = run(cat, prof, params, SimConfig(horizon=2000, warmup=400, seed=3))
    carried = params.rho * (1 - met.inefficiency)
    assert abs(met.busy_fraction - carried) <= 3 * met.busy_fraction_se + 1e-3


def test_histogram_mass_and_means(zipf08):
    cat, params = zipf08
    prof = proportional_replication(cat, params)
    met = run(cat, prof, params, SimConfig(horizon=500, warmup=100, seed=5))
    np.testing.assert_allclose(met.z_time.sum(axis=1), met.interval, rtol=1e-9)
    np.testing.assert_allclose(met.replicas_mean, prof.replicas, rtol=1e-12)
    assert np.all(met.z_mean <= prof.replicas)


def test_same_seed_same_result(zipf08):
    cat, params = zipf08
    prof = proportional_replication(cat, params)
    cfg = SimConfig(horizon=300, seed=11)
    a, b = run(cat, prof, params, cfg), run(cat, prof, params, cfg)
    for field in ("arrivals", "losses", "z_time", "batch_losses", "batch_busy"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    c = run(cat, prof, params, SimConfig(horizon=300, seed=12))
    assert not np.array_equal(a.arrivals, c.arrivals)


def test_outputs_byte_identical(zipf08, tmp_path):
    cat, params = zipf08
    prof = proportional_replication(cat, params)
    cfg = SimConfig(horizon=200, seed=7)
    write_outputs(tmp_path / "a", run(cat, prof, params, cfg))
    write_outputs(tmp_path / "b", run(cat, prof, params, cfg))
    for name in ("per_content.csv", "z_histogram.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_state_checks_during_run(zipf08):
    cat, params = zipf08
    prof = proportional_replication(cat, params)
    met = run(cat, prof, params, SimConfig(horizon=50, seed=1, debug_every=1))
    assert met.events_processed > 0


def test_matching_is_uniform_over_idle_replicas(rng):
    m, d = 8, 2
    reps = np.array([8, 4, 4])
    graph = build_cache_graph(reps, m, d, rng)
    st = make_state(graph.server_content, 3, 8)
    counts = np.zeros(m, dtype=np.int64)
    t = 0.0
    for _ in range(8000):
        t += 1.0
        assert not handle_arrival(st, rng, 0, t)
        s = int(np.flatnonzero(st.serving >= 0)[0])
        counts[s] += 1
        _, s2 = heap_pop(st)
        assert s2 == s
        handle_departure(st, s, t)
    assert check_state(st) == 0
    assert stats.chisquare(counts).pvalue > 1e-3


def test_busy_server_hides_all_its_contents(rng):
    graph = build_cache_graph(np.array([2, 2, 2]), 3, 2, rng)
    st = make_state(graph.server_content, 3, 3)
    handle_arrival(st, rng, 0, 1.0)
    s = int(np.flatnonzero(st.serving >= 0)[0])
    for c in graph.server_content[s]:
        assert st.idle_count[c] == 1
    assert check_state(st) == 0
    # the content stays reachable only through the other server
    handle_arrival(st, rng, 0, 1.5)
    assert handle_arrival(st, rng, 0, 2.0)
    assert st.losses[0] == 1


def test_corrupted_state_detected(rng):
    graph = build_cache_graph(np.array([2, 2, 2]), 3, 2, rng)
    st = make_state(graph.server_content, 3, 3)
    st.idle_count[1] += 1
    assert check_state(st) != 0


def test_departure_of_idle_server_raises(rng):
    graph = build_cache_graph(np.array([2, 2, 2]), 3, 2, rng)
    st = make_state(graph.server_content, 3, 3)
    with pytest.raises(RuntimeError):
        handle_departure(st, 0, 1.0)


def test_stability_warning():
    cat = Catalog(np.full(4, 2.0))
    params = SystemParams.from_catalog(cat, 10, 2)
    with pytest.warns(StabilityWarning):
        run(cat, ReplicationProfile(np.full(4, 5)), params, SimConfig(horizon=10))


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(horizon=0)
    with pytest.raises(ValueError):
        SimConfig(horizon=10, warmup=10)
    with pytest.raises(ValueError):
        SimConfig(n_batches=1)
    assert SimConfig(horizon=100).resolved_warmup == 20


def test_infeasible_profile_rejected(zipf08):
    cat, params = zipf08
    bad = ReplicationProfile(np.full(cat.n, 1))
    with pytest.raises(ValueError):
        run(cat, bad, params)
