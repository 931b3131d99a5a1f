"""Run a simulation and collect time-weighted metrics."""

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..adaptive import EvictionRule, VirtualLossConfig
from .alias import build_alias_table
from .graph import CacheGraph, build_cache_graph
from .kernel import run_kernel
from .state import RULE_NONE, make_state

STATE_ERRORS = {
    1: "busy-server count disagrees with requests in service",
    2: "idle replica count disagrees with a recount",
    3: "idle slot index corrupted",
    4: "replica count disagrees with the cache contents",
    5: "a server stores the same content twice",
    7: "available-content set corrupted",
    8: "least-recently-lost list is not a permutation",
}


class StabilityWarning(UserWarning):
    """The instance is too small for its load; loss rates will be erratic."""


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Everything about a run except the instance itself.

    ``warmup=None`` discards the first 20% of the horizon. Passing a ``rule``
    turns on replica adaptation; ``virtual`` alone (without a rule) counts
    virtual losses on frozen replication.
    """

    horizon: float = 1e4
    warmup: Optional[float] = None
    seed: int = 0
    rule: Optional[EvictionRule] = None
    virtual: VirtualLossConfig = field(default_factory=VirtualLossConfig)
    snapshot_every: Optional[float] = None
    n_batches: int = 20
    debug_every: int = 0

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not 0 <= self.resolved_warmup < self.horizon:
            raise ValueError("warmup must lie in [0, horizon)")
        if self.n_batches < 2:
            raise ValueError("need at least two batches for error bars")
        if self.snapshot_every is not None and not self.snapshot_every > 0:
            raise ValueError("snapshot_every must be positive")

    @property
    def resolved_warmup(self):
        return 0.2 * self.horizon if self.warmup is None else float(self.warmup)

    @property
    def adaptive(self):
        return self.rule is not None


@dataclass
class SimMetrics:
    """Counters and time integrals measured over ``[warmup, horizon]``."""

    popularities: np.ndarray
    m: int
    d: int
    horizon: float
    warmup: float
    arrivals: np.ndarray
    losses: np.ndarray
    virtual_losses: np.ndarray
    evictions: np.ndarray
    creations: np.ndarray
    repair_fetches: np.ndarray
    skipped_creations: np.ndarray
    z_time: np.ndarray
    replica_time: np.ndarray
    busy_time: float
    batch_arrivals: np.ndarray
    batch_losses: np.ndarray
    batch_busy: np.ndarray
    snapshot_times: np.ndarray
    snapshots: np.ndarray
    final_replicas: np.ndarray
    events_processed: int
    wall_time: float = 0.0

    @property
    def n(self):
        return self.popularities.shape[0]

    @property
    def interval(self):
        return self.horizon - self.warmup

    @property
    def loss_rate(self):
        """Per-content losses per unit time."""
        return self.losses / self.interval

    @property
    def virtual_loss_rate(self):
        return self.virtual_losses / self.interval

    @property
    def gamma_bar(self):
        return float(self.losses.sum()) / self.interval / self.n

    @property
    def inefficiency(self):
        total = self.arrivals.sum()
        return float(self.losses.sum() / total) if total else 0.0

    @property
    def inefficiency_se(self):
        arr = self.batch_arrivals.sum(axis=1)
        ok = arr > 0
        per_batch = self.batch_losses.sum(axis=1)[ok] / arr[ok]
        return _standard_error(per_batch)

    def blocking(self, c):
        """Fraction of requests for ``c`` that were lost, with its batch standard error."""
        arr = self.batch_arrivals[:, c]
        ok = arr > 0
        est = self.losses[c] / self.arrivals[c] if self.arrivals[c] else 0.0
        return float(est), _standard_error(self.batch_losses[ok, c] / arr[ok])

    @property
    def busy_fraction(self):
        return self.busy_time / (self.m * self.interval)

    @property
    def busy_fraction_se(self):
        widths = self.interval / self.batch_busy.shape[0]
        return _standard_error(self.batch_busy / (self.m * widths))

    @property
    def z_probabilities(self):
        """Row ``c`` is the time-weighted distribution of available replicas of ``c``."""
        return self.z_time / self.interval

    @property
    def z_mean(self):
        z = np.arange(self.z_time.shape[1])
        return self.z_probabilities @ z

    @property
    def replicas_mean(self):
        return self.replica_time / self.interval

    def decile_trajectories(self):
        """Mean replicas per popularity decile at each snapshot, shape ``(S, 10)``."""
        groups = popularity_deciles(self.popularities)
        return np.stack([self.snapshots[:, g].mean(axis=1) for g in groups], axis=1)

    def summary(self):
        return {
            "inefficiency": self.inefficiency,
            "inefficiency_se": self.inefficiency_se,
            "busy_fraction": self.busy_fraction,
            "gamma_bar": self.gamma_bar,
            "arrivals": int(self.arrivals.sum()),
            "losses": int(self.losses.sum()),
            "virtual_losses": int(self.virtual_losses.sum()),
            "evictions": int(self.evictions.sum()),
            "repair_fetches": int(self.repair_fetches.sum()),
            "skipped_creations": int(self.skipped_creations.sum()),
            "horizon": self.horizon,
            "warmup": self.warmup,
            "events_processed": self.events_processed,
        }


def _standard_error(samples):
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        return math.nan
    return float(samples.std(ddof=1) / math.sqrt(samples.size))


def popularity_deciles(popularities):
    """Ten index groups from most to least popular (ties broken by content id)."""
    order = np.argsort(-np.asarray(popularities), kind="stable")
    return np.array_split(order, 10)


def stability_threshold(rho):
    return 10.0 * rho / (1.0 - rho) ** 2


def run(catalog, profile, params, config=None, graph=None):
    """Simulate the loss network for one seed.

    Parameters
    ----------
    catalog : Catalog
    profile : ReplicationProfile
        Initial replica counts (the whole run, unless ``config.rule`` is set).
    params : SystemParams
    config : SimConfig, optional
    graph : CacheGraph, optional
        Use this storage graph instead of sampling one from ``profile``.

    Returns
    -------
    SimMetrics
    """
    config = config or SimConfig()
    profile.validate(params)
    if catalog.n != params.n:
        raise ValueError("catalog and params disagree on n")
    if params.m < stability_threshold(params.rho):
        warnings.warn(
            f"m={params.m} is small for load rho={params.rho}: "
            f"expected at least {stability_threshold(params.rho):.0f} servers",
            StabilityWarning, stacklevel=2)

    graph_seed, event_seed = np.random.SeedSequence(config.seed).spawn(2)
    if graph is None:
        graph = build_cache_graph(profile.replicas, params.m, params.d,
                                  np.random.default_rng(graph_seed))
    elif not np.array_equal(graph.degrees(params.n), profile.replicas):
        raise ValueError("graph degrees do not match the profile")
    rng = np.random.default_rng(event_seed)

    n, m = params.n, params.m
    rule = config.rule
    zmax = m if config.adaptive else int(profile.replicas.max())
    st = make_state(
        graph.server_content, n, zmax,
        rule=RULE_NONE if rule is None else rule.code,
        virtual=config.virtual.enabled,
        adapt=config.adaptive,
        tau=500.0 if rule is None else rule.tau,
        track_k=config.virtual.track_k,
        lrl_restrict=False if rule is None else rule.lrl_restrict,
    )

    lam = catalog.popularities
    prob, alias = build_alias_table(lam)
    horizon = float(config.horizon)
    warmup = config.resolved_warmup
    if config.snapshot_every is None:
        snap_times = np.zeros(0)
    else:
        snap_times = np.arange(0.0, horizon + 0.5 * config.snapshot_every,
                               config.snapshot_every)
        snap_times = snap_times[snap_times <= horizon]
    snaps = np.zeros((snap_times.size, n), dtype=np.int64)
    nb_ = config.n_batches
    edges = np.linspace(warmup, horizon, nb_ + 1)
    batch_losses = np.zeros((nb_, n), dtype=np.int64)
    batch_arrivals = np.zeros((nb_, n), dtype=np.int64)
    busy_cum = np.zeros(nb_ + 1)
    refresh = config.virtual.refresh_every if config.virtual.enabled else 0.0

    start = time.perf_counter()
    events, code = run_kernel(st, rng, prob, alias, catalog.total_rate, horizon, warmup,
                              snap_times, snaps, edges, batch_losses, batch_arrivals,
                              busy_cum, refresh, int(config.debug_every))
    wall = time.perf_counter() - start
    if code:
        raise SimulationError(
            f"state check failed after {events} events: {STATE_ERRORS.get(code, code)}")

    return SimMetrics(
        popularities=np.array(lam),
        m=m,
        d=params.d,
        horizon=horizon,
        warmup=warmup,
        arrivals=st.arrivals.copy(),
        losses=st.losses.copy(),
        virtual_losses=st.vlosses.copy(),
        evictions=st.evictions.copy(),
        creations=st.creations.copy(),
        repair_fetches=st.fetches.copy(),
        skipped_creations=st.skipped.copy(),
        z_time=st.hist.copy(),
        replica_time=st.rep_int.copy(),
        busy_time=float(st.busy_int[0]),
        batch_arrivals=batch_arrivals,
        batch_losses=batch_losses,
        batch_busy=np.diff(busy_cum),
        snapshot_times=snap_times,
        snapshots=snaps,
        final_replicas=st.replicas.copy(),
        events_processed=int(events),
        wall_time=wall,
    )


# ------------------------------------------------------------------ writers

def write_per_content_csv(path, metrics):
    z_mean = metrics.z_mean
    reps = metrics.replicas_mean
    rates = metrics.loss_rate
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["content_id", "lambda", "replicas_mean", "arrivals", "losses",
                    "loss_rate", "z_mean"])
        for c in range(metrics.n):
            w.writerow([c, repr(float(metrics.popularities[c])), repr(float(reps[c])),
                        int(metrics.arrivals[c]), int(metrics.losses[c]),
                        repr(float(rates[c])), repr(float(z_mean[c]))])


def write_z_histogram_csv(path, metrics):
    """Nonzero entries of the time-weighted availability distributions."""
    probs = metrics.z_probabilities
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["content_id", "z", "prob"])
        for c, z in zip(*np.nonzero(probs)):
            w.writerow([int(c), int(z), repr(float(probs[c, z]))])


def write_outputs(out_dir, metrics, prefix=""):
    """Write the per-content CSV, the Z histogram and ``summary.json``.

    Wall-clock time goes to a separate ``timing.json`` so that everything else
    is byte-identical across reruns of the same seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_per_content_csv(out / f"{prefix}per_content.csv", metrics)
    write_z_histogram_csv(out / f"{prefix}z_histogram.csv", metrics)
    dump_json(out / f"{prefix}summary.json", metrics.summary())
    dump_json(out / f"{prefix}timing.json", {"wall_time": metrics.wall_time})
    return out


def dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
