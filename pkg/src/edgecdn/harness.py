"""Scenario files, multi-seed/multi-policy runs and comparison reports."""

import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .adaptive import RULES, EvictionRule, VirtualLossConfig
from .meanfield import availability_means, fixed_point_solve
from .model import (ClassSpec, ReplicationProfile, SystemParams, class_catalog,
                    proportional_replication, read_profile_csv, write_profile_csv,
                    zipf_catalog)
from .optimizer import greedy_marginal_allocation, optimized_replication
from .sim.engine import SimConfig, dump_json, popularity_deciles, run, write_outputs

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

POLICY_KINDS = ("proportional", "optimized", "greedy", "csv", "class", "adaptive")
INSTANCE_KINDS = ("zipf", "class", "csv")
PRESETS = ("table1-class", "zipf08-proportional", "zipf12-proportional",
           "zipf08-optimized", "zipf12-optimized", "zipf08-adaptive-speed")


class ConfigError(ValueError):
    """A scenario file is malformed or describes an impossible instance."""


@dataclass(frozen=True)
class InstanceSpec:
    kind: str
    m: int
    d: int
    n: Optional[int] = None
    rho: Optional[float] = None
    alpha: Optional[float] = None
    sizes: Optional[tuple] = None
    rates: Optional[tuple] = None
    replicas: Optional[tuple] = None
    path: Optional[str] = None


@dataclass(frozen=True)
class PolicySpec:
    """How the replication profile of a cell is obtained.

    ``adaptive`` policies start from the profile named by ``start``
    (proportional by default) and then evolve under ``rule``.
    """

    name: str
    kind: str
    rule: Optional[str] = None
    virtual: bool = False
    tau: float = 500.0
    lrl_restrict: bool = False
    start: str = "proportional"
    path: Optional[str] = None
    objective: str = "exact"

    @property
    def adaptive(self):
        return self.kind == "adaptive"


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    instance: InstanceSpec
    policies: tuple
    horizon: float = 1e4
    warmup: Optional[float] = None
    seeds: tuple = (1,)
    snapshot_every: Optional[float] = None
    n_batches: int = 20
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        w = self.resolved_warmup
        if not 0 <= w < self.horizon:
            raise ConfigError(f"need horizon > warmup >= 0, got {self.horizon} and {w}")
        if len(self.seeds) < 1:
            raise ConfigError("at least one seed is required")
        if not self.policies:
            raise ConfigError("at least one policy is required")
        names = [p.name for p in self.policies]
        if len(set(names)) != len(names):
            raise ConfigError("policy names must be unique")

    @property
    def resolved_warmup(self):
        return 0.2 * self.horizon if self.warmup is None else float(self.warmup)

    def with_overrides(self, **kw):
        values = {k: v for k, v in kw.items() if v is not None}
        return ScenarioConfig(**{**self.__dict__, **values})


# ------------------------------------------------------------------ loading

def _require(table, key, where):
    if key not in table:
        raise ConfigError(f"missing key {key!r} in {where}")
    return table[key]


def _instance_from_table(t, base):
    kind = _require(t, "kind", "[instance]")
    if kind not in INSTANCE_KINDS:
        raise ConfigError(f"unknown instance kind {kind!r}; expected one of {INSTANCE_KINDS}")
    path = t.get("path")
    if path is not None and base is not None and not Path(path).is_absolute():
        path = str(base / path)
    tup = lambda v: None if v is None else tuple(v)
    try:
        spec = InstanceSpec(kind=kind, m=int(_require(t, "m", "[instance]")),
                            d=int(_require(t, "d", "[instance]")), n=t.get("n"),
                            rho=t.get("rho"), alpha=t.get("alpha"), sizes=tup(t.get("sizes")),
                            rates=tup(t.get("rates")), replicas=tup(t.get("replicas")),
                            path=path)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [instance] table: {exc}") from exc
    needed = {"zipf": ("n", "rho", "alpha"), "class": ("sizes", "rates"), "csv": ("path",)}
    for key in needed[kind]:
        if getattr(spec, key) is None:
            raise ConfigError(f"{kind} instance needs {key!r}")
    return spec


def _policy_from_table(t, base):
    name = _require(t, "name", "[[policy]]")
    kind = _require(t, "kind", f"policy {name!r}")
    if kind not in POLICY_KINDS:
        raise ConfigError(f"policy {name!r}: unknown kind {kind!r}")
    rule = t.get("rule")
    if kind == "adaptive" and rule not in RULES:
        raise ConfigError(f"policy {name!r}: rule must be one of {sorted(RULES)}")
    path = t.get("path")
    if path is not None and base is not None and not Path(path).is_absolute():
        path = str(base / path)
    if kind == "csv" and path is None:
        raise ConfigError(f"policy {name!r}: csv policies need a path")
    return PolicySpec(name=name, kind=kind, rule=rule, virtual=bool(t.get("virtual", False)),
                      tau=float(t.get("tau", 500.0)),
                      lrl_restrict=bool(t.get("lrl_restrict", False)),
                      start=t.get("start", "proportional"), path=path,
                      objective=t.get("objective", "exact"))


def config_from_dict(data, base=None):
    """Build a ``ScenarioConfig`` from parsed TOML; relative paths resolve against ``base``."""
    if "instance" not in data:
        raise ConfigError("missing [instance] table")
    policies = tuple(_policy_from_table(p, base) for p in data.get("policy", []))
    seeds = data.get("seeds", [1])
    if isinstance(seeds, int):
        seeds = [seeds]
    try:
        return ScenarioConfig(
            name=data.get("name", "scenario"),
            instance=_instance_from_table(data["instance"], base),
            policies=policies,
            horizon=float(data.get("horizon", 1e4)),
            warmup=data.get("warmup"),
            seeds=tuple(int(s) for s in seeds),
            snapshot_every=data.get("snapshot_every"),
            n_batches=int(data.get("n_batches", 20)),
            out_dir=data.get("out_dir"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, base=path.parent)


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    text = resources.files("edgecdn.presets").joinpath(f"{name}.toml").read_text()
    return config_from_dict(tomllib.loads(text))


# ---------------------------------------------------------------- instances

def build_instance(spec):
    """Return ``(catalog, params, class_spec_or_None, csv_profile_or_None)``."""
    try:
        if spec.kind == "zipf":
            lam_bar = spec.rho * spec.m / spec.n
            cat = zipf_catalog(int(spec.n), float(spec.alpha), lam_bar)
            return cat, SystemParams.from_catalog(cat, spec.m, spec.d), None, None
        if spec.kind == "class":
            cls = ClassSpec(spec.sizes, spec.rates, spec.replicas)
            scale = 1.0
            if spec.rho is not None:
                # rescale the class rates so the offered load is exactly rho
                total = float(np.dot(cls.sizes, cls.rates))
                scale = spec.rho * spec.m / total
            cat = class_catalog(cls, scale)
            return cat, SystemParams.from_catalog(cat, spec.m, spec.d), cls, None
        cat, prof = read_profile_csv(spec.path)
        return cat, SystemParams.from_catalog(cat, spec.m, spec.d), None, prof
    except (ValueError, OSError) as exc:
        raise ConfigError(f"cannot build instance: {exc}") from exc


def build_profile(policy, catalog, params, class_spec=None, csv_profile=None):
    """Replication profile a policy starts from, plus optimizer details if any."""
    kind = policy.start if policy.adaptive else policy.kind
    info = {}
    if kind == "proportional":
        prof = proportional_replication(catalog, params)
    elif kind == "optimized":
        report = optimized_replication(catalog, params)
        prof = report.profile
        info = report.to_dict()
    elif kind == "greedy":
        ref = proportional_replication(catalog, params)
        theta = fixed_point_solve(catalog, ref, params).theta_eff
        prof = greedy_marginal_allocation(catalog, params, theta, policy.objective)
        info = {"theta_eff": theta, "method": "greedy"}
    elif kind == "class":
        if class_spec is None or class_spec.replicas is None:
            raise ConfigError(f"policy {policy.name!r} needs per-class replicas")
        prof = class_spec.profile()
    elif kind == "csv":
        if policy.path is not None:
            _, prof = read_profile_csv(policy.path)
        elif csv_profile is not None:
            prof = csv_profile
        else:
            raise ConfigError(f"policy {policy.name!r} has no CSV profile")
    else:
        raise ConfigError(f"policy {policy.name!r}: cannot start from {kind!r}")
    return prof.validate(params), info


# -------------------------------------------------------------- convergence

def time_to_fraction(times, values, fraction=0.9, final=None):
    """First time the series covers ``fraction`` of its change from the start.

    Times are measured from ``times[0]``. ``final`` defaults to the last
    value; a series that does not move converges at time 0.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    start = values[0]
    change = (values[-1] if final is None else final) - start
    if change == 0:
        return 0.0
    hit = np.flatnonzero((values - start) / change >= fraction)
    return float(times[hit[0]] - times[0]) if hit.size else float(times[-1] - times[0])


def convergence_metrics(times, trajectory, warmup=0.0, fraction=0.9, tail=0.1):
    """Per-decile trajectories and time-to-90%-of-final for the extreme deciles.

    ``trajectory`` has one row per snapshot and one column per popularity
    decile (most popular first). The final level of each decile is its mean
    over the last ``tail`` share of the snapshots, which smooths out the
    fluctuations of a single snapshot.
    """
    times = np.asarray(times, dtype=float)
    traj = np.asarray(trajectory, dtype=float)
    if traj.ndim != 2 or traj.shape[0] < 2 or times.shape[0] != traj.shape[0]:
        raise ValueError("need at least two snapshots, one row per snapshot time")
    if times[-1] < warmup:
        raise ValueError("trajectory ends before the warmup cutoff")
    if not 0 < tail <= 1:
        raise ValueError("tail must lie in (0, 1]")
    k = max(1, int(round(tail * traj.shape[0])))
    final = traj[-k:].mean(axis=0)
    return {
        "times": times,
        "deciles": traj,
        "final": final,
        "t90_top": time_to_fraction(times, traj[:, 0], fraction, final[0]),
        "t90_bottom": time_to_fraction(times, traj[:, -1], fraction, final[-1]),
    }


def write_trajectory_csv(path, times, trajectory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "decile", "mean_replicas"])
        for t, row in zip(times, trajectory):
            for k, v in enumerate(row):
                w.writerow([repr(float(t)), k + 1, repr(float(v))])


def write_final_state_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["content_id", "lambda", "final_replicas", "replicas_mean", "arrivals",
                    "losses", "virtual_losses", "evictions", "repair_fetches"])
        reps = metrics.replicas_mean
        for c in range(metrics.n):
            w.writerow([c, repr(float(metrics.popularities[c])), int(metrics.final_replicas[c]),
                        repr(float(reps[c])), int(metrics.arrivals[c]), int(metrics.losses[c]),
                        int(metrics.virtual_losses[c]), int(metrics.evictions[c]),
                        int(metrics.repair_fetches[c])])


# -------------------------------------------------------------------- cells

@dataclass
class CellResult:
    policy: str
    seed: int
    ok: bool
    summary: dict = field(default_factory=dict)
    z_mean: Optional[np.ndarray] = None
    loss_rate: Optional[np.ndarray] = None
    replicas_mean: Optional[np.ndarray] = None
    convergence: Optional[dict] = None
    error: str = ""


def sim_config(cfg, policy, seed):
    rule = None
    if policy.adaptive:
        rule = EvictionRule(policy.rule, tau=policy.tau, lrl_restrict=policy.lrl_restrict)
    snap = cfg.snapshot_every if policy.adaptive else None
    return SimConfig(horizon=cfg.horizon, warmup=cfg.resolved_warmup, seed=seed, rule=rule,
                     virtual=VirtualLossConfig(enabled=policy.virtual),
                     snapshot_every=snap or (cfg.horizon / 100 if policy.adaptive else None),
                     n_batches=cfg.n_batches)


def run_cell(cfg, policy_name, seed, out_dir=None):
    """Simulate one (policy, seed) cell; failures are returned, not raised."""
    policy = next(p for p in cfg.policies if p.name == policy_name)
    try:
        catalog, params, cls, csv_prof = build_instance(cfg.instance)
        profile, _ = build_profile(policy, catalog, params, cls, csv_prof)
        metrics = run(catalog, profile, params, sim_config(cfg, policy, seed))
    except Exception as exc:  # recorded per cell so the other cells proceed
        log.exception("cell %s/seed %d failed", policy_name, seed)
        return CellResult(policy=policy_name, seed=seed, ok=False,
                          error=f"{type(exc).__name__}: {exc}")
    conv = None
    if policy.adaptive and metrics.snapshots.shape[0] >= 2:
        conv = convergence_metrics(metrics.snapshot_times, metrics.decile_trajectories())
    if out_dir is not None:
        cell_dir = Path(out_dir) / policy_name / f"seed{seed}"
        write_outputs(cell_dir, metrics)
        if conv is not None:
            write_trajectory_csv(cell_dir / "trajectory.csv", conv["times"], conv["deciles"])
            write_final_state_csv(cell_dir / "final_state.csv", metrics)
    summary = metrics.summary()
    if conv is not None:
        summary["t90_top"] = conv["t90_top"]
        summary["t90_bottom"] = conv["t90_bottom"]
    return CellResult(policy=policy_name, seed=seed, ok=True, summary=summary,
                      z_mean=metrics.z_mean, loss_rate=metrics.loss_rate,
                      replicas_mean=metrics.replicas_mean, convergence=conv)


# ------------------------------------------------------------------- report

@dataclass
class ComparisonReport:
    name: str
    cells: list
    meanfield: dict
    aggregates: dict
    class_table: list = field(default_factory=list)

    @property
    def failures(self):
        return [c for c in self.cells if not c.ok]

    def cell(self, policy, seed):
        return next(c for c in self.cells if c.policy == policy and c.seed == seed)

    def to_dict(self):
        return {
            "name": self.name,
            "cells": [{"policy": c.policy, "seed": c.seed, "ok": c.ok, "error": c.error,
                       **c.summary} for c in self.cells],
            "meanfield": self.meanfield,
            "aggregates": self.aggregates,
            "class_table": self.class_table,
        }

    def lines(self):
        """Human-readable summary, one line per policy: simulated / mean-field."""
        out = []
        for name, agg in self.aggregates.items():
            mf = self.meanfield.get(name, {}).get("inefficiency")
            sim = agg["inefficiency_mean"]
            txt = "n/a" if sim is None else f"{sim * 1e3:.3g}"
            if mf is not None:
                txt += f" / {mf * 1e3:.3g}"
            sd = agg["inefficiency_sd"]
            extra = "" if sd is None else f"  (sd {sd * 1e3:.2g}, {agg['n_ok']} seeds)"
            out.append(f"{name}: 1e3 x inefficiency (sim / approx) = {txt}{extra}")
        for row in self.class_table:
            out.append("class {cls}: E[Z] {z_mean_sim:.3g} / {z_mean_mf:.3g}, "
                       "1e3 x gamma {g_sim:.3g} / {g_mf:.3g}".format(
                           g_sim=row["gamma_sim"] * 1e3, g_mf=row["gamma_mf"] * 1e3, **row))
        for c in self.failures:
            out.append(f"FAILED {c.policy} seed {c.seed}: {c.error}")
        return out


def _mean_sd(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=float)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else None
    return float(arr.mean()), sd


def _meanfield_predictions(cfg):
    catalog, params, cls, csv_prof = build_instance(cfg.instance)
    out = {}
    for p in cfg.policies:
        if p.adaptive:
            continue
        profile, info = build_profile(p, catalog, params, cls, csv_prof)
        sol = fixed_point_solve(catalog, profile, params)
        z_mean, _ = availability_means(catalog.popularities, profile.replicas, sol.theta_eff)
        out[p.name] = {"inefficiency": sol.inefficiency, "gamma_bar": sol.gamma_bar,
                       "theta_eff": sol.theta_eff, "rho_eff": sol.rho_eff,
                       "gamma": sol.gamma, "z_mean": z_mean, "replicas": profile.replicas,
                       "optimizer": info}
    return out, catalog, cls


def _class_table(cfg, cells, mf, cls):
    if cls is None:
        return []
    labels = cls.labels()
    rows = []
    for p in cfg.policies:
        ok = [c for c in cells if c.policy == p.name and c.ok]
        if not ok or p.name not in mf:
            continue
        for k in range(len(cls.sizes)):
            g = labels == k
            rows.append({
                "policy": p.name, "cls": k + 1, "size": int(cls.sizes[k]),
                "replicas": int(mf[p.name]["replicas"][g][0]),
                "z_mean_sim": float(np.mean([c.z_mean[g].mean() for c in ok])),
                "z_mean_mf": float(mf[p.name]["z_mean"][g].mean()),
                "gamma_sim": float(np.mean([c.loss_rate[g].mean() for c in ok])),
                "gamma_mf": float(mf[p.name]["gamma"][g].mean()),
            })
    return rows


def run_scenario(cfg, jobs=1, out_dir=None):
    """Run every (policy, seed) cell and assemble a ``ComparisonReport``.

    Cells run in ``jobs`` worker processes; each is an independent simulation,
    so results do not depend on ``jobs``.
    """
    out_dir = out_dir or cfg.out_dir
    mf, catalog, cls = _meanfield_predictions(cfg)
    tasks = [(p.name, s) for p in cfg.policies for s in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cfg, name, seed, out_dir) for name, seed in tasks]
            cells = []
            for (name, seed), fut in zip(tasks, futures):
                try:
                    cells.append(fut.result())
                except Exception as exc:  # worker died
                    cells.append(CellResult(policy=name, seed=seed, ok=False,
                                            error=f"{type(exc).__name__}: {exc}"))
    else:
        cells = [run_cell(cfg, name, seed, out_dir) for name, seed in tasks]

    aggregates = {}
    for p in cfg.policies:
        ok = [c for c in cells if c.policy == p.name and c.ok]
        mean, sd = _mean_sd([c.summary["inefficiency"] for c in ok])
        agg = {"inefficiency_mean": mean, "inefficiency_sd": sd, "n_ok": len(ok)}
        if p.adaptive and ok:
            for key in ("t90_top", "t90_bottom"):
                agg[key + "_mean"], _ = _mean_sd([c.summary[key] for c in ok if key in c.summary])
        aggregates[p.name] = agg

    report = ComparisonReport(
        name=cfg.name, cells=cells,
        meanfield={k: {kk: v[kk] for kk in ("inefficiency", "gamma_bar", "theta_eff",
                                            "rho_eff", "optimizer")}
                   for k, v in mf.items()},
        aggregates=aggregates, class_table=_class_table(cfg, cells, mf, cls))
    if out_dir is not None:
        write_report(out_dir, report, catalog, mf)
    return report


def write_report(out_dir, report, catalog, mf):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "report.json", report.to_dict())
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "seed", "status", "inefficiency", "inefficiency_se",
                    "busy_fraction", "meanfield_inefficiency"])
        for c in report.cells:
            mfi = mf.get(c.policy, {}).get("inefficiency")
            w.writerow([c.policy, c.seed, "ok" if c.ok else "failed",
                        repr(c.summary.get("inefficiency", float("nan"))),
                        repr(c.summary.get("inefficiency_se", float("nan"))),
                        repr(c.summary.get("busy_fraction", float("nan"))),
                        "" if mfi is None else repr(mfi)])
    for name, pred in mf.items():
        pdir = out / name
        pdir.mkdir(parents=True, exist_ok=True)
        write_profile_csv(pdir / "profile.csv", catalog,
                          ReplicationProfile(pred["replicas"], cap_fraction=1.0))
    if report.class_table:
        with open(out / "class_table.csv", "w", newline="") as fh:
            keys = list(report.class_table[0])
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            for row in report.class_table:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    (out / "summary.txt").write_text("\n".join(report.lines()) + "\n")


def decile_loss_rates(popularities, loss_rate):
    """Mean per-content loss rate in each popularity decile (most popular first)."""
    return np.array([np.mean(loss_rate[g]) for g in popularity_deciles(popularities)])
