"""Command-line entry point: ``edgecdn <subcommand> ...``.

Exit status is 0 on success, 2 for an invalid configuration and 3 when at
least one simulation cell failed.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

from .harness import (PRESETS, ConfigError, PolicySpec, build_instance, build_profile,
                      convergence_metrics, load_config, load_preset, run_scenario, sim_config,
                      write_final_state_csv, write_trajectory_csv)
from .meanfield import (ConvergenceError, availability_means, fixed_point_solve,
                        loss_rate_closed_form)
from .model import InfeasibleProfileError, proportional_replication, write_profile_csv
from .optimizer import greedy_marginal_allocation, mean_loss, optimized_replication
from .sim.engine import dump_json, run, write_outputs
from .sim.graph import GraphBuildError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CELL = 3

log = logging.getLogger("edgecdn")


def _static_policy(cfg):
    for p in cfg.policies:
        if not p.adaptive:
            return p
    return PolicySpec(name="proportional", kind="proportional")


def _out(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _override(cfg, args):
    horizon = getattr(args, "horizon", None)
    warmup = getattr(args, "warmup", None)
    if horizon is not None and warmup is None:
        # the configured warmup belongs to the configured horizon
        warmup = 0.2 * horizon
    return cfg.with_overrides(horizon=horizon, warmup=warmup,
                              seeds=None if args.seed is None else (args.seed,))


# -------------------------------------------------------------- subcommands

def cmd_meanfield(args):
    cfg = load_config(args.config)
    catalog, params, cls, csv_prof = build_instance(cfg.instance)
    profile, _ = build_profile(_static_policy(cfg), catalog, params, cls, csv_prof)
    sol = fixed_point_solve(catalog, profile, params, tol=args.tol, method=args.method)
    lam, reps = catalog.popularities, profile.replicas
    closed = loss_rate_closed_form(lam, reps, sol.theta_eff)
    z_mean, z_mode = availability_means(lam, reps, sol.theta_eff)
    out = _out(args, "meanfield-out")
    with open(out / "meanfield.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["content_id", "lambda", "replicas", "gamma_closed", "gamma_exact",
                    "z_mean", "z_mode"])
        for c in range(catalog.n):
            w.writerow([c, repr(float(lam[c])), int(reps[c]), repr(float(closed[c])),
                        repr(float(sol.gamma[c])), repr(float(z_mean[c])), int(z_mode[c])])
    summary = {"gamma_bar": sol.gamma_bar, "inefficiency": sol.inefficiency,
               "theta_eff": sol.theta_eff, "rho_eff": sol.rho_eff,
               "iterations": sol.n_iter, "residual": sol.residual}
    dump_json(out / "summary.json", summary)
    print(f"inefficiency {sol.inefficiency:.4g}  theta_eff {sol.theta_eff:.4g}  "
          f"({sol.n_iter} iterations)")
    return EXIT_OK


def cmd_optimize(args):
    cfg = load_config(args.config)
    catalog, params, _, _ = build_instance(cfg.instance)
    if args.method == "greedy":
        ref = proportional_replication(catalog, params)
        theta = fixed_point_solve(catalog, ref, params).theta_eff
        profile = greedy_marginal_allocation(catalog, params, theta, args.objective)
        report = {"gamma_bar_predicted": mean_loss(catalog, profile, theta, args.objective),
                  "coefficient": None, "Dbar": params.mean_replicas,
                  "theta_eff": theta, "method": "greedy"}
    else:
        res = optimized_replication(catalog, params)
        profile, report = res.profile, res.to_dict()
    out = _out(args, "optimize-out")
    write_profile_csv(out / "profile.csv", catalog, profile)
    dump_json(out / "report.json", report)
    print(f"predicted gamma_bar {report['gamma_bar_predicted']:.4g}  "
          f"theta_eff {report['theta_eff']:.4g}")
    return EXIT_OK


def cmd_simulate(args):
    cfg = _override(load_config(args.config), args)
    catalog, params, cls, csv_prof = build_instance(cfg.instance)
    policy = _static_policy(cfg)
    profile, _ = build_profile(policy, catalog, params, cls, csv_prof)
    metrics = run(catalog, profile, params, sim_config(cfg, policy, cfg.seeds[0]))
    out = write_outputs(_out(args, "simulate-out"), metrics)
    print(f"inefficiency {metrics.inefficiency:.4g} +- {metrics.inefficiency_se:.2g}  "
          f"busy {metrics.busy_fraction:.4f}  events {metrics.events_processed}  -> {out}")
    return EXIT_OK


def cmd_adaptive(args):
    cfg = _override(load_config(args.config), args)
    catalog, params, cls, csv_prof = build_instance(cfg.instance)
    start = _static_policy(cfg)
    policy = PolicySpec(name="adaptive", kind="adaptive", rule=args.rule,
                        virtual=args.virtual == "on", tau=args.tau,
                        start=start.kind if start.kind != "adaptive" else "proportional",
                        path=start.path)
    if args.snapshot_every is not None:
        cfg = cfg.with_overrides(snapshot_every=args.snapshot_every)
    profile, _ = build_profile(policy, catalog, params, cls, csv_prof)
    metrics = run(catalog, profile, params, sim_config(cfg, policy, cfg.seeds[0]))
    out = write_outputs(_out(args, "adaptive-out"), metrics)
    conv = convergence_metrics(metrics.snapshot_times, metrics.decile_trajectories())
    write_trajectory_csv(out / "trajectory.csv", conv["times"], conv["deciles"])
    write_final_state_csv(out / "final_state.csv", metrics)
    print(f"inefficiency {metrics.inefficiency:.4g}  t90 bottom decile {conv['t90_bottom']:g}"
          f"  -> {out}")
    return EXIT_OK


def _scenario(cfg, args):
    cfg = _override(cfg, args)
    out = args.out or cfg.out_dir or f"{cfg.name}-out"
    report = run_scenario(cfg, jobs=args.jobs, out_dir=out)
    print("\n".join(report.lines()))
    return EXIT_CELL if report.failures else EXIT_OK


def cmd_reproduce(args):
    return _scenario(load_preset(args.preset), args)


def cmd_compare(args):
    return _scenario(load_config(args.config), args)


# ------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="run a single seed instead of the configured list")
    common.add_argument("--jobs", type=int, default=1, help="parallel simulation cells")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    timing = argparse.ArgumentParser(add_help=False)
    timing.add_argument("--horizon", type=float, default=None)
    timing.add_argument("--warmup", type=float, default=None,
                        help="discarded initial period (default: 20%% of the horizon)")

    parser = argparse.ArgumentParser(prog="edgecdn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meanfield", parents=[common], help="mean-field loss rates")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=["damped", "bisection"], default="damped")
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_meanfield)

    p = sub.add_parser("optimize", parents=[common], help="optimized static replication")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=["closed_form", "greedy"], default="closed_form")
    p.add_argument("--objective", choices=["exact", "closed_form"], default="exact",
                   help="loss model minimized by the greedy allocation")
    p.set_defaults(func=cmd_optimize)

    for name, func, helptext in [("simulate", cmd_simulate, "simulate a static replication"),
                                 ("adaptive", cmd_adaptive, "simulate adaptive replication")]:
        p = sub.add_parser(name, parents=[common, timing], help=helptext)
        p.add_argument("--config", required=True)
        p.set_defaults(func=func)
        if name == "adaptive":
            p.add_argument("--rule", choices=["random", "lrl", "lfl"], default="lrl")
            p.add_argument("--virtual", choices=["on", "off"], default="off")
            p.add_argument("--tau", type=float, default=500.0)
            p.add_argument("--snapshot-every", type=float, default=None)

    p = sub.add_parser("reproduce", parents=[common, timing], help="run a bundled preset")
    p.add_argument("preset", choices=PRESETS)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("compare", parents=[common, timing], help="run a scenario file")
    p.add_argument("config")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, InfeasibleProfileError, GraphBuildError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"error: {exc} (residual {exc.residual:.3g})", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
