"""Command-line front end.

Subcommands:
  simulate    roll out behavior-policy trajectories to CSV
  oracle      print ground-truth average rewards and effects (exact or MC)
  estimate    one dataset, one estimator, JSON effect estimates
  experiment  full seed-aggregated sweep from a config file or flags
  report      summarize a metrics file as an aligned text table
"""

from __future__ import annotations

import argparse
import json
import sys

from .environments import ENV_IDS, build_environment
from .estimators import BaselineKind, baseline_effects, dm_effects, \
    mis_effects, mr_effects, mr_effects_alternative
from .harness import (
    ESTIMATOR_IDS,
    EmitFormat,
    ExperimentConfig,
    emit,
    load_rows,
    reference_effects,
    resolve_output_path,
    run_experiment,
)
from .mmdp import pool_tuples, simulate_dataset, write_trajectories_csv
from .nuisance import NuisanceConfig, fit_nuisances, oracle_nuisances
from .oracle import mc_oracle
from .scenarios import CorruptionScenario, corrupt_nuisances


def _add_env_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env", required=True, choices=ENV_IDS)
    p.add_argument("--sigma", type=float, default=2.0,
                   help="noise level (semi-synthetic environment only)")


def _cmd_simulate(args) -> int:
    env = build_environment(args.env, args.sigma)
    trajs = simulate_dataset(env.spec, env.behavior, args.n, args.horizon,
                             args.seed)
    path = resolve_output_path(args.out)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_trajectories_csv(trajs, fh)
    print(f"wrote {len(trajs)} trajectories of length {args.horizon} to {path}")
    return 0


def _cmd_oracle(args) -> int:
    env = build_environment(args.env, args.sigma)
    if args.mc:
        vals = mc_oracle(env.spec, env.target, env.control, args.n_traj,
                         args.horizon, args.seed)
    else:
        if not env.spec.is_finite:
            raise ValueError(
                f"{args.env} has continuous states: use --mc")
        vals = reference_effects(args.env, args.sigma)
    print(vals.to_json())
    return 0


def _build_nuisances(mode: str, data, env, seed: int, needs_alt: bool):
    if mode == "fitted":
        return fit_nuisances(data, env.spec, env.target, env.control,
                             NuisanceConfig(seed=seed),
                             with_alternative=needs_alt)
    ns = oracle_nuisances(env.spec, env.target, env.control, env.behavior,
                          with_alternative=needs_alt, seed=seed)
    if mode == "oracle":
        return ns
    if mode.startswith("corrupt:"):
        return corrupt_nuisances(ns, CorruptionScenario(mode.split(":", 1)[1]),
                                 seed=seed)
    raise ValueError(f"unknown nuisance mode {mode!r}")


def _cmd_estimate(args) -> int:
    env = build_environment(args.env, args.sigma)
    data = pool_tuples(simulate_dataset(env.spec, env.behavior, args.n,
                                        args.horizon, args.seed))
    ns = _build_nuisances(args.nuisance, data, env, args.seed,
                          needs_alt=args.estimator == "mr-alt")
    if args.estimator == "dm":
        out = dm_effects(ns).to_json()
    elif args.estimator in ("mis1", "mis2"):
        out = mis_effects(data, ns, ge_variant=int(args.estimator[-1])).to_json()
    elif args.estimator == "mr":
        out = mr_effects(data, ns).to_json()
    elif args.estimator == "mr-alt":
        out = mr_effects_alternative(data, ns).to_json()
    else:
        ide, ime = baseline_effects(data, ns, BaselineKind(args.estimator))
        out = json.dumps({"estimator": args.estimator, "ide": ide, "ime": ime},
                         indent=2)
    print(out)
    return 0


def _parse_grid(text: str) -> list:
    cells = []
    for part in text.split(","):
        n, t = part.split(":")
        cells.append((int(n), int(t)))
    return cells


def _cmd_experiment(args) -> int:
    if args.config:
        config = ExperimentConfig.from_file(args.config)
    else:
        if not args.env:
            raise ValueError("either --config or --env is required")
        config = ExperimentConfig(
            env=args.env, sigma=args.sigma, grid=_parse_grid(args.grid),
            estimators=args.estimators.split(","), nuisance=args.nuisance,
            n_seeds=args.n_seeds, master_seed=args.master_seed,
            output=args.output, output_format=args.format,
            ci_level=args.ci_level, log_mse_mean_of_log=args.mean_of_log)
    rows = run_experiment(config)
    if config.output:
        path = emit(rows, EmitFormat(config.output_format), config.output)
        print(f"wrote {len(rows)} rows to {path}")
    else:
        print(json.dumps([r.to_dict() for r in rows], indent=2))
    return 0


def _cmd_report(args) -> int:
    rows = load_rows(args.input)
    if not rows:
        print("(no rows)")
        return 0
    cols = ("estimator", "effect", "n", "t", "scenario", "n_seeds",
            "mean", "bias", "mse", "empirical_se", "ci_coverage")
    table = [cols]
    for r in rows:
        d = r.to_dict()
        table.append(tuple(
            f"{d[c]:.4g}" if isinstance(d[c], float) else
            ("" if d[c] is None else str(d[c])) for c in cols))
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    for row in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynmed",
        description="Dynamic mediation effect estimation in MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="roll out behavior trajectories")
    _add_env_args(p)
    p.add_argument("--n", type=int, default=100, help="number of trajectories")
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("oracle", help="ground-truth effects")
    _add_env_args(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--exact", action="store_true",
                       help="exact linear-algebra oracle (finite spaces)")
    group.add_argument("--mc", action="store_true",
                       help="long-horizon Monte Carlo oracle")
    p.add_argument("--n-traj", type=int, default=2000)
    p.add_argument("--horizon", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("estimate", help="one dataset, one estimator")
    _add_env_args(p)
    p.add_argument("--estimator", required=True, choices=ESTIMATOR_IDS)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nuisance", default="fitted",
                   help="fitted | oracle | corrupt:<scenario>")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("experiment", help="seed-aggregated metric sweep")
    p.add_argument("--config", help="JSON config path (overrides flags)")
    p.add_argument("--env", choices=ENV_IDS)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--grid", default="200:50",
                   help="comma-separated N:T cells, e.g. 50:25,200:25")
    p.add_argument("--estimators", default="dm,mis1,mis2,mr")
    p.add_argument("--nuisance", default="oracle")
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--output", help="metrics file path")
    p.add_argument("--format", default="csv", choices=("csv", "json"))
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--mean-of-log", action="store_true",
                   help="report logMSE as the mean of log squared errors")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("report", help="pretty-print a metrics file")
    p.add_argument("--input", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
