"""Command-line entry point.

Verbs: run, sweep, admm-trace, alloc-check, validate.
Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import harness, scenario
from .errors import (BalanceViolation, InvalidConfig, PhasebalError,
                     ProtocolOrderViolation, SolverFailure,
                     StateBoundViolation)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INVARIANT = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasebal",
        description="Multi-phase power balancing with energy storage: "
                    "real-time controllers, greedy benchmark, experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_common(p, out_required=True):
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        p.add_argument("--algorithm", choices=harness.ALGORITHMS, default=None)
        p.add_argument("--mode", choices=("ideal", "nonideal"), default=None)

    p_run = sub.add_parser("run", help="simulate one seeded run")
    add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="sweep one numeric parameter")
    add_common(p_sweep)
    p_sweep.add_argument("--param", required=True,
                         choices=harness.SWEEP_PARAMETERS)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated numeric values")
    p_sweep.add_argument("--seeds", default="1,2,3,4,5",
                         help="comma-separated replication seeds")

    p_trace = sub.add_parser("admm-trace",
                             help="per-iteration objective gap of the solver")
    add_common(p_trace)
    p_trace.add_argument("--rhos", default="1,5,20",
                         help="comma-separated penalty values")

    p_alloc = sub.add_parser("alloc-check",
                             help="bound-based storage allocation analysis")
    add_common(p_alloc)
    p_alloc.add_argument("--s-total", type=float, default=None)
    p_alloc.add_argument("--step", type=float, default=0.5)

    p_val = sub.add_parser("validate", help="validate a config and exit")
    add_common(p_val, out_required=False)
    return parser


def _load(args) -> harness.RunConfig:
    run = harness.load_run_config(args.config)
    if args.seed is not None:
        run = replace(run, scenario=scenario.with_seed(run.scenario, args.seed))
    if args.algorithm is not None:
        run = replace(run, algorithm=args.algorithm)
    if args.mode is not None:
        run = replace(run, mode=args.mode)
    return harness.validate_run_config(run)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        run = _load(args)
        if args.verb == "validate":
            print("config OK")
            return EXIT_OK
        if args.verb == "run":
            summary, _ = harness.run_simulation(run, out_dir=args.out)
            print(json.dumps({"mean_cost": summary.mean_cost,
                              "feasible_states": summary.feasible_states,
                              "feasible_balance": summary.feasible_balance},
                             sort_keys=True))
            return EXIT_OK
        if args.verb == "sweep":
            values = [float(v) for v in args.values.split(",") if v]
            seeds = [int(s) for s in args.seeds.split(",") if s]
            rows = harness.run_sweep(run, args.param, values, seeds,
                                     out_dir=args.out)
            print(f"wrote {len(rows)} sweep rows to {args.out}")
            return EXIT_OK
        if args.verb == "admm-trace":
            rhos = [float(v) for v in args.rhos.split(",") if v]
            rows, ref = harness.run_admm_trace(run, rho_values=rhos,
                                               out_dir=args.out)
            print(f"reference objective {ref:.6f}; wrote {len(rows)} trace rows")
            return EXIT_OK
        if args.verb == "alloc-check":
            report = harness.check_equal_allocation(
                run, s_total=args.s_total, grid_step=args.step,
                out_dir=args.out)
            print(json.dumps({"argmin": list(report.argmin),
                              "equal_is_argmin": report.equal_is_argmin},
                             sort_keys=True))
            return EXIT_OK
        raise InvalidConfig(f"unknown verb {args.verb!r}")
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (StateBoundViolation, BalanceViolation, ProtocolOrderViolation) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except PhasebalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
