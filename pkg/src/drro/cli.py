"""Command line front end.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 invariant (cross-check) failure.
"""

from __future__ import annotations

import argparse
import sys

from .elimination import ProjectionInfeasible
from .harness import (ConfigError, InvariantViolation, load_config,
                      load_controller, run_compare, run_eval, run_synth,
                      run_wce, write_report)
from .worstcase import SolverFailure


def _add_common(p):
    p.add_argument("--config", required=True, help="path to a JSON experiment config")
    p.add_argument("--out", help="write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drro",
        description="Distributionally robust regret-optimal controller synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesise a controller")
    _add_common(p)
    p.add_argument("--method", choices=["full", "reduced", "eliminated", "distributed"],
                   help="override the config's method")
    p.add_argument("--rho", type=float, help="consensus penalty (distributed)")
    p.add_argument("--consensus-tol", type=float,
                   help="consensus residual tolerance (distributed)")
    p.add_argument("--max-iter", type=int,
                   help="consensus iteration cap (distributed)")

    p = sub.add_parser("eval", help="evaluate a stored controller under the nominal")
    _add_common(p)
    p.add_argument("--controller", required=True, help="report or {K, g} JSON file")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("wce", help="worst-case expectation of the config's quadratic")
    _add_common(p)

    p = sub.add_parser("compare", help="run all methods and tabulate")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.command == "synth":
            for key, value in (("rho", args.rho),
                               ("consensus_tol", args.consensus_tol),
                               ("max_iter", args.max_iter)):
                if value is not None:
                    config.distributed_opts[key] = value
            report = run_synth(config, method=args.method)
            print(f"method={report['method']} value={report['value']:.6f} "
                  f"gamma={report['gamma']:.6f}")
        elif args.command == "eval":
            ctrl = load_controller(args.controller)
            seed = config.seed if args.seed is None else args.seed
            report = run_eval(config, ctrl, args.samples, seed)
            ev = report["evaluation"]
            print(f"nominal expected regret: closed form {ev['closed_form']:.6f}, "
                  f"monte carlo {ev['monte_carlo_mean']:.6f} "
                  f"(stderr {ev['monte_carlo_stderr']:.3g})")
        elif args.command == "wce":
            report = run_wce(config)
            print(f"worst-case expectation: {report['value']:.6f}")
        else:
            report = run_compare(config, repeats=args.repeats)
            for method, row in report["rows"].items():
                if row["status"] == "ok":
                    print(f"{method:12s} value={row['value']:.6f} "
                          f"total={row['total_time']:.3f}s")
                else:
                    print(f"{method:12s} FAILED: {row['error']}")
        if args.out:
            write_report(report, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except (InvariantViolation, ProjectionInfeasible) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
