"""Command-line entry point: ``freqnet {solve,simulate,verify,report}``.

Exit codes: 0 success, 1 invalid input (unreadable or inconsistent scenario,
infeasible dispatch problem, malformed trace), 2 numerical failure (KKT
residual above tolerance, divergence, failed acceptance criterion).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time

import numpy as np

from freqnet.dispatch import InfeasibleDispatchError, kkt_residual, solve_dispatch_oracle
from freqnet.network import CaseFormatError, NetworkValidationError
from freqnet.scenario import ScenarioConfig, ScenarioError, builtin_scenario, load_scenario

log = logging.getLogger("freqnet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
KKT_TOL = 1e-8
# CSV sample spacing aimed at by ``simulate``
SAMPLE_SPACING = 0.05

_INPUT_ERRORS = (ScenarioError, CaseFormatError, NetworkValidationError, InfeasibleDispatchError,
                 OSError)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _on_off(text: str) -> bool:
    value = text.strip().lower()
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (value > 0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError("must be positive and finite")
    return value


def _add_scenario_args(p: argparse.ArgumentParser, overrides: bool) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("scenario", nargs="?", help="scenario file (INI)")
    src.add_argument("--builtin", choices=["ieee14"], help="use an embedded scenario instead of a file")
    if overrides:
        p.add_argument("--seed", type=int, help="RBC seed (overrides [rbc] seed)")
        p.add_argument("--filter", type=_on_off, metavar="on|off",
                       help="wave filters; 'on' also sets 40 ms delays each way")
        p.add_argument("--rbc", type=_on_off, metavar="on|off",
                       help="randomized block-coordinate updates at h = epsilon")
        p.add_argument("--horizon", type=_positive, metavar="SECONDS", help="simulated time")
        p.add_argument("--step", type=_positive, metavar="SECONDS",
                       help="step of continuous runs (RBC runs step at epsilon)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqnet",
        description="Secondary frequency control with delayed wave-variable links.",
        epilog="Exit codes: 0 success, 1 invalid input, 2 numerical failure. "
               "FREQNET_OUT sets the default output root.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("solve", help="solve the post-disturbance dispatch problem with the oracle")
    _add_scenario_args(p, overrides=False)
    p.add_argument("--base", action="store_true", help="solve for the pre-disturbance demand instead")

    p = sub.add_parser("simulate", help="run the closed loop, write a CSV trace and SVG plots")
    _add_scenario_args(p, overrides=True)
    p.add_argument("--out", metavar="DIR",
                   help="output root (default: $FREQNET_OUT or ./freqnet_out); files go to a per-run subdirectory")
    p.add_argument("--no-plots", action="store_true", help="skip the SVG figures")

    p = sub.add_parser("verify", help="run the acceptance criteria and print one line per criterion")
    _add_scenario_args(p, overrides=False)
    p.add_argument("--quick", action="store_true", help="run only the fast criteria (1, 2, 4, 8, 9)")
    p.add_argument("--only", type=int, nargs="+", metavar="N", help="run only these criteria")

    p = sub.add_parser("report", help="summarize cyber workload and steady state of CSV traces")
    p.add_argument("traces", nargs="+", metavar="TRACE", help="CSV files written by 'simulate'")
    return parser


def _scenario(args) -> ScenarioConfig:
    if args.builtin:
        return builtin_scenario(args.builtin)
    return load_scenario(args.scenario)


def _apply_overrides(scenario: ScenarioConfig, args) -> ScenarioConfig:
    return scenario.with_overrides(filter=args.filter, rbc=args.rbc, seed=args.seed,
                                   horizon=args.horizon, step=args.step)


def _out_root(args) -> str:
    return args.out or os.environ.get("FREQNET_OUT") or "freqnet_out"


def _run_name(scenario: ScenarioConfig) -> str:
    parts = [scenario.name, "rbc" if scenario.rbc_enabled else "continuous"]
    parts.append("filtered" if scenario.channel.filter_enabled else "unfiltered")
    if scenario.rbc_enabled:
        parts.append(f"seed{scenario.rbc.seed}")
    return "_".join(parts)


def cmd_solve(args) -> int:
    from freqnet.report import format_dispatch

    scenario = _scenario(args)
    problem = scenario.problem if args.base else scenario.final_problem()
    t0 = time.perf_counter()
    point = solve_dispatch_oracle(problem)
    elapsed = time.perf_counter() - t0
    which = "pre-disturbance" if args.base else "post-disturbance"
    print(f"scenario {scenario.name}: {which} dispatch ({elapsed * 1e3:.1f} ms)")
    print(format_dispatch(problem, point))
    worst = kkt_residual(problem, point).max()
    if worst >= KKT_TOL:
        print(f"error: KKT residual {worst:.2e} exceeds {KKT_TOL:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_simulate(args) -> int:
    from freqnet.report import format_steady_state, format_workload, workload_from_meta
    from freqnet.sim import run_closed_loop
    from freqnet.traceio import write_trace_csv

    scenario = _apply_overrides(_scenario(args), args)
    out_dir = os.path.join(_out_root(args), _run_name(scenario))
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out_dir}: {exc}") from exc
    log.info("running %s for %g s (h = %g s)", _run_name(scenario), scenario.horizon, scenario.h)
    t0 = time.perf_counter()
    trace = run_closed_loop(scenario)
    elapsed = time.perf_counter() - t0
    sample_dt = scenario.h * scenario.record_every
    stride = max(1, int(round(SAMPLE_SPACING / sample_dt)))
    csv_path = os.path.join(out_dir, "trace.csv")
    table = write_trace_csv(csv_path, trace, scenario, stride=stride)
    print(f"{_run_name(scenario)}: {trace.meta['steps']} steps in {elapsed:.2f} s")
    print(f"trace: {csv_path} ({len(table)} rows)")
    if not args.no_plots:
        from freqnet.plots import plot_trace
        for path in plot_trace(table, out_dir):
            print(f"plot:  {path}")
    print(format_workload([workload_from_meta(trace.meta)]))
    print(format_steady_state(table))
    return EXIT_OK


def cmd_verify(args) -> int:
    from freqnet.acceptance import format_result, run_acceptance

    scenario = _scenario(args)
    only = args.only
    if only is not None:
        bad = sorted(set(only) - set(range(1, 10)))
        if bad:
            raise CliError(f"unknown criterion number(s): {bad}")
    results = run_acceptance(scenario, quick=args.quick, only=only,
                             on_result=lambda r: print(format_result(r), flush=True))
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed"
          + (f"; failed: {', '.join(map(str, failed))}" if failed else ""))
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_report(args) -> int:
    from freqnet.report import format_steady_state, format_workload, workload_from_meta
    from freqnet.traceio import read_trace_csv

    for path in args.traces:
        try:
            table = read_trace_csv(path)
            work = workload_from_meta(table.meta)
            if len(table) == 0:
                raise ValueError("trace has no samples")
        except (OSError, ValueError) as exc:
            raise CliError(f"{path}: {exc}") from exc
        print(f"== {path} ({table.meta.get('scenario', '?')}, {work.mode}, "
              f"horizon {table.meta.get('horizon', '?')} s)")
        rows = [work]
        if work.mode == "rbc":
            # the full update over the same steps is the reference for the relative load
            rows.insert(0, type(work)("full", work.steps, work.n_z, work.n_blocks, float(work.n_blocks),
                                      float(work.n_z), float(work.full_update_total), work.full_update_total))
        print(format_workload(rows))
        if "expected_coords_per_step" in table.meta:
            exp = float(table.meta["expected_coords_per_step"])
            print(f"expected coords/step {exp:.4f}; observed/expected {work.coords_per_step / exp:.4f}")
        print(format_steady_state(table))
    return EXIT_OK


_COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    from freqnet.sim import SimulationDiverged

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except _INPUT_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SimulationDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
