import argparse
import json
import sys
import time
import uuid
from dataclasses import replace
from pathlib import Path

import numpy as np

from analysis import (
    empirical_tail_probability,
    gaussian_tail_bound,
    rate_report,
    stability_diagnostics,
)
from closed_loop import one_step_noise_covariance, plan_loop, symbol_audit
from decomposition import (
    build_block_decomposition,
    check_decreasing_order,
    check_eigenspace_assumption,
    sufficient_rate,
)
from errors import InputError, NumericError, OutputError, ZoomControlError
from logging_setup import get_logger, setup_logging
from report_writer import (
    build_summary,
    dumps_summary,
    write_frame,
    write_steps,
    write_summary,
)
from scenario import load_scenario, validate_document
from system_generator import generate_scenario
from system_model import GaussianSource, check_assumptions
from trial_runner import run_plan_trials

logger = get_logger("cli")

DEFAULT_OUT = "results"
DEFAULT_TAIL_SAMPLES = 100_000


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors become InputError so they reach stderr as a JSON payload like every other failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message, "argv")


def _add_scenario_args(parser, default_out=None):
    parser.add_argument("--scenario", required=True, help="Path to a scenario JSON file.")
    parser.add_argument(
        "--out",
        default=default_out,
        help="Directory for artifacts." + (f" Default: {default_out}." if default_out else ""),
    )


def _add_run_args(parser):
    parser.add_argument("--seed", type=int, help="Unsigned 64-bit master seed (overrides the scenario).")
    parser.add_argument("--trials", type=int, help="Number of independent trials.")
    parser.add_argument("--horizon", type=int, help="Sampled steps per trial.")
    parser.add_argument("--workers", type=int, help="Worker processes for the trial pool.")


def build_parser():
    parser = ArgumentParser(
        prog="run_zoom_control",
        description="Zoom-quantizer networked control: checks, simulation and diagnostics.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    check = subparsers.add_parser("check", help="Report controllability, observability and spectrum.")
    _add_scenario_args(check)

    decompose = subparsers.add_parser("decompose", help="Block decomposition for a sensor order.")
    _add_scenario_args(decompose)

    simulate = subparsers.add_parser("simulate", help="Run closed-loop trials and write per-step records.")
    _add_scenario_args(simulate, DEFAULT_OUT)
    _add_run_args(simulate)
    simulate.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")

    rate = subparsers.add_parser("rate", help="Minimum and average data rates as a function of T.")
    _add_scenario_args(rate, DEFAULT_OUT)

    tailbound = subparsers.add_parser("tailbound", help="Gaussian tail bound against a Monte Carlo estimate.")
    _add_scenario_args(tailbound)
    tailbound.add_argument("--delta", type=float, nargs="+", help="Thresholds Delta^i (default K L / 2).")
    tailbound.add_argument("--samples", type=int, default=DEFAULT_TAIL_SAMPLES)
    tailbound.add_argument("--seed", type=int)

    diagnose = subparsers.add_parser("diagnose", help="Moment, tail, drift and stationarity diagnostics.")
    _add_scenario_args(diagnose, DEFAULT_OUT)
    _add_run_args(diagnose)

    generate = subparsers.add_parser("generate", help="Write a random jointly observable scenario.")
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--n", type=int, default=2, help="State dimension.")
    generate.add_argument("--sensors", type=int, default=1)
    generate.add_argument("--horizon", type=int)
    generate.add_argument("--out", help="Scenario file to write (stdout when omitted).")
    return parser


def _load(args):
    scenario = load_scenario(args.scenario)
    overrides = {key: getattr(args, key, None) for key in ("seed", "trials", "horizon", "workers")}
    return scenario.with_overrides(**overrides)


def _finish(command, args, scenario, results, artifacts=None, echo=False):
    summary = build_summary(command, args.scenario, scenario.resolved_parameters(), results, artifacts)
    if args.out:
        write_summary(summary, args.out)
    if echo:
        sys.stdout.write(dumps_summary(summary))
    return summary


def cmd_check(args):
    scenario = _load(args)
    system = scenario.system
    results = check_assumptions(system).to_dict()
    results["num_sensors"] = system.num_sensors
    results["eigenspace_assignment"] = check_eigenspace_assumption(system, scenario.loop.transform).to_dict()
    _finish("check", args, scenario, results, echo=True)
    return 0


def cmd_decompose(args):
    scenario = _load(args)
    system = scenario.system
    decomp = build_block_decomposition(system, scenario.loop.sensor_order)
    results = decomp.to_dict()
    results["decreasing_order"] = check_decreasing_order(decomp)
    results["sufficient_rate"] = sufficient_rate(decomp)
    results["sufficient_rate_uncoupled"] = sufficient_rate(decomp, account_coupling=False)
    results["min_rate"] = check_assumptions(system).min_rate
    _finish("decompose", args, scenario, results, echo=True)
    return 0


def _run(scenario):
    plan = plan_loop(scenario.system, scenario.loop)
    reports = run_plan_trials(plan, scenario.seed, scenario.trials, scenario.workers)
    return plan, reports


def cmd_simulate(args):
    scenario = _load(args)
    plan, reports = _run(scenario)
    path = write_steps(reports, args.out, args.format)
    aborted = [report.trial for report in reports if report.aborted]
    results = {
        "plan": plan.to_dict(),
        "trials": [report.summary() for report in reports],
        "aborted_trials": aborted,
        "symbol_audit": symbol_audit(reports[0]),
    }
    _finish("simulate", args, scenario, results, {path.name: path})
    if aborted:
        logger.error("%s of %s trials aborted on non-finite values.", len(aborted), len(reports))
        return 4
    return 0


def cmd_rate(args):
    scenario = _load(args)
    system = scenario.system
    multi = scenario.loop.mode == "multi_sensor"
    decomp = None
    if multi and system.num_sensors > 1:
        decomp = build_block_decomposition(system, scenario.loop.sensor_order)
    report = rate_report(
        system.eigenvalues,
        system.n,
        scenario.zoom.epsilon,
        M=system.num_sensors if multi else 0,
        T_values=scenario.T_values,
        decomp=decomp,
    )
    path = write_frame(report.to_frame(), Path(args.out) / "rates.csv")
    _finish("rate", args, scenario, report.to_dict(), {path.name: path})
    return 0


def cmd_tailbound(args):
    scenario = _load(args)
    plan = plan_loop(scenario.system, replace(scenario.loop, horizon=0))
    Sigma = one_step_noise_covariance(plan.samp)
    if args.delta is not None:
        Delta = np.asarray(args.delta, dtype=float)
    else:
        Delta = plan.K * plan.L / 2.0
    if Delta.shape != (plan.n,):
        raise InputError(f"--delta needs {plan.n} values, got {Delta.shape[0]}.", "--delta")
    if args.samples < 1:
        raise InputError("--samples must be positive.", "--samples")

    bound = gaussian_tail_bound(Sigma, Delta)
    rng = GaussianSource(scenario.seed, 0).generator()
    p_hat, se = empirical_tail_probability(Sigma, Delta, args.samples, rng)
    results = {
        "Sigma": Sigma,
        "Delta": Delta,
        "bound": bound,
        "empirical": p_hat,
        "standard_error": se,
        "samples": args.samples,
        "dominates": bool(bound >= p_hat),
    }
    _finish("tailbound", args, scenario, results, echo=True)
    return 0


def cmd_diagnose(args):
    scenario = _load(args)
    plan, reports = _run(scenario)
    settings = scenario.diagnostics
    diagnostics, moment_series, tail_table = stability_diagnostics(
        reports,
        plan.F,
        min_trials=settings["min_trials"],
        tail_start=settings["tail_start"],
        bounded_ratio=settings["bounded_ratio"],
    )
    out = Path(args.out)
    moments_path = write_frame(moment_series, out / "moments.csv")
    tail_path = write_frame(tail_table, out / "tail.csv")
    results = diagnostics.to_dict()
    results["plan"] = plan.to_dict()
    results["aborted_trials"] = [report.trial for report in reports if report.aborted]
    _finish(
        "diagnose", args, scenario, results,
        {moments_path.name: moments_path, tail_path.name: tail_path},
    )
    return 0


def cmd_generate(args):
    document = generate_scenario(args.seed, args.n, args.sensors, horizon=args.horizon)
    validate_document(document)
    text = json.dumps(document, sort_keys=True, indent=2) + "\n"
    if args.out:
        path = Path(args.out)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OutputError(f"Cannot write {path}: {exc}", str(path)) from exc
        logger.info("Wrote scenario %s", path)
    else:
        sys.stdout.write(text)
    return 0


HANDLERS = {
    "check": cmd_check,
    "decompose": cmd_decompose,
    "simulate": cmd_simulate,
    "rate": cmd_rate,
    "tailbound": cmd_tailbound,
    "diagnose": cmd_diagnose,
    "generate": cmd_generate,
}


def _write_error(error):
    sys.stderr.write(json.dumps(error.to_payload(), sort_keys=True) + "\n")
    return error.exit_code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except InputError as exc:
        return _write_error(exc)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging()
    run_id = uuid.uuid4()
    start_time = time.time()
    logger.info("Run %s started: %s", run_id, args.command)

    try:
        exit_code = HANDLERS[args.command](args)
    except ZoomControlError as exc:
        logger.error("Run %s failed: %s", run_id, exc.message)
        return _write_error(exc)
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        logger.exception("Run %s failed in a numeric routine.", run_id)
        return _write_error(NumericError(f"{type(exc).__name__}: {exc}"))

    duration = time.time() - start_time
    logger.info("Run %s finished in %.2f seconds (exit %s).", run_id, duration, exit_code)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
