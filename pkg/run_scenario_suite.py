import argparse
import subprocess
import sys
import time
from pathlib import Path

from logging_setup import get_logger, setup_logging

logger = get_logger("suite")

CLI_SCRIPT = str(Path(__file__).resolve().parent / "run_zoom_control.py")
SCENARIO_DIR = Path(__file__).resolve().parent / "scenarios"
SUITE_OUT = "results/suite"

# (label, subcommand, takes the run overrides)
PIPELINE_STEPS = [
    ("Check assumptions", "check", False),
    ("Decompose", "decompose", False),
    ("Rate table", "rate", False),
    ("Simulate", "simulate", True),
    ("Diagnose", "diagnose", True),
]


def run_command(command, label):
    logger.info("Running %s: %s", label, " ".join(command))
    try:
        result = subprocess.run(command, check=True, capture_output=True, text=True)
        if result.stdout:
            logger.debug("%s stdout:\n%s", label, result.stdout)
        return True
    except subprocess.CalledProcessError as exc:
        logger.error("%s failed with exit code %s.", label, exc.returncode)
        if exc.stderr:
            logger.error("%s stderr:\n%s", label, exc.stderr)
        return False


def scenario_steps(scenario_path, out_root, run_args):
    out_dir = Path(out_root) / scenario_path.stem
    steps = []
    for label, subcommand, takes_run_args in PIPELINE_STEPS:
        command = [
            sys.executable, CLI_SCRIPT, subcommand,
            "--scenario", str(scenario_path),
            "--out", str(out_dir / subcommand),
        ]
        if takes_run_args:
            command += run_args
        steps.append((f"{scenario_path.stem}: {label}", command))
    return steps


def run_suite(scenario_paths, out_root=SUITE_OUT, run_args=()):
    """Run every step for every scenario in order; stop at the first failing step."""
    logger.info("=== STARTING SCENARIO SUITE (%s scenarios) ===", len(scenario_paths))
    start_time = time.time()

    for scenario_path in scenario_paths:
        for step_name, command in scenario_steps(Path(scenario_path), out_root, list(run_args)):
            logger.info("--- %s ---", step_name)
            if not run_command(command, step_name):
                logger.error("=== SUITE FAILED at step: %s ===", step_name)
                return False

    logger.info("=== SCENARIO SUITE FINISHED in %.2f seconds ===", time.time() - start_time)
    return True


def main(argv=None):
    parser = argparse.ArgumentParser(description="Run check, decompose, rate, simulate and diagnose over scenarios.")
    parser.add_argument("scenarios", nargs="*", help="Scenario files (default: every file in scenarios/).")
    parser.add_argument("--out", default=SUITE_OUT)
    parser.add_argument("--trials", type=int)
    parser.add_argument("--horizon", type=int)
    parser.add_argument("--workers", type=int)
    args = parser.parse_args(argv)

    setup_logging()
    paths = [Path(p) for p in args.scenarios] or sorted(SCENARIO_DIR.glob("*.json"))
    if not paths:
        logger.error("No scenario files found in %s.", SCENARIO_DIR)
        return 1

    run_args = []
    for flag in ("trials", "horizon", "workers"):
        value = getattr(args, flag)
        if value is not None:
            run_args += [f"--{flag}", str(value)]
    return 0 if run_suite(paths, args.out, run_args) else 1


if __name__ == "__main__":
    sys.exit(main())
