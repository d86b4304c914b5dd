"""Run many independent trials of one plan, serially or on a process pool.

Every trial draws from its own stream GaussianSource(seed, trial), so results
do not depend on the number of workers. Reports come back ordered by trial index.
"""

import concurrent.futures
import multiprocessing
import os
import time

from closed_loop import plan_loop, simulate_plan
from errors import ConfigurationError
from logging_setup import get_logger

logger = get_logger("trial_runner")

_WORKER_PLAN = None


def _init_worker(plan):
    global _WORKER_PLAN
    _WORKER_PLAN = plan


def _run_trial_task(task):
    seed, trial = task
    if _WORKER_PLAN is None:
        raise RuntimeError("Trial worker is not initialized.")
    return simulate_plan(_WORKER_PLAN, seed, trial)


def _start_method():
    methods = multiprocessing.get_all_start_methods()
    if os.name == "posix" and "fork" in methods:
        return "fork"
    return "spawn"


def run_plan_trials(plan, seed, trials, workers=1):
    if int(trials) != trials or trials < 1:
        raise ConfigurationError(f"trials must be a positive integer, got {trials!r}.")
    if int(workers) != workers or workers < 1:
        raise ConfigurationError(f"workers must be a positive integer, got {workers!r}.")

    started = time.perf_counter()
    tasks = [(seed, trial) for trial in range(trials)]
    workers = min(int(workers), len(tasks))

    if workers == 1:
        reports = [simulate_plan(plan, seed, trial) for _, trial in tasks]
    else:
        context = multiprocessing.get_context(_start_method())
        chunksize = max(1, len(tasks) // (4 * workers))
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=workers,
            mp_context=context,
            initializer=_init_worker,
            initargs=(plan,),
        ) as executor:
            reports = list(executor.map(_run_trial_task, tasks, chunksize=chunksize))

    reports.sort(key=lambda report: report.trial)
    aborted = sum(report.aborted for report in reports)
    logger.info(
        "Ran %s trials on %s worker(s) in %.2fs (%s aborted).",
        trials, workers, time.perf_counter() - started, aborted,
    )
    return reports


def run_trials(sys, cfg, seed, trials, workers=1):
    plan = plan_loop(sys, cfg)
    return plan, run_plan_trials(plan, seed, trials, workers)
