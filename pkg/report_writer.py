"""Artifact emission: per-step JSONL or CSV, CSV tables and the summary JSON.

Every file is written with sorted keys and a fixed line terminator so the same
reports always produce the same bytes. The summary lists a SHA-256 digest for
each artifact written alongside it.
"""

import hashlib
import json
import math
from pathlib import Path
from typing import Annotated, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from errors import OutputError
from logging_setup import get_logger
from scenario import SCHEMA_VERSION, validate_document

logger = get_logger("report_writer")

Digest = Annotated[str, Field(pattern="^[0-9a-f]{64}$")]


class RunSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1]
    command: Literal["check", "decompose", "simulate", "rate", "tailbound", "diagnose"]
    scenario: Optional[str]
    parameters: dict
    results: dict
    artifacts: dict[str, Digest]


STEP_FORMATS = ("jsonl", "csv")
SUMMARY_FILE = "summary.json"


def _jsonable(value):
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, complex):
        return {"re": value.real, "im": value.imag}
    if isinstance(value, pd.DataFrame):
        return _jsonable(value.to_dict(orient="records"))
    return value


def _ensure_dir(out_dir):
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"Cannot create output directory {out_dir}: {exc}", str(out_dir)) from exc
    return out_dir


def _write_text(path, text):
    try:
        with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
    except OSError as exc:
        raise OutputError(f"Cannot write {path}: {exc}", str(path)) from exc
    return Path(path)


def file_sha256(path):
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def step_records(report):
    """One record per sampled step s: the state and bins the encoder saw, its symbols and the feedback bit."""
    for s in range(report.steps):
        yield {
            "trial": report.trial,
            "s": s,
            "x": report.states[s].tolist(),
            "delta": report.deltas[s].tolist(),
            "q": [int(q) for q in report.symbols[s]],
            "b": int(report.feedback[s]),
            "zoomed": bool(report.zoomed[s]),
        }


def step_columns(n, groups):
    return (
        ["step", "trial"]
        + [f"x_{i}" for i in range(1, n + 1)]
        + [f"delta_{i}" for i in range(1, n + 1)]
        + [f"q_{g}" for g in range(1, groups + 1)]
        + ["b", "zoomed"]
    )


def steps_frame(reports):
    reports = list(reports)
    if not reports:
        return pd.DataFrame(columns=step_columns(0, 0))
    n = reports[0].n
    groups = reports[0].symbols.shape[1]
    frames = []
    for report in reports:
        S = report.steps
        data = {"step": np.arange(S), "trial": np.full(S, report.trial)}
        for i in range(n):
            data[f"x_{i + 1}"] = report.states[:S, i]
        for i in range(n):
            data[f"delta_{i + 1}"] = report.deltas[:S, i]
        for g in range(groups):
            data[f"q_{g + 1}"] = report.symbols[:, g]
        data["b"] = report.feedback.astype(int)
        data["zoomed"] = report.zoomed.astype(int)
        frames.append(pd.DataFrame(data, columns=step_columns(n, groups)))
    return pd.concat(frames, ignore_index=True)


def write_steps(reports, out_dir, fmt="jsonl"):
    if fmt not in STEP_FORMATS:
        raise OutputError(f"Unknown step format {fmt!r}; expected one of {STEP_FORMATS}.")
    out_dir = _ensure_dir(out_dir)
    path = out_dir / f"steps.{fmt}"
    if fmt == "jsonl":
        lines = [
            json.dumps(record, sort_keys=True)
            for report in reports
            for record in step_records(report)
        ]
        _write_text(path, "".join(line + "\n" for line in lines))
    else:
        write_frame(steps_frame(reports), path)
    logger.info("Wrote %s", path)
    return path


def write_frame(frame, path):
    _ensure_dir(Path(path).parent)
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as exc:
        raise OutputError(f"Cannot write {path}: {exc}", str(path)) from exc
    return Path(path)


def build_summary(command, scenario, parameters, results, artifacts=None):
    summary = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "scenario": None if scenario is None else str(scenario),
        "parameters": _jsonable(parameters or {}),
        "results": _jsonable(results or {}),
        "artifacts": {
            name: file_sha256(path) for name, path in sorted((artifacts or {}).items())
        },
    }
    validate_document(summary, RunSummary)
    return summary


def dumps_summary(summary):
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"


def write_summary(summary, out_dir):
    out_dir = _ensure_dir(out_dir)
    path = _write_text(out_dir / SUMMARY_FILE, dumps_summary(summary))
    logger.info("Wrote %s", path)
    return path


def emit(reports, fmt, out_dir, command="simulate", scenario=None, parameters=None, results=None):
    """Write the per-step file for the reports and a summary that names it."""
    path = write_steps(reports, out_dir, fmt)
    summary = build_summary(command, scenario, parameters, results, {path.name: path})
    write_summary(summary, out_dir)
    return summary
