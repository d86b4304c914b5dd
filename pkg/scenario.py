"""Scenario files: pydantic models for the JSON document, defaults, and resolution to library objects.

The published JSON schemas in schemas/ describe the same documents the
models below accept.
"""

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Annotated, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from closed_loop import LoopConfig
from errors import ConfigurationError, InputError, ScenarioValidationError
from logging_setup import get_logger
from quantizer import ZoomParams
from system_model import LinearSystem

logger = get_logger("scenario")

SCHEMA_VERSION = 1
MAX_SEED = 2**64 - 1

Matrix = Annotated[list[Annotated[list[float], Field(min_length=1)]], Field(min_length=1)]
Vector = Annotated[list[float], Field(min_length=1)]
Positive = Annotated[float, Field(gt=0)]
SensorIndex = Annotated[int, Field(ge=1)]
EvenCount = Annotated[int, Field(ge=2, multiple_of=2)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SensorSpec(_Section):
    C: Matrix
    Sigma_v: Optional[Matrix] = None


class SystemSpec(_Section):
    A: Matrix
    B: Matrix
    sensors: Annotated[list[SensorSpec], Field(min_length=1)]
    Sigma_w: Optional[Matrix] = None
    Sigma_x0: Optional[Matrix] = None
    mu_x0: Optional[Vector] = None
    jordan_transform: Optional[Matrix] = None


class ZoomSpec(_Section):
    rho: float = Field(1.5, gt=1)
    epsilon: Positive = 0.5
    eta: Positive = 0.25
    delta: Positive = 0.5
    c: float = Field(1.0, gt=0, le=1)
    L: Optional[Annotated[list[Positive], Field(min_length=1)]] = None


class LoopSpec(_Section):
    horizon: int = Field(1000, ge=0)
    mode: Literal["single_sensor", "multi_sensor"] = "single_sensor"
    feedback_period: Literal[1] = 1
    F: Optional[Positive] = Field(
        None,
        description="Small-set radius. Default: max(2 L^1, 2.5 times the largest one-step noise standard deviation).",
    )
    K_per_component: Optional[Annotated[list[EvenCount], Field(min_length=1)]] = None
    estimator: Literal["subset", "lsq"] = "subset"
    control: Literal["closed", "open"] = "closed"
    lattice_ell: Optional[Positive] = None
    initial_zoom_probability: float = Field(0.999, gt=0, lt=1)
    sensor_order: Optional[Annotated[list[SensorIndex], Field(min_length=1)]] = None
    sensor_stack: Optional[Annotated[list[SensorIndex], Field(min_length=1)]] = None


class RunSpec(_Section):
    trials: int = Field(200, ge=1)
    seed: int = Field(0, ge=0, le=MAX_SEED)
    workers: int = Field(1, ge=1)


class RateSpec(_Section):
    T_values: Annotated[list[Annotated[int, Field(ge=1)]], Field(min_length=1)] = [1, 2, 5, 10, 20, 50]


class DiagnosticsSpec(_Section):
    min_trials: int = Field(100, ge=1)
    tail_start: int = Field(3, ge=0)
    bounded_ratio: float = Field(1.5, gt=1)


class ScenarioDocument(_Section):
    """A scenario file. Every section except system has defaults."""

    schema_version: Literal[1]
    name: str = "scenario"
    description: Optional[str] = None
    system: SystemSpec
    zoom: ZoomSpec = Field(default_factory=ZoomSpec)
    loop: LoopSpec = Field(default_factory=LoopSpec)
    run: RunSpec = Field(default_factory=RunSpec)
    rate: RateSpec = Field(default_factory=RateSpec)
    diagnostics: DiagnosticsSpec = Field(default_factory=DiagnosticsSpec)


def _json_pointer(parts):
    return "/" + "/".join(str(part) for part in parts)


def validation_error(exc):
    """The first pydantic error, ordered by location, as a ScenarioValidationError."""
    first = min(exc.errors(), key=lambda error: ([str(part) for part in error["loc"]], error["msg"]))
    pointer = _json_pointer(first["loc"])
    return ScenarioValidationError(f"{first['msg']} at {pointer}", pointer)


def validate_document(document, model=ScenarioDocument):
    try:
        return model.model_validate(document)
    except ValidationError as exc:
        raise validation_error(exc) from exc


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    source: str
    document: dict
    system: LinearSystem
    loop: LoopConfig
    trials: int
    seed: int
    workers: int
    T_values: tuple
    diagnostics: dict

    @property
    def zoom(self):
        return self.loop.zoom

    def with_overrides(self, seed=None, trials=None, horizon=None, workers=None):
        """Return a copy with command-line overrides applied to the resolved document too."""
        document = copy.deepcopy(self.document)
        loop = self.loop
        changes = {}
        if seed is not None:
            if not 0 <= int(seed) < 2 ** 64:
                raise InputError(f"seed must lie in [0, 2^64), got {seed}.")
            changes["seed"] = document["run"]["seed"] = int(seed)
        if trials is not None:
            if int(trials) < 1:
                raise InputError(f"trials must be positive, got {trials}.")
            changes["trials"] = document["run"]["trials"] = int(trials)
        if workers is not None:
            if int(workers) < 1:
                raise InputError(f"workers must be positive, got {workers}.")
            changes["workers"] = document["run"]["workers"] = int(workers)
        if horizon is not None:
            loop = replace(loop, horizon=int(horizon))
            document["loop"]["horizon"] = loop.horizon
        return replace(self, document=document, loop=loop, **changes)

    def resolved_parameters(self):
        parameters = copy.deepcopy(self.document)
        parameters["loop"] = self.loop.to_dict()
        parameters["loop"].pop("zoom")
        parameters["zoom"] = self.zoom.to_dict()
        return parameters


def _build_system(system):
    sensors = [entry["C"] for entry in system["sensors"]]
    sigma_v = [
        entry.get("Sigma_v", np.eye(np.atleast_2d(entry["C"]).shape[0]).tolist())
        for entry in system["sensors"]
    ]
    return LinearSystem.from_lists(
        A=system["A"],
        B=system["B"],
        sensors=sensors,
        Sigma_w=system.get("Sigma_w"),
        Sigma_v=sigma_v,
        Sigma_x0=system.get("Sigma_x0"),
        mu_x0=system.get("mu_x0"),
    )


def _optional_tuple(values):
    return None if values is None else tuple(values)


def parse_scenario(document, source="<memory>"):
    """Validate a scenario document and build the system and loop configuration it describes."""
    resolved = validate_document(document).model_dump(exclude_none=True)

    try:
        system = _build_system(resolved["system"])
    except InputError as exc:
        raise ScenarioValidationError(exc.message, "/system") from exc

    transform = resolved["system"].get("jordan_transform")
    zoom_values = resolved["zoom"]
    loop_values = resolved["loop"]
    try:
        zoom = ZoomParams(
            rho=zoom_values["rho"],
            epsilon=zoom_values["epsilon"],
            eta=zoom_values["eta"],
            delta=zoom_values["delta"],
            c=zoom_values["c"],
            L=zoom_values.get("L"),
        )
    except ConfigurationError as exc:
        raise ScenarioValidationError(exc.message, "/zoom") from exc

    try:
        loop = LoopConfig(
            zoom=zoom,
            horizon=loop_values["horizon"],
            mode=loop_values["mode"],
            feedback_period=loop_values["feedback_period"],
            F=loop_values.get("F"),
            K_per_component=_optional_tuple(loop_values.get("K_per_component")),
            estimator=loop_values["estimator"],
            control=loop_values["control"],
            lattice_ell=loop_values.get("lattice_ell"),
            initial_zoom_probability=loop_values["initial_zoom_probability"],
            sensor_order=_optional_tuple(loop_values.get("sensor_order")),
            sensor_stack=_optional_tuple(loop_values.get("sensor_stack")),
            transform=None if transform is None else np.asarray(transform, dtype=float),
        )
    except ConfigurationError as exc:
        raise ScenarioValidationError(exc.message, "/loop") from exc

    if zoom.L is not None and zoom.L.shape[0] != system.n:
        raise ScenarioValidationError(
            f"zoom.L must have one threshold per state component ({system.n}), got {zoom.L.shape[0]}.",
            "/zoom/L",
        )
    if loop.K_per_component is not None and len(loop.K_per_component) != system.n:
        raise ScenarioValidationError(
            f"K_per_component must have {system.n} entries, got {len(loop.K_per_component)}.",
            "/loop/K_per_component",
        )
    for key in ("sensor_order", "sensor_stack"):
        indices = loop_values.get(key)
        if indices is not None and max(indices) > system.num_sensors:
            raise ScenarioValidationError(
                f"{key} refers to sensor {max(indices)} but the system has {system.num_sensors}.",
                f"/loop/{key}",
            )
    if transform is not None and np.asarray(transform).shape != (system.n, system.n):
        raise ScenarioValidationError(
            f"jordan_transform must be {system.n}x{system.n}.", "/system/jordan_transform"
        )

    run = resolved["run"]
    return Scenario(
        name=resolved["name"],
        source=str(source),
        document=resolved,
        system=system,
        loop=loop,
        trials=int(run["trials"]),
        seed=int(run["seed"]),
        workers=int(run["workers"]),
        T_values=tuple(int(T) for T in resolved["rate"]["T_values"]),
        diagnostics=dict(resolved["diagnostics"]),
    )


def load_scenario(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise InputError(f"Scenario file not found: {path}") from exc
    except OSError as exc:
        raise InputError(f"Cannot read scenario file {path}: {exc}") from exc

    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioValidationError(f"Invalid JSON at line {exc.lineno}: {exc.msg}", "/") from exc

    scenario = parse_scenario(document, source=path)
    logger.info(
        "Loaded scenario '%s' from %s (n=%s, sensors=%s, mode=%s).",
        scenario.name, path, scenario.system.n, scenario.system.num_sensors, scenario.loop.mode,
    )
    return scenario


def scenario_document(system, name="generated", description=None, loop=None, run=None):
    """Serialize a LinearSystem into a scenario document that load_scenario accepts."""
    document = {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "system": {
            "A": system.A.tolist(),
            "B": system.B.tolist(),
            "sensors": [
                {"C": C.tolist(), "Sigma_v": S.tolist()}
                for C, S in zip(system.sensors, system.Sigma_v)
            ],
            "Sigma_w": system.Sigma_w.tolist(),
            "Sigma_x0": system.Sigma_x0.tolist(),
            "mu_x0": system.mu_x0.tolist(),
        },
    }
    if description:
        document["description"] = description
    if loop:
        document["loop"] = dict(loop)
    if run:
        document["run"] = dict(run)
    validate_document(document)
    return document
