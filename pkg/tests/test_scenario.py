import copy
import json
from pathlib import Path

import numpy as np
import pytest

from errors import InputError, ScenarioValidationError
from report_writer import RunSummary
from scenario import (
    DiagnosticsSpec,
    LoopSpec,
    RateSpec,
    RunSpec,
    ScenarioDocument,
    SensorSpec,
    SystemSpec,
    ZoomSpec,
    load_scenario,
    parse_scenario,
    scenario_document,
    validate_document,
)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
SCHEMA_DIR = SCENARIO_DIR.parent / "schemas"


def test_defaults_fill_missing_sections(scalar_scenario_document):
    scenario = parse_scenario(scalar_scenario_document)
    assert scenario.name == "scalar_test"
    assert scenario.loop.horizon == 20
    assert scenario.loop.mode == "single_sensor"
    assert (scenario.trials, scenario.seed, scenario.workers) == (3, 7, 1)
    assert scenario.zoom.rho == pytest.approx(1.5)
    assert scenario.T_values == (1, 2, 5, 10, 20, 50)
    assert scenario.diagnostics == {"min_trials": 100, "tail_start": 3, "bounded_ratio": 1.5}


def test_missing_sensor_noise_defaults_to_identity(scalar_scenario_document):
    document = copy.deepcopy(scalar_scenario_document)
    del document["system"]["sensors"][0]["Sigma_v"]
    scenario = parse_scenario(document)
    assert scenario.system.Sigma_v[0] == pytest.approx(np.eye(1))


def test_missing_input_matrix_names_the_path(scalar_scenario_document):
    document = copy.deepcopy(scalar_scenario_document)
    del document["system"]["B"]
    with pytest.raises(ScenarioValidationError) as info:
        parse_scenario(document)
    assert info.value.path == "/system/B"
    assert "Field required" in info.value.message
    assert info.value.exit_code == 2


def test_schema_rejects_unknown_keys_and_bad_values(scalar_scenario_document):
    document = copy.deepcopy(scalar_scenario_document)
    document["loop"]["speed"] = 3
    with pytest.raises(ScenarioValidationError) as info:
        validate_document(document)
    assert info.value.path == "/loop/speed"

    document = copy.deepcopy(scalar_scenario_document)
    document["loop"]["K_per_component"] = [5]
    with pytest.raises(ScenarioValidationError) as info:
        validate_document(document)
    assert info.value.path == "/loop/K_per_component/0"


@pytest.mark.parametrize(
    "section, key, value, path",
    [
        ("zoom", "L", [1.0, 1.0], "/zoom/L"),
        ("zoom", "eta", 0.75, "/zoom"),
        ("loop", "sensor_order", [2], "/loop/sensor_order"),
        ("system", "jordan_transform", [[1.0, 0.0], [0.0, 1.0]], "/system/jordan_transform"),
        ("system", "A", [[2.0, 0.0]], "/system"),
    ],
)
def test_cross_field_errors(scalar_scenario_document, section, key, value, path):
    document = copy.deepcopy(scalar_scenario_document)
    document.setdefault(section, {})[key] = value
    with pytest.raises(ScenarioValidationError) as info:
        parse_scenario(document)
    assert info.value.path == path


def test_overrides_update_document(scalar_scenario_document):
    scenario = parse_scenario(scalar_scenario_document)
    changed = scenario.with_overrides(seed=9, horizon=5, trials=2)
    assert (changed.seed, changed.trials, changed.loop.horizon) == (9, 2, 5)
    assert changed.document["loop"]["horizon"] == 5
    assert changed.document["run"]["seed"] == 9
    assert scenario.loop.horizon == 20
    assert scenario.document["run"]["seed"] == 7
    with pytest.raises(InputError):
        scenario.with_overrides(seed=-1)
    with pytest.raises(InputError):
        scenario.with_overrides(trials=0)


def test_resolved_parameters_include_zoom(scalar_scenario_document):
    parameters = parse_scenario(scalar_scenario_document).resolved_parameters()
    assert parameters["zoom"]["epsilon"] == pytest.approx(0.5)
    assert "zoom" not in parameters["loop"]
    assert parameters["loop"]["horizon"] == 20


def test_load_scenario_file_errors(tmp_path):
    with pytest.raises(InputError):
        load_scenario(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ScenarioValidationError) as info:
        load_scenario(broken)
    assert info.value.path == "/"


def test_scenario_document_loads_back(two_sensor_system, write_scenario):
    document = scenario_document(two_sensor_system, name="pair", loop={"mode": "multi_sensor"})
    scenario = load_scenario(write_scenario(document))
    assert scenario.name == "pair"
    assert scenario.system.A == pytest.approx(two_sensor_system.A)
    assert scenario.system.num_sensors == 2
    assert scenario.loop.mode == "multi_sensor"


@pytest.mark.parametrize("path", sorted(SCENARIO_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_bundled_scenarios_load(path):
    scenario = load_scenario(path)
    assert scenario.name == path.stem


def _fields(model):
    names = set(model.model_fields)
    required = {name for name, field in model.model_fields.items() if field.is_required()}
    return names, required


def _published(section):
    return set(section["properties"]), set(section.get("required", []))


def test_published_schemas_match_models():
    published = json.loads((SCHEMA_DIR / "scenario.schema.json").read_text(encoding="utf-8"))
    assert _published(published) == _fields(ScenarioDocument)
    assert _published(published["$defs"]["sensor"]) == _fields(SensorSpec)
    sections = {
        "system": SystemSpec,
        "zoom": ZoomSpec,
        "loop": LoopSpec,
        "run": RunSpec,
        "rate": RateSpec,
        "diagnostics": DiagnosticsSpec,
    }
    for name, model in sections.items():
        assert _published(published["properties"][name]) == _fields(model), name

    loop_F = published["properties"]["loop"]["properties"]["F"]
    assert loop_F["description"] == LoopSpec.model_fields["F"].description
    assert "2.5" in loop_F["description"]

    summary = json.loads((SCHEMA_DIR / "summary.schema.json").read_text(encoding="utf-8"))
    assert _published(summary) == _fields(RunSummary)
