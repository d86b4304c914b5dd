import json

import numpy as np
import pytest

from system_model import LinearSystem


@pytest.fixture
def scalar_system():
    return LinearSystem.from_lists(A=[[2.0]], B=[[1.0]], sensors=[[[1.0]]])


@pytest.fixture
def jordan_system():
    return LinearSystem.from_lists(
        A=[[2.0, 1.0], [0.0, 2.0]], B=[[0.0], [1.0]], sensors=[[[1.0, 0.0]]]
    )


@pytest.fixture
def complex_system():
    return LinearSystem.from_lists(
        A=[[1.0, -1.0], [1.0, 1.0]], B=[[1.0], [0.0]], sensors=[[[1.0, 0.0]]]
    )


@pytest.fixture
def two_sensor_system():
    return LinearSystem.from_lists(
        A=[[2.0, 0.0], [0.0, 3.0]],
        B=[[1.0], [1.0]],
        sensors=[[[0.0, 1.0]], [[1.0, 0.0]]],
    )


@pytest.fixture
def noiseless():
    """Zero-noise copy of a system, optionally with a small initial spread around mu_x0."""

    def _noiseless(system, mu_x0=None, x0_variance=0.0):
        n = system.n
        return LinearSystem(
            A=system.A,
            B=system.B,
            sensors=system.sensors,
            Sigma_w=np.zeros((n, n)),
            Sigma_v=tuple(np.zeros((C.shape[0], C.shape[0])) for C in system.sensors),
            Sigma_x0=x0_variance * np.eye(n),
            mu_x0=np.zeros(n) if mu_x0 is None else mu_x0,
        )

    return _noiseless


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("LOG_FILE", "")
    return tmp_path


@pytest.fixture
def scalar_scenario_document():
    return {
        "schema_version": 1,
        "name": "scalar_test",
        "system": {
            "A": [[2.0]],
            "B": [[1.0]],
            "sensors": [{"C": [[1.0]], "Sigma_v": [[1.0]]}],
            "Sigma_w": [[1.0]],
            "Sigma_x0": [[1.0]],
            "mu_x0": [0.0],
        },
        "loop": {"horizon": 20},
        "run": {"trials": 3, "seed": 7},
    }


@pytest.fixture
def write_scenario(tmp_path):
    def _write(document, name="scenario.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return path

    return _write
