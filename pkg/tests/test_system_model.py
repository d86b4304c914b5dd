import numpy as np
import pytest

from errors import InputError, StructuralError, UnsupportedSystemError
from system_model import (
    GaussianSource,
    LinearSystem,
    check_assumptions,
    controllability_matrix,
    draw_gaussian,
    gaussian_factor,
    numerical_rank,
    observability_matrix,
    observe,
    require_assumptions,
    step,
)


def test_step_cancels_exactly(scalar_system):
    assert step(scalar_system, [1.0], [-2.0], [0.0]) == pytest.approx([0.0])


def test_step_jordan_with_identity_input():
    system = LinearSystem.from_lists(A=[[2.0, 1.0], [0.0, 2.0]], B=np.eye(2), sensors=[np.eye(2)])
    assert step(system, [1.0, 1.0], [0.0, 0.0], [0.5, -0.5]) == pytest.approx([3.5, 1.5])


def test_step_identity_dynamics_keeps_state():
    system = LinearSystem.from_lists(A=np.eye(3), B=np.eye(3), sensors=[np.eye(3)])
    x = np.array([0.3, -1.2, 7.0])
    assert step(system, x, np.zeros(3), np.zeros(3)) == pytest.approx(x)


def test_step_rejects_wrong_dimensions(scalar_system):
    with pytest.raises(InputError):
        step(scalar_system, [1.0, 2.0], [0.0], [0.0])


def test_observe_projects_and_adds_noise(two_sensor_system):
    assert observe(two_sensor_system, 2, [3.0, 7.0], [0.0]) == pytest.approx([3.0])
    assert observe(two_sensor_system, 1, [3.0, 7.0], [0.25]) == pytest.approx([7.25])


def test_observe_identity_sensor():
    system = LinearSystem.from_lists(A=np.eye(2), B=np.eye(2), sensors=[np.eye(2)])
    assert observe(system, 1, [4.0, -2.0], [0.0, 0.0]) == pytest.approx([4.0, -2.0])


def test_observe_rejects_unknown_sensor(scalar_system):
    with pytest.raises(InputError):
        observe(scalar_system, 2, [1.0], [0.0])


def test_observability_matrix_values():
    O = observability_matrix(np.array([[1.0, 0.0]]), np.array([[2.0, 1.0], [0.0, 2.0]]))
    assert O == pytest.approx(np.array([[1.0, 0.0], [2.0, 1.0]]))

    assert observability_matrix(np.array([[1.0]]), np.array([[5.0]])) == pytest.approx(np.array([[1.0]]))

    O = observability_matrix(np.array([[0.0, 1.0]]), np.array([[2.0, 1.0], [0.0, 3.0]]))
    assert O == pytest.approx(np.array([[0.0, 1.0], [0.0, 3.0]]))
    assert numerical_rank(O) == 1


def test_controllability_matrix_stacks_powers():
    A = np.array([[2.0, 0.0], [0.0, 3.0]])
    B = np.array([[1.0], [1.0]])
    assert controllability_matrix(A, B) == pytest.approx(np.array([[1.0, 2.0], [1.0, 3.0]]))


def test_check_assumptions_two_sensors():
    system = LinearSystem.from_lists(
        A=[[2.0, 0.0], [0.0, 3.0]], B=np.eye(2), sensors=[[[0.0, 1.0]], [[1.0, 0.0]]]
    )
    report = check_assumptions(system)
    assert report.controllable
    assert report.jointly_observable
    assert report.per_sensor_observable == (False, False)
    assert report.all_modes_unstable
    assert report.min_rate == pytest.approx(1.0 + np.log2(3.0))


def test_check_assumptions_zero_input_is_uncontrollable():
    system = LinearSystem.from_lists(A=[[2.0]], B=[[0.0]], sensors=[[[1.0]]])
    assert not check_assumptions(system).controllable


def test_check_assumptions_stable_mode_has_no_unstable_eigenvalues():
    system = LinearSystem.from_lists(A=[[0.5]], B=[[1.0]], sensors=[[[1.0]]])
    report = check_assumptions(system)
    assert report.unstable_eigenvalues == ()
    assert report.to_dict()["unstable_eigenvalues"] == []


def test_require_assumptions_errors():
    uncontrollable = LinearSystem.from_lists(A=[[2.0]], B=[[0.0]], sensors=[[[1.0]]])
    with pytest.raises(StructuralError):
        require_assumptions(uncontrollable)

    unobservable = LinearSystem.from_lists(A=[[2.0, 0.0], [0.0, 3.0]], B=[[1.0], [1.0]], sensors=[[[1.0, 0.0]]])
    with pytest.raises(StructuralError):
        require_assumptions(unobservable)

    mixed = LinearSystem.from_lists(A=[[2.0, 0.0], [0.0, 0.5]], B=[[1.0], [1.0]], sensors=[[[1.0, 1.0]]])
    with pytest.raises(UnsupportedSystemError):
        require_assumptions(mixed)
    assert require_assumptions(mixed, require_unstable=False).mixed_spectrum


def test_linear_system_validates_covariances():
    with pytest.raises(InputError):
        LinearSystem.from_lists(A=[[2.0]], B=[[1.0]], sensors=[[[1.0]]], Sigma_w=[[-1.0]])
    with pytest.raises(InputError):
        LinearSystem.from_lists(A=[[2.0, 0.0]], B=[[1.0]], sensors=[[[1.0]]])
    with pytest.raises(InputError):
        LinearSystem.from_lists(A=[[np.nan]], B=[[1.0]], sensors=[[[1.0]]])


def test_linear_system_arrays_are_read_only(scalar_system):
    with pytest.raises(ValueError):
        scalar_system.A[0, 0] = 5.0


def test_with_sensors_keeps_order(two_sensor_system):
    subsystem = two_sensor_system.with_sensors([2])
    assert subsystem.num_sensors == 1
    assert subsystem.sensor(1) == pytest.approx(np.array([[1.0, 0.0]]))


def test_gaussian_factor_handles_singular_covariance():
    covariance = np.array([[1.0, 1.0], [1.0, 1.0]])
    factor = gaussian_factor(covariance)
    assert factor @ factor.T == pytest.approx(covariance)


def test_gaussian_source_streams_are_reproducible_and_distinct():
    first = GaussianSource(7, 0).generator().standard_normal(5)
    again = GaussianSource(7, 0).generator().standard_normal(5)
    other = GaussianSource(7, 1).generator().standard_normal(5)
    assert np.array_equal(first, again)
    assert not np.array_equal(first, other)


def test_gaussian_source_rejects_bad_seeds():
    with pytest.raises(InputError):
        GaussianSource(-1)
    with pytest.raises(InputError):
        GaussianSource(2**64)


def test_draw_gaussian_matches_covariance(rng):
    covariance = np.array([[2.0, 0.5], [0.5, 1.0]])
    samples = draw_gaussian(rng, covariance, 200_000, mean=[1.0, -1.0])
    assert samples.mean(axis=0) == pytest.approx([1.0, -1.0], abs=0.02)
    assert np.cov(samples.T) == pytest.approx(covariance, abs=0.03)
