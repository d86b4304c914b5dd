import numpy as np
import pytest

from decomposition import check_eigenspace_assumption
from errors import InputError, StructuralError, UnsupportedSystemError
from system_generator import random_system
from system_model import LinearSystem
from transforms import (
    build_control_realization,
    build_multi_sensor_sampled_system,
    build_sampled_system,
    coefficient_map,
    estimate_initial_state,
    parse_real_jordan,
    propagate_period,
    realize_control,
    sample_raw_period_noise,
    sampled_jordan_basis,
    select_independent_rows,
    to_real_jordan,
)


def test_scalar_sampled_system(scalar_system):
    samp = build_sampled_system(scalar_system)
    assert samp.period == 2
    assert samp.A_bar == pytest.approx(np.array([[4.0]]))
    assert samp.sampled_abs_eigs == pytest.approx([4.0])
    assert samp.Sigma_w_bar == pytest.approx(np.array([[5.0]]))
    assert samp.coordinate_owner == (0,)


def test_sampled_eigenvalues_are_powers(jordan_system, complex_system):
    assert build_sampled_system(jordan_system).sampled_abs_eigs == pytest.approx([16.0, 16.0])
    assert build_sampled_system(complex_system).sampled_abs_eigs == pytest.approx([4.0, 4.0])
    eigs = np.linalg.eigvals(build_sampled_system(complex_system).A_bar)
    assert np.abs(eigs) == pytest.approx([4.0, 4.0])


def test_jordan_block_stays_in_jordan_form_after_sampling(jordan_system):
    samp = build_sampled_system(jordan_system)
    assert samp.A_bar == pytest.approx(np.array([[16.0, 1.0], [0.0, 16.0]]))
    assert parse_real_jordan(samp.A_bar, tol=1e-9) is not None
    assert samp.P @ samp.P_inv == pytest.approx(np.eye(2))


def test_three_by_three_jordan_block_after_sampling():
    A = [[2.0, 1.0, 0.0], [0.0, 2.0, 1.0], [0.0, 0.0, 2.0]]
    system = LinearSystem.from_lists(A=A, B=[[0.0], [0.0], [1.0]], sensors=[[[1.0, 0.0, 0.0]]])
    samp = build_sampled_system(system)
    expected = np.array([[64.0, 1.0, 0.0], [0.0, 64.0, 1.0], [0.0, 0.0, 64.0]])
    assert samp.A_bar == pytest.approx(expected, abs=1e-6)


def test_sampled_basis_for_complex_jordan_block():
    a, b = 1.0, 0.5
    J = np.array([
        [a, b, 1.0, 0.0],
        [-b, a, 0.0, 1.0],
        [0.0, 0.0, a, b],
        [0.0, 0.0, -b, a],
    ])
    blocks = parse_real_jordan(J)
    power = np.linalg.matrix_power(J, 8)
    T = sampled_jordan_basis(power, blocks)
    rebased = T @ power @ np.linalg.inv(T)
    D8 = np.linalg.matrix_power(J[:2, :2], 8)
    assert rebased[:2, :2] == pytest.approx(D8)
    assert rebased[2:, 2:] == pytest.approx(D8)
    assert rebased[:2, 2:] == pytest.approx(np.eye(2), abs=1e-9)
    assert parse_real_jordan(rebased, tol=1e-9) is not None


def test_sampled_basis_leaves_diagonal_blocks_alone(two_sensor_system):
    blocks = parse_real_jordan(two_sensor_system.A)
    T = sampled_jordan_basis(np.diag([16.0, 81.0]), blocks)
    assert T == pytest.approx(np.eye(2))


def test_noiseless_full_observation_recovers_state():
    system = LinearSystem(
        A=np.array([[2.0, 1.0], [0.0, 3.0]]),
        B=np.eye(2),
        sensors=(np.eye(2),),
        Sigma_w=np.zeros((2, 2)),
        Sigma_v=(np.zeros((2, 2)),),
        Sigma_x0=np.eye(2),
        mu_x0=np.zeros(2),
    )
    samp = build_sampled_system(system)
    x0 = np.array([0.7, -1.3])
    window = np.vstack([x0, system.A @ x0])
    assert estimate_initial_state(samp, window) == pytest.approx(x0)
    assert samp.Sigma_v_bar == pytest.approx(np.zeros((2, 2)))


def test_estimate_from_jordan_window(jordan_system):
    samp = build_sampled_system(jordan_system)
    assert estimate_initial_state(samp, [1.0, 3.0]) == pytest.approx([1.0, 1.0])


def test_estimate_is_linear(jordan_system):
    samp = build_sampled_system(jordan_system, estimator="lsq")
    y = np.array([0.4, -2.0])
    assert estimate_initial_state(samp, 3.5 * y) == pytest.approx(3.5 * estimate_initial_state(samp, y))


def test_estimate_rejects_wrong_window(jordan_system):
    samp = build_sampled_system(jordan_system)
    with pytest.raises(InputError):
        estimate_initial_state(samp, [1.0, 2.0, 3.0])


def test_unobservable_stack_is_structural_error():
    system = LinearSystem.from_lists(A=[[2.0, 0.0], [0.0, 3.0]], B=[[1.0], [1.0]], sensors=[[[1.0, 0.0]]])
    with pytest.raises(StructuralError):
        build_sampled_system(system)


def test_realize_control_scalar(scalar_system):
    samp = build_sampled_system(scalar_system)
    inputs = realize_control(scalar_system, samp, [1.0])
    assert inputs == pytest.approx(np.array([[-4.0]]))
    assert realize_control(scalar_system, samp, [0.0]) == pytest.approx(np.zeros((1, 1)))


def test_realize_control_diagonal_reproduces_target():
    system = LinearSystem.from_lists(A=[[2.0, 0.0], [0.0, 3.0]], B=np.eye(2), sensors=[np.eye(2)])
    realization = build_control_realization(system)
    target = np.array([1.5, -2.0])
    inputs = realization.inputs(target)
    assert inputs.shape == (2, 2)
    aggregate = system.A @ system.B @ inputs[0] + system.B @ inputs[1]
    assert np.linalg.norm(aggregate - target) < 1e-9


def test_one_period_matches_sampled_recursion(jordan_system):
    samp = build_sampled_system(jordan_system)
    n = jordan_system.n
    x0 = np.array([0.3, -0.8])
    x_hat_bar = np.array([0.25, -0.5])
    late_inputs = realize_control(jordan_system, samp, x_hat_bar)
    inputs = np.vstack([np.zeros((n, jordan_system.m)), late_inputs])
    states = propagate_period(jordan_system, x0, inputs, np.zeros((2 * n, n)))
    x_bar = samp.P @ x0
    expected = samp.A_bar @ x_bar - samp.A_bar @ x_hat_bar
    assert samp.P @ states[-1] == pytest.approx(expected)


def test_raw_noise_matches_sampled_covariances(complex_system):
    samp = build_sampled_system(complex_system)
    w_bar, v_bar = sample_raw_period_noise(samp, np.random.default_rng(5), 200_000)
    joint = np.cov(np.hstack([w_bar, v_bar]).T)
    scale = np.max(np.abs(samp.joint_covariance))
    assert np.max(np.abs(joint - samp.joint_covariance)) < 0.03 * scale


def test_joint_noise_factor_reproduces_covariance(two_sensor_system):
    samp = build_sampled_system(two_sensor_system)
    factor = samp.noise_factor
    assert factor @ factor.T == pytest.approx(samp.joint_covariance, abs=1e-8)


def test_to_real_jordan_fixed_point():
    A = np.array([[2.0, 1.0], [0.0, 2.0]])
    P, J, blocks = to_real_jordan(A)
    assert P == pytest.approx(np.eye(2))
    assert J == pytest.approx(A)
    assert [(block.size, block.kind) for block in blocks] == [(2, "real")]


def test_to_real_jordan_rotation_pair():
    A = np.array([[0.0, -2.0], [2.0, 0.0]])
    P, J, blocks = to_real_jordan(A)
    assert P @ A @ np.linalg.inv(P) == pytest.approx(J, abs=1e-9)
    assert len(blocks) == 1 and blocks[0].kind == "complex"
    assert blocks[0].abs_eigenvalue == pytest.approx(2.0)
    assert J[0, 0] == pytest.approx(0.0) and abs(J[0, 1]) == pytest.approx(2.0)


def test_to_real_jordan_orders_diagonal_by_magnitude():
    P, J, blocks = to_real_jordan(np.array([[3.0, 0.0], [0.0, 2.0]]))
    assert np.diag(J) == pytest.approx([3.0, 2.0])

    A = np.array([[1.0, 2.0], [3.0, 0.0]])
    P, J, blocks = to_real_jordan(A)
    assert P @ A @ np.linalg.inv(P) == pytest.approx(J, abs=1e-9)
    assert np.diag(J) == pytest.approx([3.0, -2.0])


def test_to_real_jordan_complex_needs_pairing():
    A = np.array([[1.0, -5.0], [1.0, -1.0]])
    P, J, blocks = to_real_jordan(A)
    assert P @ A @ np.linalg.inv(P) == pytest.approx(J, abs=1e-9)
    assert parse_real_jordan(J, tol=1e-9) is not None
    assert blocks[0].abs_eigenvalue == pytest.approx(2.0)


def test_defective_matrix_with_transform():
    T = np.array([[1.0, 0.0], [1.0, 1.0]])
    J = np.array([[2.0, 1.0], [0.0, 2.0]])
    A = T @ J @ np.linalg.inv(T)
    P, J_out, blocks = to_real_jordan(A, transform=np.linalg.inv(T))
    assert J_out == pytest.approx(J)
    assert blocks[0].size == 2


def test_bad_transform_is_rejected():
    with pytest.raises(UnsupportedSystemError):
        to_real_jordan(np.array([[1.0, 1.0], [-1.0, 3.0]]), transform=np.eye(2) * 2.0)
    with pytest.raises(InputError):
        to_real_jordan(np.array([[2.0]]), transform=np.zeros((1, 1)))


def test_select_independent_rows_is_greedy():
    O = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert select_independent_rows(O) == [0, 2]


def test_coefficient_map_outside_row_space():
    with pytest.raises(StructuralError):
        coefficient_map([[0.0, 1.0]], np.array([[1.0, 0.0], [2.0, 0.0]]))


def test_multi_sensor_estimates_use_owner_windows(two_sensor_system):
    assignment = check_eigenspace_assumption(two_sensor_system)
    samp = build_multi_sensor_sampled_system(two_sensor_system, assignment)
    assert samp.coordinate_owner == (2, 1)
    a, b = 0.6, -1.1
    window = [b, a, 3.0 * b, 2.0 * a]
    assert estimate_initial_state(samp, window) == pytest.approx([a, b])
    assert samp.sampled_abs_eigs == pytest.approx([16.0, 81.0])


@pytest.mark.slow
def test_realized_control_matches_sampled_recursion_on_random_systems(rng):
    for _ in range(200):
        n = int(rng.integers(1, 4))
        system = random_system(rng, n)
        samp = build_sampled_system(system)
        x0 = rng.standard_normal(n)
        x_hat_bar = rng.standard_normal(n)
        late_inputs = realize_control(system, samp, x_hat_bar)
        inputs = np.vstack([np.zeros((n, system.m)), late_inputs])
        states = propagate_period(system, x0, inputs, np.zeros((2 * n, n)))
        expected = samp.A_bar @ (samp.P @ x0) - samp.A_bar @ x_hat_bar
        scale = max(1.0, float(np.linalg.norm(expected)))
        assert np.linalg.norm(samp.P @ states[-1] - expected) < 1e-7 * scale
