"""Sampling every 2n stages, estimation from an observation window, and real Jordan coordinates.

Within each period of 2n raw stages the controller stays silent for the first n
stages while the sensors collect an observation window, then spends stages
n..2n-1 applying the inputs that realize the sampled control action. Seen once
per period the plant becomes

    x_bar_{s+1} = A_bar x_bar_s + u_bar_s + w_bar_s,   y_bar_s = x_bar_s + v_bar_s

in real Jordan coordinates x_bar = P x, where w_bar and v_bar are Gaussian and
may be correlated at equal s.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import block_diag

from errors import InputError, NumericError, StructuralError, UnsupportedSystemError
from logging_setup import get_logger
from system_model import (
    controllability_matrix,
    gaussian_factor,
    draw_gaussian,
    numerical_rank,
    observability_matrix,
    sort_eigenvalues,
)

logger = get_logger("transforms")

JORDAN_TOLERANCE = 1e-9
DEFECTIVE_CONDITION_LIMIT = 1e10
RESIDUAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class JordanBlock:
    start: int
    size: int
    eigenvalue: complex
    kind: str

    @property
    def stop(self):
        return self.start + self.size

    @property
    def abs_eigenvalue(self):
        return abs(self.eigenvalue)

    def to_dict(self):
        return {
            "start": self.start,
            "size": self.size,
            "kind": self.kind,
            "eigenvalue": [float(self.eigenvalue.real), float(self.eigenvalue.imag)],
        }


class RealJordanForm(NamedTuple):
    P: np.ndarray
    J: np.ndarray
    blocks: tuple


def _close(a, b, tol):
    return bool(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0) <= tol)


def _block_matrix(blocks, n):
    matrix = np.zeros((n, n))
    for block in blocks:
        s = block.start
        if block.kind == "real":
            lam = block.eigenvalue.real
            for i in range(block.size):
                matrix[s + i, s + i] = lam
                if i + 1 < block.size:
                    matrix[s + i, s + i + 1] = 1.0
        else:
            a, b = block.eigenvalue.real, block.eigenvalue.imag
            D = np.array([[a, b], [-b, a]])
            for i in range(0, block.size, 2):
                matrix[s + i:s + i + 2, s + i:s + i + 2] = D
                if i + 2 < block.size:
                    matrix[s + i:s + i + 2, s + i + 2:s + i + 4] = np.eye(2)
    return matrix


def parse_real_jordan(J, tol=1e-12):
    """Block list of a matrix already in real Jordan form, or None when it is not."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    n = J.shape[0]
    tol_abs = tol * max(1.0, float(np.max(np.abs(J), initial=0.0)))
    blocks = []
    i = 0
    while i < n:
        if i + 1 < n and abs(J[i + 1, i]) > tol_abs:
            D = J[i:i + 2, i:i + 2]
            a, b = D[0, 0], D[0, 1]
            if abs(b) <= tol_abs or not _close(D, [[a, b], [-b, a]], tol_abs):
                return None
            size = 2
            while (
                i + size + 1 < n
                and _close(J[i + size:i + size + 2, i + size:i + size + 2], D, tol_abs)
                and _close(J[i + size - 2:i + size, i + size:i + size + 2], np.eye(2), tol_abs)
            ):
                size += 2
            blocks.append(JordanBlock(i, size, complex(a, b), "complex"))
        else:
            lam = J[i, i]
            size = 1
            while (
                i + size < n
                and abs(J[i + size - 1, i + size] - 1.0) <= tol_abs
                and abs(J[i + size, i + size] - lam) <= tol_abs
            ):
                size += 1
            blocks.append(JordanBlock(i, size, complex(lam, 0.0), "real"))
        i += blocks[-1].size

    if not _close(_block_matrix(blocks, n), J, tol_abs):
        return None
    return tuple(blocks)


def _unit_phase(vector):
    pivot = vector[np.argmax(np.abs(vector))]
    return vector * (abs(pivot) / pivot)


def to_real_jordan(A, transform=None):
    """P and J = P A P^-1 in real Jordan form, ordered by decreasing |lambda| when P is computed here."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]

    if transform is not None:
        P = np.atleast_2d(np.asarray(transform, dtype=float))
        if P.shape != (n, n) or numerical_rank(P) < n:
            raise InputError(f"The supplied Jordan transform must be an invertible {n}x{n} matrix.")
        J = P @ A @ np.linalg.inv(P)
        blocks = parse_real_jordan(J, tol=JORDAN_TOLERANCE)
        if blocks is None:
            raise UnsupportedSystemError("The supplied transform does not bring A to real Jordan form.")
        return RealJordanForm(P, J, blocks)

    blocks = parse_real_jordan(A)
    if blocks is not None:
        return RealJordanForm(np.eye(n), A.copy(), blocks)

    eigenvalues, vectors = np.linalg.eig(A)
    if numerical_rank(vectors) < n or np.linalg.cond(vectors) > DEFECTIVE_CONDITION_LIMIT:
        raise UnsupportedSystemError(
            "A is defective: supply it in real Jordan form or provide the transform P."
        )

    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    representatives = [
        i for i, value in enumerate(eigenvalues) if value.imag > JORDAN_TOLERANCE * scale
        or abs(value.imag) <= JORDAN_TOLERANCE * scale
    ]
    ordered = sort_eigenvalues(eigenvalues[representatives])
    used = set()
    columns = []
    blocks = []
    for value in ordered:
        index = next(
            i for i in representatives
            if i not in used and abs(eigenvalues[i] - value) <= JORDAN_TOLERANCE * scale
        )
        used.add(index)
        vector = vectors[:, index]
        start = len(columns)
        if abs(value.imag) <= JORDAN_TOLERANCE * scale:
            real_vector = _unit_phase(vector).real
            columns.append(real_vector / np.linalg.norm(real_vector))
            blocks.append(JordanBlock(start, 1, complex(value.real, 0.0), "real"))
        else:
            norm = np.linalg.norm(vector)
            columns.extend([vector.real / norm, vector.imag / norm])
            blocks.append(JordanBlock(start, 2, complex(value.real, value.imag), "complex"))

    S = np.column_stack(columns)
    if numerical_rank(S) < n:
        raise UnsupportedSystemError("Could not build an invertible real Jordan basis for A.")
    P = np.linalg.inv(S)
    J = P @ A @ S
    return RealJordanForm(P, J, tuple(blocks))


def select_independent_rows(matrix, limit=None):
    """Greedy pivoting: walk rows in order, keep each one that raises the numerical rank."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    limit = matrix.shape[1] if limit is None else limit
    selected = []
    for row in range(matrix.shape[0]):
        candidate = selected + [row]
        if numerical_rank(matrix[candidate]) == len(candidate):
            selected = candidate
            if len(selected) == limit:
                break
    return selected


def coefficient_map(target_rows, O, estimator="subset"):
    """Weights k with k O = target_rows, using a greedy row subset of O or all of its rows."""
    target_rows = np.atleast_2d(np.asarray(target_rows, dtype=float))
    O = np.atleast_2d(np.asarray(O, dtype=float))
    weights = np.zeros((target_rows.shape[0], O.shape[0]))
    if estimator == "subset":
        rows = select_independent_rows(O)
        solution, *_ = np.linalg.lstsq(O[rows].T, target_rows.T, rcond=None)
        weights[:, rows] = solution.T
    elif estimator == "lsq":
        weights = target_rows @ np.linalg.pinv(O)
    else:
        raise InputError(f"Unknown estimator {estimator!r}; expected 'subset' or 'lsq'.")

    residual = np.linalg.norm(weights @ O - target_rows)
    if residual > RESIDUAL_TOLERANCE * max(1.0, np.linalg.norm(target_rows)):
        raise StructuralError("Target rows are not in the row space of the observability matrix.")
    return weights


@dataclass(frozen=True, eq=False)
class SampledSystem:
    period: int
    A_bar: np.ndarray
    P: np.ndarray
    P_inv: np.ndarray
    jordan_blocks: tuple
    estimator: np.ndarray
    estimator_rows: tuple
    window_sensors: tuple
    window_dims: tuple
    coordinate_owner: tuple
    H_w: np.ndarray
    G_w: np.ndarray
    Sigma_W: np.ndarray
    Sigma_V: np.ndarray
    Sigma_w_bar: np.ndarray
    Sigma_v_bar: np.ndarray
    Sigma_wv_bar: np.ndarray

    @property
    def n(self):
        return self.A_bar.shape[0]

    @property
    def window_width(self):
        return sum(self.window_dims)

    @property
    def sampled_abs_eigs(self):
        """|lambda|^(2n) for every coordinate, taken from its Jordan block."""
        values = np.empty(self.n)
        for block in self.jordan_blocks:
            values[block.start:block.stop] = block.abs_eigenvalue ** self.period
        return values

    @property
    def joint_covariance(self):
        return np.block([
            [self.Sigma_w_bar, self.Sigma_wv_bar],
            [self.Sigma_wv_bar.T, self.Sigma_v_bar],
        ])

    @property
    def noise_factor(self):
        return gaussian_factor(self.joint_covariance)

    def to_dict(self):
        return {
            "period": self.period,
            "A_bar": self.A_bar.tolist(),
            "P": self.P.tolist(),
            "jordan_blocks": [block.to_dict() for block in self.jordan_blocks],
            "estimator_rows": list(self.estimator_rows),
            "window_sensors": list(self.window_sensors),
            "coordinate_owner": list(self.coordinate_owner),
            "Sigma_w_bar": self.Sigma_w_bar.tolist(),
            "Sigma_v_bar": self.Sigma_v_bar.tolist(),
            "Sigma_wv_bar": self.Sigma_wv_bar.tolist(),
        }


def _symmetric(matrix):
    return (matrix + matrix.T) / 2.0


def _window_maps(sys, sensors):
    """Raw linear maps of one period: window = O x_0 + G_w W + V and x_2n = A^2n x_0 + H_w W (+ inputs)."""
    n = sys.n
    period = 2 * n
    C_stack = np.vstack([sys.sensor(j) for j in sensors])
    p_total = C_stack.shape[0]
    powers = [np.eye(n)]
    for _ in range(period):
        powers.append(powers[-1] @ sys.A)

    O = observability_matrix(C_stack, sys.A)
    G_w = np.zeros((n * p_total, period * n))
    for k in range(n):
        for i in range(k):
            G_w[k * p_total:(k + 1) * p_total, i * n:(i + 1) * n] = C_stack @ powers[k - 1 - i]
    H_w = np.hstack([powers[period - 1 - i] for i in range(period)])
    Sigma_W = np.kron(np.eye(period), sys.Sigma_w)
    Sigma_V = np.kron(np.eye(n), block_diag(*[sys.Sigma_v[j - 1] for j in sensors]))
    return O, G_w, H_w, Sigma_W, Sigma_V, powers[period]


def sampled_jordan_basis(J_period, blocks):
    """Per-block change of basis T with T J_period T^-1 in real Jordan form.

    J_period is a power of a real Jordan matrix, so inside every block it is
    upper block-Toeplitz: the diagonal keeps the block's eigenvalue power and the
    part above it is nilpotent. A chain of that nilpotent part started at the
    block's last (pair of) column(s) puts ones (identity pairs) back on the
    superdiagonal. Blocks of eigenvalue zero are left alone.
    """
    J_period = np.atleast_2d(np.asarray(J_period, dtype=float))
    T = np.eye(J_period.shape[0])
    for block in blocks:
        step = 1 if block.kind == "real" else 2
        if block.size <= step:
            continue
        s = slice(block.start, block.stop)
        power = J_period[s, s]
        head = np.zeros_like(power)
        for i in range(0, block.size, step):
            head[i:i + step, i:i + step] = power[i:i + step, i:i + step]
        nilpotent = power - head

        chain = [np.eye(block.size)[:, -step:]]
        for _ in range(block.size // step - 1):
            chain.insert(0, nilpotent @ chain[0])
        S = np.hstack(chain)
        if numerical_rank(S) < block.size:
            continue
        T[s, s] = np.linalg.inv(S)
    return T


def _assemble(sys, sensors, P, blocks, estimator, estimator_rows, owners, maps):
    O, G_w, H_w, Sigma_W, Sigma_V, A_period = maps
    P = sampled_jordan_basis(P @ A_period @ np.linalg.inv(P), blocks) @ P
    P_inv = np.linalg.inv(P)
    sigma_w_tilde = H_w @ Sigma_W @ H_w.T
    noise_to_estimate = estimator @ G_w
    sigma_v_tilde = noise_to_estimate @ Sigma_W @ noise_to_estimate.T + estimator @ Sigma_V @ estimator.T
    cross_tilde = H_w @ Sigma_W @ noise_to_estimate.T

    samp = SampledSystem(
        period=2 * sys.n,
        A_bar=P @ A_period @ P_inv,
        P=P,
        P_inv=P_inv,
        jordan_blocks=tuple(blocks),
        estimator=estimator,
        estimator_rows=tuple(int(row) for row in estimator_rows),
        window_sensors=tuple(sensors),
        window_dims=tuple(sys.sensor_dims[j - 1] for j in sensors),
        coordinate_owner=tuple(int(owner) for owner in owners),
        H_w=H_w,
        G_w=G_w,
        Sigma_W=Sigma_W,
        Sigma_V=Sigma_V,
        Sigma_w_bar=_symmetric(P @ sigma_w_tilde @ P.T),
        Sigma_v_bar=_symmetric(P @ sigma_v_tilde @ P.T),
        Sigma_wv_bar=P @ cross_tilde @ P.T,
    )
    logger.debug(
        "Sampled system built: period=%s, sensors=%s, sampled |lambda|=%s",
        samp.period, sensors, np.round(samp.sampled_abs_eigs, 6).tolist(),
    )
    return samp


def build_sampled_system(sys, sensor_stack=None, estimator="subset", transform=None):
    """Centralized sampling: one estimator over the stacked windows of the listed sensors (1-based)."""
    sensors = list(range(1, sys.num_sensors + 1)) if sensor_stack is None else list(sensor_stack)
    if not sensors:
        raise InputError("sensor_stack must name at least one sensor.")
    for j in sensors:
        sys.sensor(j)

    maps = _window_maps(sys, sensors)
    O = maps[0]
    if numerical_rank(O) < sys.n:
        raise StructuralError(f"Sensors {sensors} do not make the system observable.")

    if estimator == "subset":
        rows = select_independent_rows(O, limit=sys.n)
        E = np.zeros((sys.n, O.shape[0]))
        E[:, rows] = np.linalg.inv(O[rows])
    elif estimator == "lsq":
        rows = list(range(O.shape[0]))
        E = np.linalg.pinv(O)
    else:
        raise InputError(f"Unknown estimator {estimator!r}; expected 'subset' or 'lsq'.")

    P, _, blocks = to_real_jordan(sys.A, transform)
    return _assemble(sys, sensors, P, blocks, E, rows, [0] * sys.n, maps)


def sensor_window_rows(sys, sensors, j):
    """Positions of sensor j's entries inside the time-major stacked window."""
    dims = [sys.sensor_dims[i - 1] for i in sensors]
    p_total = sum(dims)
    offset = sum(dims[:sensors.index(j)])
    return [k * p_total + offset + r for k in range(sys.n) for r in range(dims[sensors.index(j)])]


def build_multi_sensor_sampled_system(sys, assignment, estimator="subset"):
    """Decentralized sampling: coordinate i is estimated only from its owner's window.

    assignment supplies Q (rows are the sampled coordinates as functionals of x),
    blocks (Jordan blocks in Q coordinates) and owners (1-based sensor per coordinate).
    """
    sensors = list(range(1, sys.num_sensors + 1))
    maps = _window_maps(sys, sensors)
    Q = np.asarray(assignment.Q, dtype=float)
    owners = list(assignment.owners)

    weights = np.zeros((sys.n, maps[0].shape[0]))
    used_rows = set()
    for j in sorted(set(owners)):
        coordinates = [i for i, owner in enumerate(owners) if owner == j]
        O_j = observability_matrix(sys.sensor(j), sys.A)
        local = coefficient_map(Q[coordinates], O_j, estimator)
        columns = sensor_window_rows(sys, sensors, j)
        weights[np.ix_(coordinates, columns)] = local
        used_rows.update(columns[r] for r in np.flatnonzero(np.any(local != 0.0, axis=0)))

    E = np.linalg.solve(Q, weights)
    return _assemble(sys, sensors, Q, assignment.blocks, E, sorted(used_rows), owners, maps)


def estimate_initial_state(samp, y_window):
    """x_0 estimate (original coordinates) from a window of n stacked observations."""
    y = np.asarray(y_window, dtype=float)
    n = samp.n
    width = samp.window_width
    if y.ndim == 2:
        if y.shape != (n, width):
            raise InputError(f"Observation window must be {n}x{width}, got {y.shape}.")
        y = y.reshape(-1)
    elif y.ndim != 1 or y.shape[0] != n * width:
        raise InputError(f"Observation window must hold {n * width} values, got shape {y.shape}.")
    return samp.estimator @ y


@dataclass(frozen=True, eq=False)
class ControlRealization:
    reach: np.ndarray
    gains: np.ndarray
    m: int

    def inputs(self, target):
        """Per-stage inputs u_n..u_{2n-1} (rows) whose aggregate effect is target."""
        target = np.atleast_1d(np.asarray(target, dtype=float))
        stacked = self.gains @ target
        residual = np.linalg.norm(self.reach @ stacked - target)
        if residual > RESIDUAL_TOLERANCE * max(1.0, np.linalg.norm(target)):
            raise NumericError(f"Control realization residual {residual:.3e} exceeds tolerance.")
        return stacked.reshape(-1, self.m)


def build_control_realization(sys):
    """Minimum-norm split of an aggregate input over stages n..2n-1: sum_j A^(n-1-j) B u_{n+j}."""
    n = sys.n
    reach = np.hstack([np.linalg.matrix_power(sys.A, n - 1 - j) @ sys.B for j in range(n)])
    if numerical_rank(controllability_matrix(sys.A, sys.B)) < n:
        raise StructuralError("(A, B) is not controllable; the sampled control cannot be realized.")
    return ControlRealization(reach=reach, gains=np.linalg.pinv(reach), m=sys.m)


def realize_control(sys, samp, x_hat, target_bar=None, realization=None):
    """Inputs for stages n..2n-1 that apply u_bar = -A_bar x_hat (or target_bar) in sampled coordinates."""
    x_hat = np.atleast_1d(np.asarray(x_hat, dtype=float))
    if target_bar is None:
        target_bar = -samp.A_bar @ x_hat
    realization = realization or build_control_realization(sys)
    return realization.inputs(samp.P_inv @ np.asarray(target_bar, dtype=float))


def propagate_period(sys, x0, inputs, w_seq):
    """Raw states x_0..x_2n under per-stage inputs (2n x m) and plant noise (2n x n)."""
    n = sys.n
    period = 2 * n
    inputs = np.asarray(inputs, dtype=float).reshape(period, sys.m)
    w_seq = np.asarray(w_seq, dtype=float).reshape(period, n)
    states = [np.asarray(x0, dtype=float)]
    for t in range(period):
        states.append(sys.A @ states[-1] + sys.B @ inputs[t] + w_seq[t])
    return np.array(states)


def sample_raw_period_noise(samp, rng, count):
    """Draw raw plant/sensor noise for count periods and map it to (w_bar, v_bar) samples."""
    W = draw_gaussian(rng, samp.Sigma_W, count)
    V = draw_gaussian(rng, samp.Sigma_V, count)
    w_tilde = W @ samp.H_w.T
    v_tilde = (W @ samp.G_w.T + V) @ samp.estimator.T
    return w_tilde @ samp.P.T, v_tilde @ samp.P.T
