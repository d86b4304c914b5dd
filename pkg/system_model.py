"""Linear plant, sensors and Gaussian noise sources.

The plant is x_{t+1} = A x_t + B u_t + w_t observed by M sensors
y^j_t = C^j x_t + v^j_t. Sensor indices are 1-based wherever they appear in a
public signature or report.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from errors import InputError, StructuralError, UnsupportedSystemError
from logging_setup import get_logger

logger = get_logger("system_model")

RANK_TOLERANCE = 1e-9
PSD_TOLERANCE = 1e-9
MAX_SEED = 2**64 - 1


def _frozen_array(value, name, ndim):
    try:
        array = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name} is not numeric: {exc}") from exc
    if ndim == 2:
        array = np.atleast_2d(array)
    elif ndim == 1:
        array = np.atleast_1d(array)
    if array.ndim != ndim:
        raise InputError(f"{name} must be {ndim}-dimensional, got shape {array.shape}.")
    if not np.all(np.isfinite(array)):
        raise InputError(f"{name} contains NaN or infinite entries.")
    array.setflags(write=False)
    return array


def numerical_rank(matrix, tol=RANK_TOLERANCE):
    """Rank counted as singular values above tol times the largest one."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return 0
    singular_values = np.linalg.svd(matrix, compute_uv=False)
    if singular_values.size == 0 or singular_values[0] == 0.0:
        return 0
    return int(np.sum(singular_values > tol * singular_values[0]))


def is_psd(matrix, tol=PSD_TOLERANCE):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[0] != matrix.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
    if np.max(np.abs(matrix - matrix.T), initial=0.0) > tol * scale:
        return False
    eigenvalues = np.linalg.eigvalsh((matrix + matrix.T) / 2.0)
    return bool(np.all(eigenvalues >= -tol * scale))


def observability_matrix(C, A):
    C = np.atleast_2d(np.asarray(C, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if C.shape[1] != n:
        raise InputError(f"C has {C.shape[1]} columns but A is {n}x{n}.")
    rows = [C]
    for _ in range(n - 1):
        rows.append(rows[-1] @ A)
    return np.vstack(rows)


def controllability_matrix(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = A.shape[0]
    if B.shape[0] != n:
        raise InputError(f"B has {B.shape[0]} rows but A is {n}x{n}.")
    columns = [B]
    for _ in range(n - 1):
        columns.append(A @ columns[-1])
    return np.hstack(columns)


def sort_eigenvalues(eigenvalues):
    """Decreasing magnitude; ties broken by real part then imaginary part, both decreasing."""
    eigenvalues = np.asarray(eigenvalues, dtype=complex)
    order = sorted(
        range(eigenvalues.size),
        key=lambda i: (-round(abs(eigenvalues[i]), 12), -eigenvalues[i].real, -eigenvalues[i].imag),
    )
    return eigenvalues[order]


@dataclass(frozen=True, eq=False)
class LinearSystem:
    A: np.ndarray
    B: np.ndarray
    sensors: tuple
    Sigma_w: np.ndarray
    Sigma_v: tuple
    Sigma_x0: np.ndarray
    mu_x0: np.ndarray

    def __post_init__(self):
        A = _frozen_array(self.A, "A", 2)
        n = A.shape[0]
        if A.shape != (n, n):
            raise InputError(f"A must be square, got shape {A.shape}.")
        B = _frozen_array(self.B, "B", 2)
        if B.shape[0] != n:
            raise InputError(f"B must have {n} rows, got shape {B.shape}.")

        if len(self.sensors) == 0:
            raise InputError("At least one sensor is required.")
        sensors = []
        for j, C in enumerate(self.sensors, start=1):
            C = _frozen_array(C, f"sensors[{j}]", 2)
            if C.shape[1] != n:
                raise InputError(f"Sensor {j} matrix must have {n} columns, got shape {C.shape}.")
            sensors.append(C)

        if len(self.Sigma_v) != len(sensors):
            raise InputError(
                f"Got {len(self.Sigma_v)} observation-noise covariances for {len(sensors)} sensors."
            )
        sigma_v = []
        for j, (C, S) in enumerate(zip(sensors, self.Sigma_v), start=1):
            S = _frozen_array(S, f"Sigma_v[{j}]", 2)
            self._require_covariance(S, C.shape[0], f"Sigma_v[{j}]")
            sigma_v.append(S)

        sigma_w = _frozen_array(self.Sigma_w, "Sigma_w", 2)
        self._require_covariance(sigma_w, n, "Sigma_w")
        sigma_x0 = _frozen_array(self.Sigma_x0, "Sigma_x0", 2)
        self._require_covariance(sigma_x0, n, "Sigma_x0")
        mu_x0 = _frozen_array(self.mu_x0, "mu_x0", 1)
        if mu_x0.shape != (n,):
            raise InputError(f"mu_x0 must have length {n}, got {mu_x0.shape[0]}.")

        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sensors", tuple(sensors))
        object.__setattr__(self, "Sigma_v", tuple(sigma_v))
        object.__setattr__(self, "Sigma_w", sigma_w)
        object.__setattr__(self, "Sigma_x0", sigma_x0)
        object.__setattr__(self, "mu_x0", mu_x0)

    @staticmethod
    def _require_covariance(matrix, size, name):
        if matrix.shape != (size, size):
            raise InputError(f"{name} must be {size}x{size}, got shape {matrix.shape}.")
        if not is_psd(matrix):
            raise InputError(f"{name} is not symmetric positive semidefinite.")

    @classmethod
    def from_lists(cls, A, B, sensors, Sigma_w=None, Sigma_v=None, Sigma_x0=None, mu_x0=None):
        """Build a system from nested lists, defaulting every covariance to identity."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        sensors = [np.atleast_2d(np.asarray(C, dtype=float)) for C in sensors]
        if Sigma_v is None:
            Sigma_v = [np.eye(C.shape[0]) for C in sensors]
        return cls(
            A=A,
            B=B,
            sensors=tuple(sensors),
            Sigma_w=np.eye(n) if Sigma_w is None else Sigma_w,
            Sigma_v=tuple(Sigma_v),
            Sigma_x0=np.eye(n) if Sigma_x0 is None else Sigma_x0,
            mu_x0=np.zeros(n) if mu_x0 is None else mu_x0,
        )

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def num_sensors(self):
        return len(self.sensors)

    @property
    def sensor_dims(self):
        return tuple(C.shape[0] for C in self.sensors)

    @property
    def stacked_sensor(self):
        return np.vstack(self.sensors)

    @property
    def eigenvalues(self):
        return sort_eigenvalues(np.linalg.eigvals(self.A))

    def sensor(self, j):
        if not 1 <= j <= self.num_sensors:
            raise InputError(f"Sensor index {j} out of range 1..{self.num_sensors}.")
        return self.sensors[j - 1]

    def with_sensors(self, indices):
        """Sub-system keeping only the listed (1-based) sensors."""
        return LinearSystem(
            A=self.A,
            B=self.B,
            sensors=tuple(self.sensor(j) for j in indices),
            Sigma_w=self.Sigma_w,
            Sigma_v=tuple(self.Sigma_v[j - 1] for j in indices),
            Sigma_x0=self.Sigma_x0,
            mu_x0=self.mu_x0,
        )


def _vector(value, size, name):
    vector = np.atleast_1d(np.asarray(value, dtype=float))
    if vector.shape != (size,):
        raise InputError(f"{name} must have length {size}, got shape {vector.shape}.")
    return vector


def step(sys, x, u, w):
    x = _vector(x, sys.n, "x")
    u = _vector(u, sys.m, "u")
    w = _vector(w, sys.n, "w")
    return sys.A @ x + sys.B @ u + w


def observe(sys, j, x, v):
    C = sys.sensor(j)
    x = _vector(x, sys.n, "x")
    v = _vector(v, C.shape[0], "v")
    return C @ x + v


@dataclass(frozen=True)
class AssumptionReport:
    controllable: bool
    jointly_observable: bool
    per_sensor_observable: tuple
    unstable_eigenvalues: tuple
    eigenvalues: tuple

    @property
    def all_modes_unstable(self):
        return len(self.unstable_eigenvalues) == len(self.eigenvalues)

    @property
    def mixed_spectrum(self):
        return 0 < len(self.unstable_eigenvalues) < len(self.eigenvalues)

    @property
    def min_rate(self):
        return float(sum(np.log2(abs(value)) for value in self.unstable_eigenvalues))

    def to_dict(self):
        def pairs(values):
            return [[float(value.real), float(value.imag)] for value in values]

        return {
            "controllable": self.controllable,
            "jointly_observable": self.jointly_observable,
            "per_sensor_observable": list(self.per_sensor_observable),
            "unstable_eigenvalues": pairs(self.unstable_eigenvalues),
            "eigenvalues": pairs(self.eigenvalues),
            "all_modes_unstable": self.all_modes_unstable,
            "mixed_spectrum": self.mixed_spectrum,
            "min_rate": self.min_rate,
        }


def check_assumptions(sys):
    n = sys.n
    eigenvalues = sys.eigenvalues
    return AssumptionReport(
        controllable=numerical_rank(controllability_matrix(sys.A, sys.B)) == n,
        jointly_observable=numerical_rank(observability_matrix(sys.stacked_sensor, sys.A)) == n,
        per_sensor_observable=tuple(
            numerical_rank(observability_matrix(C, sys.A)) == n for C in sys.sensors
        ),
        unstable_eigenvalues=tuple(complex(value) for value in eigenvalues if abs(value) > 1.0),
        eigenvalues=tuple(complex(value) for value in eigenvalues),
    )


def require_assumptions(sys, require_unstable=True):
    """Raise unless the plant is controllable, jointly observable and (optionally) fully unstable."""
    report = check_assumptions(sys)
    if not report.controllable:
        raise StructuralError("(A, B) is not controllable.")
    if not report.jointly_observable:
        raise StructuralError("The stacked sensors do not make the system observable.")
    if require_unstable and not report.all_modes_unstable:
        stable = [value for value in report.eigenvalues if abs(value) <= 1.0]
        if report.mixed_spectrum:
            message = f"Mixed stable/unstable spectrum is not supported; stable modes: {stable}."
        else:
            message = f"The zoom policy needs every mode unstable (|lambda| > 1); got {stable}."
        raise UnsupportedSystemError(message)
    return report


def gaussian_factor(covariance):
    """Return F with F F^T = covariance; singular PSD input is allowed."""
    covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
    symmetric = (covariance + covariance.T) / 2.0
    eigenvalues, eigenvectors = np.linalg.eigh(symmetric)
    return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


@dataclass(frozen=True)
class GaussianSource:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= int(self.seed) <= MAX_SEED:
            raise InputError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}.")
        if not isinstance(self.stream_id, (int, np.integer)) or int(self.stream_id) < 0:
            raise InputError(f"stream_id must be a non-negative integer, got {self.stream_id!r}.")

    def derived_seed(self):
        payload = "\x1f".join((str(int(self.seed)), str(int(self.stream_id))))
        digest = hashlib.sha256(payload.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big")

    def generator(self):
        return np.random.default_rng(self.derived_seed())


def draw_gaussian(rng, covariance, count, mean=None):
    """count rows of Gaussian vectors with the given covariance (and mean, default zero)."""
    factor = gaussian_factor(covariance)
    samples = rng.standard_normal((count, factor.shape[1])) @ factor.T
    if mean is not None:
        samples = samples + np.asarray(mean, dtype=float)
    return samples
