"""Random plants for tests and for the `generate` subcommand.

All draws go through a numpy Generator, so a seed fully determines the output.
"""

import numpy as np
from scipy.stats import ortho_group

from errors import ConfigurationError
from logging_setup import get_logger
from scenario import scenario_document
from system_model import (
    LinearSystem,
    controllability_matrix,
    numerical_rank,
    observability_matrix,
)

logger = get_logger("system_generator")

# Generation settings
MIN_UNSTABLE_MAGNITUDE = 1.2
MAX_UNSTABLE_MAGNITUDE = 3.0
MIN_EIGENVALUE_GAP = 0.1
MAX_ATTEMPTS = 50


def random_rotation(rng, n):
    """Haar-distributed orthogonal matrix (identity for n = 1)."""
    if n == 1:
        return np.eye(1)
    return ortho_group.rvs(n, random_state=rng)


def random_unstable_spectrum(rng, n, low=MIN_UNSTABLE_MAGNITUDE, high=MAX_UNSTABLE_MAGNITUDE):
    """Distinct real eigenvalues, all outside the unit circle, with random signs."""
    for _ in range(MAX_ATTEMPTS):
        magnitudes = np.sort(rng.uniform(low, high, size=n))[::-1]
        if n == 1 or np.min(-np.diff(magnitudes)) >= MIN_EIGENVALUE_GAP:
            signs = rng.choice([-1.0, 1.0], size=n)
            return magnitudes * signs
    raise ConfigurationError(f"Could not draw {n} well-separated magnitudes in [{low}, {high}].")


def random_input_matrix(rng, A, m=1):
    n = A.shape[0]
    for _ in range(MAX_ATTEMPTS):
        B = rng.standard_normal((n, m))
        if numerical_rank(controllability_matrix(A, B)) == n:
            return B
    raise ConfigurationError("Could not draw a controllable input matrix.")


def random_system(rng, n, num_sensors=1, rows_per_sensor=1, m=1):
    """A diagonalizable all-unstable plant whose stacked sensors are jointly observable.

    Individual sensors may see only part of the state.
    """
    for attempt in range(1, MAX_ATTEMPTS + 1):
        T = random_rotation(rng, n)
        A = T @ np.diag(random_unstable_spectrum(rng, n)) @ T.T
        sensors = [rng.standard_normal((rows_per_sensor, n)) for _ in range(num_sensors)]
        if numerical_rank(observability_matrix(np.vstack(sensors), A)) < n:
            logger.debug("Draw %s not jointly observable, retrying.", attempt)
            continue
        B = random_input_matrix(rng, A, m)
        return LinearSystem.from_lists(A, B, sensors)
    raise ConfigurationError(f"No jointly observable system after {MAX_ATTEMPTS} draws.")


def random_block_system(rng, block_spectra, coupling=1.0, rotate=True):
    """Plant with a hidden block upper-triangular structure, one block per sensor.

    block_spectra lists the real eigenvalues of each diagonal block from top to
    bottom. Sensor 1 sees only the bottom block and sensor j sees block M - j + 1
    plus, through the coupling, the blocks below it, so the natural order 1..M
    reproduces the blocks. With rotate=True the structure is hidden behind a
    random orthogonal change of coordinates.
    """
    dims = [len(spectrum) for spectrum in block_spectra]
    if not dims or min(dims) < 1:
        raise ConfigurationError("Every block needs at least one eigenvalue.")
    n = sum(dims)
    M = len(dims)
    starts = np.cumsum([0] + dims[:-1])

    A_bar = np.diag(np.concatenate([np.asarray(spectrum, dtype=float) for spectrum in block_spectra]))
    for upper in range(M):
        for lower in range(upper + 1, M):
            rows = slice(starts[upper], starts[upper] + dims[upper])
            cols = slice(starts[lower], starts[lower] + dims[lower])
            A_bar[rows, cols] = coupling * rng.uniform(0.5, 1.5, size=(dims[upper], dims[lower]))

    sensors_bar = []
    for j in range(1, M + 1):
        block = M - j
        C = np.zeros((1, n))
        C[0, starts[block]:starts[block] + dims[block]] = 1.0
        sensors_bar.append(C)

    Q0 = random_rotation(rng, n) if rotate else np.eye(n)
    A = Q0.T @ A_bar @ Q0
    sensors = [C @ Q0 for C in sensors_bar]
    B = random_input_matrix(rng, A)
    return LinearSystem.from_lists(A, B, sensors)


def generate_scenario(seed, n, num_sensors=1, name=None, horizon=None):
    """Random jointly observable scenario document, ready to be written as JSON."""
    rng = np.random.default_rng(seed)
    system = random_system(rng, n, num_sensors=num_sensors)
    # stacked sensors, centralized encoder
    loop = {"mode": "single_sensor"}
    if horizon is not None:
        loop["horizon"] = int(horizon)
    logger.info("Generated a random %s-state plant with %s sensor(s) from seed %s.", n, num_sensors, seed)
    return scenario_document(
        system,
        name=name or f"random_n{n}_m{num_sensors}_seed{seed}",
        description=f"Random all-unstable plant drawn from seed {seed}.",
        loop=loop,
        run={"seed": int(seed)},
    )
