"""The sampled coding and control loop, single sensor and decentralized.

One loop step is one sampling period of 2n raw stages. The sensor side sees
y = x + v_bar, quantizes every coordinate against the current bins and sends
one mixed-radix symbol per sensor. The controller decodes, applies
u_bar = -A_bar x_hat and every party updates its copy of the bins from the
shared zoom flag (in multi-sensor mode that flag is the broadcast feedback bit).
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from decomposition import (
    assignment_from_decomposition,
    build_block_decomposition,
    check_eigenspace_assumption,
    find_decreasing_order,
)
from errors import ConfigurationError, NumericError, StructuralError
from logging_setup import get_logger
from quantizer import (
    ScalarQuantizerConfig,
    ZoomParams,
    alphabet_size,
    choose_bin_counts,
    decode_components,
    encode_components,
    init_bins_for_blocks,
    mixed_radix,
    snap_to_lattice,
    split_mixed_radix,
    update_bins,
)
from system_model import GaussianSource, gaussian_factor, require_assumptions
from transforms import build_multi_sensor_sampled_system, build_sampled_system

logger = get_logger("closed_loop")

MODES = ("single_sensor", "multi_sensor")
CONTROLS = ("closed", "open")
MAX_ALPHABET = 2**62
MIN_INITIAL_DELTA = 1e-9
NOISE_RADIUS_SIGMAS = 2.5


@dataclass(frozen=True, eq=False)
class LoopConfig:
    zoom: ZoomParams = field(default_factory=ZoomParams)
    horizon: int = 1000
    mode: str = "single_sensor"
    feedback_period: int = 1
    F: Optional[float] = None
    K_per_component: Optional[tuple] = None
    estimator: str = "subset"
    control: str = "closed"
    lattice_ell: Optional[float] = None
    initial_zoom_probability: float = 0.999
    sensor_order: Optional[tuple] = None
    sensor_stack: Optional[tuple] = None
    transform: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise ConfigurationError(f"horizon must be a non-negative integer, got {self.horizon!r}.")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}.")
        if self.control not in CONTROLS:
            raise ConfigurationError(f"control must be one of {CONTROLS}, got {self.control!r}.")
        if self.estimator not in ("subset", "lsq"):
            raise ConfigurationError(f"estimator must be 'subset' or 'lsq', got {self.estimator!r}.")
        if self.feedback_period != 1:
            raise ConfigurationError("Only feedback_period = 1 (a bit every sampled step) is supported.")
        if not 0.0 < self.initial_zoom_probability < 1.0:
            raise ConfigurationError("initial_zoom_probability must lie in (0, 1).")
        if self.F is not None and not self.F > 0:
            raise ConfigurationError(f"F must be positive, got {self.F}.")
        if self.lattice_ell is not None and not self.lattice_ell > 0:
            raise ConfigurationError(f"lattice_ell must be positive, got {self.lattice_ell}.")
        object.__setattr__(self, "horizon", int(self.horizon))

    def to_dict(self):
        return {
            "zoom": self.zoom.to_dict(),
            "horizon": self.horizon,
            "mode": self.mode,
            "feedback_period": self.feedback_period,
            "F": self.F,
            "K_per_component": None if self.K_per_component is None else [int(k) for k in self.K_per_component],
            "estimator": self.estimator,
            "control": self.control,
            "lattice_ell": self.lattice_ell,
            "initial_zoom_probability": self.initial_zoom_probability,
            "sensor_order": None if self.sensor_order is None else list(self.sensor_order),
            "sensor_stack": None if self.sensor_stack is None else list(self.sensor_stack),
        }


@dataclass(frozen=True, eq=False)
class LoopPlan:
    """Everything a trial needs, resolved once per scenario and shared by all trials."""

    mode: str
    control: str
    samp: object
    K: np.ndarray
    lam_abs: np.ndarray
    groups: tuple
    group_sensors: tuple
    num_sensors: int
    zoom: ZoomParams
    initial_bins: object
    L: np.ndarray
    L_bar: np.ndarray
    F: float
    initial_mean: np.ndarray
    initial_cov: np.ndarray
    noise_factor: np.ndarray
    horizon: int
    assignment: object = None

    @property
    def n(self):
        return self.K.shape[0]

    @property
    def alphabet_sizes(self):
        return tuple(alphabet_size(self.K[list(group)]) for group in self.groups)

    @property
    def bits_per_period(self):
        bits = sum(math.log2(size + 1) for size in self.alphabet_sizes)
        if self.mode == "multi_sensor":
            bits += self.num_sensors
        return bits

    def to_dict(self):
        return {
            "mode": self.mode,
            "control": self.control,
            "period": self.samp.period,
            "K": [int(k) for k in self.K],
            "sampled_abs_eigenvalues": self.lam_abs.tolist(),
            "groups": [list(group) for group in self.groups],
            "group_sensors": list(self.group_sensors),
            "zoom": self.zoom.to_dict(),
            "initial_delta": self.initial_bins.delta.tolist(),
            "L": self.L.tolist(),
            "L_bar": self.L_bar.tolist(),
            "F": self.F,
            "alphabet_sizes": [int(size) for size in self.alphabet_sizes],
            "bits_per_period": self.bits_per_period,
        }


def resolve_assignment(sys, cfg):
    """Coordinates owned sensor-by-sensor: eigenspace assignment first, then an ordered decomposition."""
    if cfg.sensor_order is not None:
        decomp = build_block_decomposition(sys, cfg.sensor_order)
        return assignment_from_decomposition(sys, decomp)

    assignment = check_eigenspace_assumption(sys, cfg.transform)
    if assignment.satisfied:
        return assignment

    decomp = find_decreasing_order(sys)
    if decomp is None:
        raise StructuralError(
            f"Blocks {list(assignment.unassigned)} are not observed by any single sensor "
            "and no sensor order gives decreasing block magnitudes."
        )
    return assignment_from_decomposition(sys, decomp)


def one_step_noise_covariance(samp):
    """Covariance of w_bar - A_bar v_bar + v_bar', the error left one step after a zoomed step."""
    A_bar = samp.A_bar
    cross = samp.Sigma_wv_bar @ A_bar.T
    covariance = (
        samp.Sigma_w_bar
        + A_bar @ samp.Sigma_v_bar @ A_bar.T
        - cross
        - cross.T
        + samp.Sigma_v_bar
    )
    return (covariance + covariance.T) / 2.0


def _one_step_noise_sigma(samp):
    return float(np.sqrt(max(np.max(np.linalg.eigvalsh(one_step_noise_covariance(samp))), 0.0)))


def plan_loop(sys, cfg):
    require_assumptions(sys, require_unstable=True)

    assignment = None
    if cfg.mode == "single_sensor":
        samp = build_sampled_system(sys, cfg.sensor_stack, cfg.estimator, cfg.transform)
        groups = (tuple(range(sys.n)),)
        group_sensors = (0,)
    else:
        assignment = resolve_assignment(sys, cfg)
        samp = build_multi_sensor_sampled_system(sys, assignment, cfg.estimator)
        group_sensors = tuple(sorted(set(samp.coordinate_owner)))
        groups = tuple(
            tuple(i for i, owner in enumerate(samp.coordinate_owner) if owner == j) for j in group_sensors
        )

    lam_abs = samp.sampled_abs_eigs
    zoom = cfg.zoom
    if cfg.K_per_component is not None:
        K = np.array([ScalarQuantizerConfig(k).K for k in cfg.K_per_component], dtype=np.int64)
        if K.shape[0] != sys.n:
            raise ConfigurationError(f"K_per_component needs {sys.n} entries, got {K.shape[0]}.")
    else:
        K = choose_bin_counts(lam_abs, zoom.epsilon)

    if cfg.lattice_ell is not None:
        if not np.allclose(lam_abs, lam_abs[0], rtol=1e-9, atol=0.0):
            raise ConfigurationError(
                "Lattice bins need every sampled |lambda| equal; one (rho, epsilon, eta) cannot sit "
                "on a lattice for several magnitudes."
            )
        zoom = snap_to_lattice(zoom, lam_abs[0], cfg.lattice_ell)
        if cfg.K_per_component is None:
            K = choose_bin_counts(lam_abs, zoom.epsilon)

    for group in groups:
        if alphabet_size(K[list(group)]) >= MAX_ALPHABET:
            raise ConfigurationError("A sensor's symbol alphabet exceeds 2^62; reduce n or epsilon.")

    initial_mean = samp.P @ sys.mu_x0
    initial_cov = samp.P @ sys.Sigma_x0 @ samp.P.T
    observation_sigma = np.sqrt(np.clip(np.diag(initial_cov + samp.Sigma_v_bar), 0.0, None))
    tail = (1.0 - cfg.initial_zoom_probability) / (2.0 * sys.n)
    z = norm.ppf(1.0 - tail)
    required = np.maximum(2.0 * (np.abs(initial_mean) + z * observation_sigma) / K, MIN_INITIAL_DELTA)
    bins = init_bins_for_blocks(samp.jordan_blocks, required, zoom)

    L = np.asarray(bins.L, dtype=float)
    L_bar = zoom.floor(L, lam_abs)
    F = cfg.F
    if F is None:
        F = max(2.0 * float(L[0]), NOISE_RADIUS_SIGMAS * _one_step_noise_sigma(samp))
    elif not F > L[0]:
        raise ConfigurationError(f"F must exceed L^1 = {L[0]:.6g}, got {F}.")

    plan = LoopPlan(
        mode=cfg.mode,
        control=cfg.control,
        samp=samp,
        K=K,
        lam_abs=lam_abs,
        groups=groups,
        group_sensors=group_sensors,
        num_sensors=sys.num_sensors,
        zoom=zoom,
        initial_bins=bins,
        L=L,
        L_bar=L_bar,
        F=float(F),
        initial_mean=initial_mean,
        initial_cov=initial_cov,
        noise_factor=samp.noise_factor,
        horizon=cfg.horizon,
        assignment=assignment,
    )
    logger.info(
        "Loop planned: mode=%s, K=%s, initial delta=%s, F=%.6g",
        plan.mode, K.tolist(), np.round(bins.delta, 6).tolist(), plan.F,
    )
    return plan


@dataclass(frozen=True, eq=False)
class ClosedLoopState:
    x: np.ndarray
    bins: object
    x_hat: np.ndarray
    step: int = 0


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    symbols: tuple
    feedback: int
    zoomed: bool


def initial_state(plan, x0):
    n = plan.n
    return ClosedLoopState(x=np.asarray(x0, dtype=float), bins=plan.initial_bins, x_hat=np.zeros(n))


def decode_symbols(symbols, plan, delta):
    """Controller-side estimate from the per-sensor symbols; zero when any sensor sent the overflow symbol."""
    x_hat = np.zeros(plan.n)
    if any(symbol == 0 for symbol in symbols):
        return x_hat
    for group, symbol in zip(plan.groups, symbols):
        index = list(group)
        digits = split_mixed_radix(symbol, plan.K[index])
        x_hat[index] = decode_components(digits, np.asarray(delta)[index], plan.K[index])
    return x_hat


def loop_step(state, plan, w_bar, v_bar):
    """Advance one sampling period. Deterministic in (state, noise draws)."""
    y = state.x + v_bar
    if not np.all(np.isfinite(y)):
        raise NumericError(f"Observation became non-finite at step {state.step}.")

    delta = state.bins.delta
    digits = encode_components(y, delta, plan.K)
    overflow = digits == plan.K + 1
    symbols = tuple(
        0 if np.any(overflow[list(group)]) else mixed_radix(digits[list(group)], plan.K[list(group)])
        for group in plan.groups
    )
    x_hat = decode_symbols(symbols, plan, delta)
    zoomed = all(symbol != 0 for symbol in symbols)
    bins = update_bins(1 if zoomed else 0, state.bins, plan.zoom, plan.lam_abs)

    A_bar = plan.samp.A_bar
    u_bar = -A_bar @ x_hat if plan.control == "closed" else np.zeros(plan.n)
    with np.errstate(over="ignore", invalid="ignore"):
        x_next = A_bar @ state.x + u_bar + w_bar
    if not np.all(np.isfinite(x_next)) or not np.all(np.isfinite(bins.delta)):
        raise NumericError(f"State or bin size overflowed at step {state.step}.")

    next_state = ClosedLoopState(x=x_next, bins=bins, x_hat=x_hat, step=state.step + 1)
    return next_state, StepOutcome(observation=y, symbols=symbols, feedback=int(zoomed), zoomed=zoomed)


@dataclass(frozen=True, eq=False)
class RunReport:
    trial: int
    seed: int
    mode: str
    control: str
    states: np.ndarray
    deltas: np.ndarray
    observations: np.ndarray
    symbols: np.ndarray
    feedback: np.ndarray
    zoomed: np.ndarray
    initial_zoomed: bool
    aborted: bool
    abort_reason: Optional[str]
    K: tuple
    alphabet_sizes: tuple
    group_sensors: tuple
    num_sensors: int

    @property
    def steps(self):
        return int(self.zoomed.shape[0])

    @property
    def n(self):
        return int(self.states.shape[1])

    @property
    def period(self):
        return 2 * self.n

    def summary(self):
        return {
            "trial": self.trial,
            "steps": self.steps,
            "initial_zoomed": self.initial_zoomed,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "stopping_times": len(stopping_times(self)),
            "zoomed_fraction": float(np.mean(self.zoomed)) if self.steps else 1.0,
            "final_squared_norm": float(np.sum(self.states[-1] ** 2)),
        }


def draw_trial_noise(plan, rng):
    """Initial state first, then one joint (w_bar, v_bar) row per sampled step."""
    n = plan.n
    x0 = plan.initial_mean + gaussian_factor(plan.initial_cov) @ rng.standard_normal(n)
    joint = rng.standard_normal((plan.horizon, 2 * n)) @ plan.noise_factor.T
    return x0, joint[:, :n], joint[:, n:]


def simulate_plan(plan, seed, trial=0):
    rng = GaussianSource(seed, trial).generator()
    x0, w_bar, v_bar = draw_trial_noise(plan, rng)
    n = plan.n

    state = initial_state(plan, x0)
    states = [state.x]
    deltas = [state.bins.delta]
    observations, symbols, zoomed = [], [], []
    aborted = False
    abort_reason = None
    for s in range(plan.horizon):
        try:
            state, outcome = loop_step(state, plan, w_bar[s], v_bar[s])
        except NumericError as exc:
            aborted = True
            abort_reason = exc.message
            logger.warning("Trial %s aborted: %s", trial, exc.message)
            break
        states.append(state.x)
        deltas.append(state.bins.delta)
        observations.append(outcome.observation)
        symbols.append(outcome.symbols)
        zoomed.append(outcome.zoomed)

    zoomed = np.array(zoomed, dtype=bool)
    if zoomed.size:
        initial_zoomed = bool(zoomed[0])
    else:
        initial_zoomed = bool(np.all(np.abs(x0) <= plan.K * plan.initial_bins.delta / 2.0))
    if not initial_zoomed:
        logger.warning("Trial %s did not start perfectly zoomed.", trial)
    if zoomed.size > 1 and not zoomed[1:].any():
        logger.warning("Trial %s never zoomed in again after step 0.", trial)

    return RunReport(
        trial=int(trial),
        seed=int(seed),
        mode=plan.mode,
        control=plan.control,
        states=np.array(states).reshape(-1, n),
        deltas=np.array(deltas).reshape(-1, n),
        observations=np.array(observations).reshape(-1, n),
        symbols=np.array(symbols, dtype=np.int64).reshape(-1, len(plan.groups)),
        feedback=zoomed.astype(np.int8),
        zoomed=zoomed,
        initial_zoomed=initial_zoomed,
        aborted=aborted,
        abort_reason=abort_reason,
        K=tuple(int(k) for k in plan.K),
        alphabet_sizes=tuple(int(size) for size in plan.alphabet_sizes),
        group_sensors=plan.group_sensors,
        num_sensors=plan.num_sensors,
    )


def run_trial(sys, cfg, seed, trial=0, plan=None):
    plan = plan or plan_loop(sys, cfg)
    return simulate_plan(plan, seed, trial)


def run_multi_sensor(sys, cfg, seed, trial=0, plan=None):
    cfg = cfg if cfg.mode == "multi_sensor" else replace(cfg, mode="multi_sensor")
    plan = plan or plan_loop(sys, cfg)
    return simulate_plan(plan, seed, trial)


def stopping_times_from_flags(flags):
    """tau_0 = 0, then every later step whose zoom flag is set."""
    return [0] + [s for s, flag in enumerate(flags) if s > 0 and flag]


def stopping_times(report):
    return stopping_times_from_flags(report.zoomed)


def excursions(report):
    """Complete (start, stop) pairs between consecutive stopping times."""
    times = stopping_times(report)
    return list(zip(times[:-1], times[1:]))


def symbol_audit(report):
    """Bits emitted by the run: per period every sensor symbol plus, with several sensors, the feedback bits."""
    per_period = sum(math.log2(size + 1) for size in report.alphabet_sizes)
    if report.mode == "multi_sensor":
        per_period += report.num_sensors
    return {
        "periods": report.steps,
        "bits_per_period": per_period,
        "bits_per_stage": per_period / report.period,
        "total_bits": per_period * report.steps,
    }
