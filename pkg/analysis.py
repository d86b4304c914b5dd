"""Rate accounting, the Gaussian tail bound and Monte Carlo stability diagnostics.

Diagnostics are folds over lists of RunReport values. Series come back as
pandas DataFrames (ready for to_csv), verdicts as plain dictionaries.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from closed_loop import excursions, stopping_times, symbol_audit
from decomposition import sufficient_rate
from errors import InputError
from logging_setup import get_logger
from system_model import draw_gaussian

logger = get_logger("analysis")

RATE_POLICIES = ("stated_bound", "even_bins")
DEFAULT_T_VALUES = (1, 2, 5, 10, 20, 50)
EXACT_EXPONENT_LIMIT = 4096
TAIL_FIT_START = 3
BOUNDED_RATIO = 1.5


def min_rate(eigs):
    """Data-rate floor: sum of log2|lambda| over the unstable eigenvalues."""
    return float(sum(math.log2(abs(value)) for value in np.atleast_1d(eigs) if abs(value) > 1.0))


def _bin_count_overhead(lam_abs, stages, epsilon, policy):
    """log2(K + 1) - stages * log2|lambda| for K = ceil(|lambda|^stages + epsilon), exactly.

    The power is carried as an exact rational so nothing overflows and the
    difference keeps full relative precision when it is tiny.
    """
    exponent = stages * math.log2(lam_abs)
    if exponent > EXACT_EXPONENT_LIMIT:
        return 0.0
    power = Fraction(lam_abs) ** stages
    count = math.ceil(power + Fraction(epsilon))
    if policy == "even_bins" and count % 2:
        count += 1
    return math.log1p(float((count + 1 - power) / power)) / math.log(2.0)


def avg_rate(eigs, T, n, epsilon, M=0, policy="even_bins"):
    """Bits per raw stage of the periodic scheme with period T * 2n and M feedback bits per period."""
    if int(T) != T or T < 1:
        raise InputError(f"T must be a positive integer, got {T!r}.")
    if M < 0:
        raise InputError(f"M must be non-negative, got {M!r}.")
    if policy not in RATE_POLICIES:
        raise InputError(f"Unknown rate policy {policy!r}; expected one of {RATE_POLICIES}.")
    stages = int(T) * 2 * int(n)
    overhead = sum(
        _bin_count_overhead(abs(value), stages, epsilon, policy)
        for value in np.atleast_1d(eigs)
        if abs(value) > 1.0
    )
    return min_rate(eigs) + (M + overhead) / stages


@dataclass(frozen=True)
class RateReport:
    R_min: float
    R_avg_of_T: dict
    sufficient_rate: Optional[float] = None
    symbol_audit: Optional[dict] = None
    epsilon: float = 0.5
    M: int = 0

    def to_frame(self):
        rows = []
        for policy, table in self.R_avg_of_T.items():
            for T, value in sorted(table.items()):
                rows.append({"policy": policy, "T": T, "R_avg": value, "excess": value - self.R_min})
        return pd.DataFrame(rows, columns=["policy", "T", "R_avg", "excess"])

    def to_dict(self):
        return {
            "R_min": self.R_min,
            "R_avg_of_T": {
                policy: {str(T): value for T, value in sorted(table.items())}
                for policy, table in self.R_avg_of_T.items()
            },
            "sufficient_rate": self.sufficient_rate,
            "symbol_audit": self.symbol_audit,
            "epsilon": self.epsilon,
            "M": self.M,
        }


def rate_report(eigs, n, epsilon, M=0, T_values=DEFAULT_T_VALUES, decomp=None, report=None):
    tables = {
        policy: {int(T): avg_rate(eigs, T, n, epsilon, M, policy) for T in T_values}
        for policy in RATE_POLICIES
    }
    return RateReport(
        R_min=min_rate(eigs),
        R_avg_of_T=tables,
        sufficient_rate=None if decomp is None else sufficient_rate(decomp),
        symbol_audit=None if report is None else symbol_audit(report),
        epsilon=float(epsilon),
        M=int(M),
    )


def gaussian_tail_bound(Sigma, Delta):
    """Upper bound on P(|X^i| > Delta^i for some i), X ~ N(0, Sigma), for Delta^i >= 1."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    Delta = np.atleast_1d(np.asarray(Delta, dtype=float))
    n = Sigma.shape[0]
    if Sigma.shape != (n, n) or Delta.shape != (n,):
        raise InputError(f"Sigma must be {Delta.shape[0]}x{Delta.shape[0]} to match Delta.")
    if np.any(Delta < 1.0):
        raise InputError("The tail bound needs every Delta^i >= 1.")
    eigenvalues = np.linalg.eigvalsh((Sigma + Sigma.T) / 2.0)
    lam_max = float(eigenvalues[-1])
    if not eigenvalues[0] > 1e-12 * max(lam_max, 1.0):
        raise InputError("Sigma is singular; the tail bound needs a positive definite covariance.")

    log_prefactor = math.log(2.0) + 0.5 * (
        (n + 1) * math.log(lam_max) - math.log(2.0 * math.pi) - float(np.sum(np.log(eigenvalues)))
    )
    return float(np.sum(np.exp(log_prefactor - Delta**2 / (2.0 * lam_max))))


def empirical_tail_probability(Sigma, Delta, samples, rng):
    """Monte Carlo estimate of the same event with its standard error."""
    X = draw_gaussian(rng, Sigma, samples)
    outside = np.any(np.abs(X) > np.asarray(Delta, dtype=float), axis=1)
    p_hat = float(np.mean(outside))
    return p_hat, math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / samples)


def _usable(reports):
    return [report for report in reports if not report.aborted]


def inter_stopping_gaps(reports):
    gaps = [np.diff(stopping_times(report)) for report in _usable(reports)]
    return np.concatenate(gaps) if gaps else np.zeros(0, dtype=np.int64)


def survival_table(gaps):
    gaps = np.asarray(gaps, dtype=np.int64)
    count = gaps.size
    k_max = int(gaps.max()) if count else 0
    ks = np.arange(0, k_max + 1)
    exceed = np.array([int(np.sum(gaps > k)) for k in ks], dtype=np.int64)
    survival = exceed / count if count else np.zeros(ks.shape)
    se = np.sqrt(survival * (1.0 - survival) / count) if count else np.zeros(ks.shape)
    return pd.DataFrame({"k": ks, "survival": survival, "se": se, "exceed": exceed})


def _fit_log_survival(gaps, H):
    """Weighted least-squares slope of log P(gap > k), or None.

    The fit uses every k >= H with P(gap > k) > 10/N. When fewer than two such
    k remain, the window starts one step below the last k with enough mass (but
    not below k = 1), so short-tailed gaps still give a two-point slope.
    Returns (slope, first k used).
    """
    count = gaps.size
    if count == 0:
        return None
    ks = np.arange(1, int(gaps.max()) + 1)
    exceed = np.array([np.sum(gaps > k) for k in ks], dtype=float)
    survival = exceed / count
    massive = ks[survival > 10.0 / count]
    if massive.size < 2:
        return None
    start = min(H, max(1, int(massive[-1]) - 1))
    keep = (ks >= start) & (survival > 10.0 / count)
    ks, exceed, survival = ks[keep], exceed[keep], survival[keep]
    weights = np.sqrt(exceed)
    design = np.column_stack([ks, np.ones_like(ks, dtype=float)]) * weights[:, None]
    coefficients, *_ = np.linalg.lstsq(design, np.log(survival) * weights, rcond=None)
    return float(coefficients[0]), start


def tail_decay_diagnostic(reports=None, gaps=None, H=TAIL_FIT_START, min_intervals=1000,
                          bootstrap=200, confidence=0.95, seed=0):
    """Survival of the gaps between stopping times and a geometric fit of its tail beyond H.

    fit_start reports where the log-survival fit actually began (see _fit_log_survival).
    """
    if gaps is None:
        gaps = inter_stopping_gaps(reports or [])
    gaps = np.asarray(gaps, dtype=np.int64)
    table = survival_table(gaps)
    result = {
        "intervals": int(gaps.size),
        "H": int(H),
        "slope": None,
        "fit_start": None,
        "ci": None,
        "mle_ratio": None,
        "verdict": "inconclusive",
    }

    fit = _fit_log_survival(gaps, H)
    if fit is not None:
        slope, result["fit_start"] = fit
        rng = np.random.default_rng(seed)
        resampled = []
        for _ in range(bootstrap):
            value = _fit_log_survival(rng.choice(gaps, size=gaps.size, replace=True), H)
            if value is not None:
                resampled.append(value[0])
        alpha = 1.0 - confidence
        if resampled:
            low, high = np.quantile(resampled, [alpha / 2.0, 1.0 - alpha / 2.0])
            result["ci"] = [float(low), float(high)]
        result["slope"] = slope

    beyond = gaps[gaps > H] - H
    if beyond.size:
        result["mle_ratio"] = float(1.0 - 1.0 / np.mean(beyond))

    if gaps.size >= min_intervals and result["ci"] is not None and result["ci"][1] < 0.0:
        result["verdict"] = "geometric"
    logger.debug("Tail diagnostic: %s", result)
    return result, table


def drift_diagnostic(reports, F, min_outside=30, max_bins=10, min_per_bin=10):
    """Empirical check of the random-time drift inequality for V = (Delta^1)^2.

    Each complete excursion between stopping times contributes
    A = sum of (Delta^1_s)^2 over the excursion and D = V(start) - V(end).
    gamma is the smallest bin-wise ratio mean(D) / mean(A) over excursions that
    start outside the small set, b the slack the inequality then needs inside it.
    """
    rows = []
    for report in _usable(reports):
        K = np.asarray(report.K, dtype=float)
        delta1 = report.deltas[:, 0]
        for start, stop in excursions(report):
            inside = bool(
                np.all(report.deltas[start] <= F) and np.all(np.abs(report.states[start]) <= K * F / 2.0)
            )
            rows.append({
                "start_delta": delta1[start],
                "A": float(np.sum(delta1[start:stop] ** 2)),
                "D": float(delta1[start] ** 2 - delta1[stop] ** 2),
                "inside": inside,
            })
    frame = pd.DataFrame(rows, columns=["start_delta", "A", "D", "inside"]).astype({"inside": bool})
    outside = frame[~frame["inside"]]
    inside = frame[frame["inside"]]

    result = {
        "F": float(F),
        "excursions": int(len(frame)),
        "outside": int(len(outside)),
        "fraction_in_S": float(frame["inside"].mean()) if len(frame) else None,
        "gamma": None,
        "b": None,
        "bin_ratios": [],
        "verdict": "inconclusive",
    }
    if len(outside):
        bins = max(1, min(max_bins, len(outside) // min_per_bin))
        labels = pd.qcut(outside["start_delta"], q=bins, labels=False, duplicates="drop")
        grouped = outside.groupby(labels)[["A", "D"]].mean()
        ratios = (grouped["D"] / grouped["A"]).tolist()
        result["bin_ratios"] = [float(value) for value in ratios]
        result["gamma"] = float(min(ratios))

    gamma = result["gamma"]
    if len(inside):
        slope = gamma if gamma is not None and gamma > 0 else 0.0
        result["b"] = float(max(0.0, slope * inside["A"].mean() - inside["D"].mean()))

    if len(outside) >= min_outside:
        result["verdict"] = "holds" if gamma > 0 else "failure"
    if result["verdict"] == "failure":
        logger.warning("Drift check failed: gamma=%.4g over %s excursions outside S.", gamma, len(outside))
    return result


def _squared_norms(report, coordinate=None):
    states = report.states if coordinate is None else report.states[:, [coordinate]]
    with np.errstate(over="ignore"):
        return np.sum(states**2, axis=1)


def moment_diagnostic(reports, coordinate=None, ratio_limit=BOUNDED_RATIO, min_trials=100):
    """E||x_s||^2 per step with standard errors and a boundedness verdict.

    Windows: mid-run [3S/8, 5S/8) against the last quarter [3S/4, S].
    """
    usable = _usable(reports)
    aborted = len(reports) - len(usable)
    result = {
        "trials": len(reports),
        "aborted": aborted,
        "coordinate": coordinate,
        "mid_mean": None,
        "last_mean": None,
        "ratio": None,
        "growth": None,
        "kappa": None,
        "verdict": "inconclusive",
    }
    if reports and aborted >= 0.5 * len(reports):
        result["verdict"] = "diverging"
    if not usable:
        return result, pd.DataFrame(columns=["step", "mean_sq_norm", "se", "trials"])

    steps = min(report.steps for report in usable)
    squared = np.array([_squared_norms(report, coordinate)[: steps + 1] for report in usable])
    with np.errstate(over="ignore", invalid="ignore"):
        mean = squared.mean(axis=0)
        se = squared.std(axis=0, ddof=1) / math.sqrt(len(usable)) if len(usable) > 1 else np.zeros(steps + 1)
    series = pd.DataFrame({"step": np.arange(steps + 1), "mean_sq_norm": mean, "se": se, "trials": len(usable)})

    mid = mean[3 * steps // 8: 5 * steps // 8]
    last = mean[3 * steps // 4: steps + 1]
    half = mean[steps // 2: steps + 1]
    if mid.size and last.size and half.size >= 4:
        with np.errstate(over="ignore", invalid="ignore"):
            result["mid_mean"] = float(mid.mean())
            result["last_mean"] = float(last.mean())
            ratio = result["last_mean"] / result["mid_mean"] if result["mid_mean"] > 0 else math.inf
            windows = [chunk.mean() for chunk in np.array_split(half, 4)]
        exploded = not np.all(np.isfinite(half))
        growth = exploded or bool(
            all(b > a for a, b in zip(windows, windows[1:])) and windows[-1] > ratio_limit * windows[0]
        )
        result["ratio"] = float(ratio)
        result["growth"] = growth
        if exploded:
            result["verdict"] = "diverging"
            logger.warning("Second moment left the floating-point range in the second half of the run.")
        elif result["verdict"] != "diverging" and len(usable) >= min_trials:
            if ratio <= ratio_limit and not growth:
                result["verdict"] = "bounded"
            elif ratio > ratio_limit and growth:
                result["verdict"] = "diverging"

    result["kappa"] = excursion_moment_ratio(usable, coordinate)
    return result, series


def excursion_moment_ratio(reports, coordinate=None):
    """kappa: mean over excursions of sum (x^i_s)^2 divided by mean (Delta^1 at the excursion start)^2."""
    column = -1 if coordinate is None else coordinate
    accumulated, starts = [], []
    for report in reports:
        for start, stop in excursions(report):
            accumulated.append(float(np.sum(report.states[start:stop, column] ** 2)))
            starts.append(float(report.deltas[start, 0] ** 2))
    if not starts or np.mean(starts) == 0.0:
        return None
    return float(np.mean(accumulated) / np.mean(starts))


def _marginal(reports, step, coordinate):
    return np.array([report.states[step, coordinate] for report in reports if report.steps >= step])


def invariant_distribution_diagnostic(reports, s1, s2, alpha=0.05):
    """Two-sample KS distance per coordinate between times s1 and s2, with an even/odd trial null at s2."""
    if not s1 < s2:
        raise InputError(f"Need s1 < s2, got s1={s1}, s2={s2}.")
    usable = [report for report in _usable(reports) if report.steps >= s2]
    if len(usable) < 4:
        raise InputError(f"Need at least 4 complete trials reaching step {s2}, got {len(usable)}.")
    n = usable[0].n
    even = [report for report in usable if report.trial % 2 == 0]
    odd = [report for report in usable if report.trial % 2 == 1]

    coordinates = []
    for i in range(n):
        across_time = ks_2samp(_marginal(usable, s1, i), _marginal(usable, s2, i))
        null = ks_2samp(_marginal(even, s2, i), _marginal(odd, s2, i))
        coordinates.append({
            "coordinate": i,
            "distance": float(across_time.statistic),
            "p_value": float(across_time.pvalue),
            "null_distance": float(null.statistic),
            "null_p_value": float(null.pvalue),
            "within_null_band": bool(across_time.pvalue >= alpha),
        })
    stationary = all(entry["within_null_band"] for entry in coordinates)
    return {
        "s1": int(s1),
        "s2": int(s2),
        "alpha": alpha,
        "trials": len(usable),
        "coordinates": coordinates,
        "verdict": "stationary" if stationary else "shifted",
    }


@dataclass(frozen=True)
class StabilityDiagnostics:
    moments: dict
    tail: dict
    drift: dict
    distribution: Optional[dict] = None
    per_coordinate_moments: list = field(default_factory=list)

    def to_dict(self):
        return {
            "moments": self.moments,
            "tail": self.tail,
            "drift": self.drift,
            "distribution": self.distribution,
            "per_coordinate_moments": self.per_coordinate_moments,
        }


def stability_diagnostics(reports, F, min_trials=100, tail_start=TAIL_FIT_START, bounded_ratio=BOUNDED_RATIO):
    """Run every diagnostic over one batch of reports; returns the verdicts and the CSV-ready series."""
    moments, moment_series = moment_diagnostic(reports, ratio_limit=bounded_ratio, min_trials=min_trials)
    tail, tail_table = tail_decay_diagnostic(reports, H=tail_start)
    drift = drift_diagnostic(reports, F)

    per_coordinate = []
    usable = _usable(reports)
    if usable and usable[0].n > 1:
        for i in range(usable[0].n):
            per_coordinate.append(
                moment_diagnostic(reports, coordinate=i, ratio_limit=bounded_ratio, min_trials=min_trials)[0]
            )

    distribution = None
    steps = min((report.steps for report in usable), default=0)
    if len(usable) >= 4 and steps >= 4:
        distribution = invariant_distribution_diagnostic(usable, steps // 2, steps)

    diagnostics = StabilityDiagnostics(
        moments=moments,
        tail=tail,
        drift=drift,
        distribution=distribution,
        per_coordinate_moments=per_coordinate,
    )
    return diagnostics, moment_series, tail_table
