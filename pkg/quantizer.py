"""Adaptive uniform quantizer with zoom-in / zoom-out bin updates.

A component quantizer with K granular bins of width delta covers
[-K delta / 2, K delta / 2]. Symbols 1..K name the granular bins, K + 1 is the
overflow symbol. A vector of components is sent as one mixed-radix symbol,
with 0 reserved for "some component overflowed".
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from errors import ConfigurationError, InputError
from logging_setup import get_logger

logger = get_logger("quantizer")

LATTICE_MAX_RELATIVE_CHANGE = 0.10
ORDERING_RTOL = 1e-9


def _require_even_count(K):
    if int(K) != K or K < 2 or int(K) % 2:
        raise InputError(f"Bin count K must be an even integer >= 2, got {K!r}.")
    return int(K)


def _require_positive_delta(delta):
    if not delta > 0 or not math.isfinite(delta):
        raise InputError(f"Bin size must be positive and finite, got {delta!r}.")


@dataclass(frozen=True)
class ScalarQuantizerConfig:
    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2 or int(self.K) % 2:
            raise ConfigurationError(f"K must be an even integer >= 2, got {self.K!r}.")
        object.__setattr__(self, "K", int(self.K))


def even_bin_count(value):
    """ceil(value), bumped to the next even integer when odd."""
    count = max(int(math.ceil(value)), 2)
    return count + 1 if count % 2 else count


def choose_bin_counts(sampled_abs_eigs, epsilon):
    """K_i = ceil(|lambda_i| + epsilon) forced even, for already-sampled eigenvalue magnitudes."""
    return np.array([even_bin_count(value + epsilon) for value in np.atleast_1d(sampled_abs_eigs)], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class ZoomParams:
    rho: float = 1.5
    epsilon: float = 0.5
    eta: float = 0.25
    delta: float = 0.5
    c: float = 1.0
    L: Optional[np.ndarray] = None
    ell: Optional[float] = None
    grow_exponent: Optional[int] = None
    shrink_exponent: Optional[int] = None

    def __post_init__(self):
        if not self.rho > 1:
            raise ConfigurationError(f"rho must be > 1, got {self.rho}.")
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}.")
        if not 0 < self.eta < self.epsilon:
            raise ConfigurationError(f"eta must lie in (0, epsilon={self.epsilon}), got {self.eta}.")
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be > 0, got {self.delta}.")
        if not 0 < self.c <= 1:
            raise ConfigurationError(f"c must lie in (0, 1], got {self.c}.")
        if self.L is not None:
            L = np.atleast_1d(np.asarray(self.L, dtype=float))
            if np.any(L <= 0):
                raise ConfigurationError("Every lower threshold L^i must be positive.")
            object.__setattr__(self, "L", L)

    @property
    def on_lattice(self):
        return self.ell is not None

    def grow_factor(self, lam_abs):
        return self.rho * np.asarray(lam_abs, dtype=float)

    def shrink_factor(self, lam_abs):
        lam_abs = np.asarray(lam_abs, dtype=float)
        return lam_abs / (lam_abs + self.epsilon - self.eta)

    def floor(self, L, lam_abs):
        """L-bar: the smallest bin size reachable from a threshold L."""
        return np.asarray(L, dtype=float) * self.shrink_factor(lam_abs)

    def to_dict(self):
        payload = {
            "rho": self.rho,
            "epsilon": self.epsilon,
            "eta": self.eta,
            "delta": self.delta,
            "c": self.c,
        }
        if self.L is not None:
            payload["L"] = [float(value) for value in self.L]
        if self.on_lattice:
            payload["lattice"] = {
                "ell": self.ell,
                "grow_exponent": self.grow_exponent,
                "shrink_exponent": self.shrink_exponent,
            }
        return payload


@dataclass(frozen=True, eq=False)
class BinState:
    delta: np.ndarray
    L: Optional[np.ndarray] = None
    lattice_exponents: Optional[np.ndarray] = None

    def __post_init__(self):
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if np.any(~(delta > 0)):
            raise InputError("Every bin size must be positive.")
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        if self.L is not None:
            L = np.broadcast_to(np.asarray(self.L, dtype=float), delta.shape).copy()
            L.setflags(write=False)
            object.__setattr__(self, "L", L)
        if self.lattice_exponents is not None:
            exponents = np.asarray(self.lattice_exponents, dtype=np.int64).copy()
            exponents.setflags(write=False)
            object.__setattr__(self, "lattice_exponents", exponents)

    @property
    def n(self):
        return self.delta.shape[0]


def scalar_encode(x, delta, K):
    x = float(x)
    if math.isnan(x):
        raise InputError("Cannot quantize NaN.")
    _require_positive_delta(delta)
    K = _require_even_count(K)
    half = K // 2
    bound = half * delta
    if abs(x) > bound:
        return K + 1
    if x == bound:
        return K

    k = min(max(int(math.floor(x / delta)) + half + 1, 1), K)
    # floor(x / delta) can land one bin off when the division rounds
    while k > 1 and x < (k - 1 - half) * delta:
        k -= 1
    while k < K and x >= (k - half) * delta:
        k += 1
    return k


def scalar_decode(k, delta, K):
    _require_positive_delta(delta)
    K = _require_even_count(K)
    if int(k) != k or not 1 <= k <= K + 1:
        raise InputError(f"Symbol {k!r} is outside 1..{K + 1}.")
    if k == K + 1:
        return 0.0
    return (int(k) - (K + 1) / 2.0) * delta


def encode_components(y, delta, K):
    """Vectorized scalar_encode with the same half-open bin boundaries."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    delta = np.broadcast_to(np.asarray(delta, dtype=float), y.shape)
    K = np.broadcast_to(np.asarray(K, dtype=np.int64), y.shape)
    if np.any(np.isnan(y)):
        raise InputError("Cannot quantize NaN.")
    if np.any(~(delta > 0)):
        raise InputError("Every bin size must be positive.")

    half = K // 2
    bound = half * delta
    with np.errstate(over="ignore", invalid="ignore"):
        raw = np.floor(y / delta)
    raw = np.clip(np.nan_to_num(raw, posinf=0.0, neginf=0.0), -K - 1, K + 1).astype(np.int64)
    k = np.clip(raw + half + 1, 1, K)
    k = np.where((k > 1) & (y < (k - 1 - half) * delta), k - 1, k)
    k = np.where((k < K) & (y >= (k - half) * delta), k + 1, k)
    k = np.where(y == bound, K, k)
    return np.where(np.abs(y) > bound, K + 1, k)


def decode_components(k, delta, K):
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    delta = np.broadcast_to(np.asarray(delta, dtype=float), k.shape)
    K = np.broadcast_to(np.asarray(K, dtype=np.int64), k.shape)
    if np.any((k < 1) | (k > K + 1)):
        raise InputError("Component symbol out of range.")
    midpoints = (k - (K + 1) / 2.0) * delta
    return np.where(k == K + 1, 0.0, midpoints)


def alphabet_size(K_per_component):
    """Number of non-overflow vector symbols, prod K_i, as an exact integer."""
    size = 1
    for K in np.atleast_1d(K_per_component):
        size *= int(K)
    return size


def mixed_radix(digits, K_per_component):
    index = 0
    for digit, K in zip(digits, K_per_component):
        index = index * int(K) + (int(digit) - 1)
    return index + 1


def split_mixed_radix(q, K_per_component):
    remainder = int(q) - 1
    digits = []
    for K in reversed(list(K_per_component)):
        digits.append(remainder % int(K) + 1)
        remainder //= int(K)
    return digits[::-1]


def vector_encode(y, bins, K_per_component):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    K = np.atleast_1d(np.asarray(K_per_component, dtype=np.int64))
    if not y.shape == bins.delta.shape == K.shape:
        raise InputError(
            f"Component counts differ: y {y.shape}, bins {bins.delta.shape}, K {K.shape}."
        )
    components = encode_components(y, bins.delta, K)
    if np.any(components == K + 1):
        return 0
    return mixed_radix(components, K)


def vector_decode(q, bins, K_per_component):
    K = np.atleast_1d(np.asarray(K_per_component, dtype=np.int64))
    if K.shape != bins.delta.shape:
        raise InputError(f"Component counts differ: bins {bins.delta.shape}, K {K.shape}.")
    if int(q) != q or not 0 <= q <= alphabet_size(K):
        raise InputError(f"Vector symbol {q!r} is outside 0..{alphabet_size(K)}.")
    if q == 0:
        return np.zeros(K.shape[0])
    return decode_components(split_mixed_radix(q, K), bins.delta, K)


def update_bins(q, bins, zoom, lam_abs):
    """Zoom out by rho|lambda| after an overflow, otherwise shrink towards the floor L."""
    delta = bins.delta
    lam = np.broadcast_to(np.asarray(lam_abs, dtype=float), delta.shape)
    if np.any(lam <= 1.0):
        raise InputError("update_bins needs |lambda| > 1 for every component.")
    L = bins.L if bins.L is not None else zoom.L
    if L is None:
        raise ConfigurationError("No lower threshold L: initialize bins with init_bins first.")

    if bins.lattice_exponents is not None and zoom.on_lattice:
        exponents = bins.lattice_exponents
        if q == 0:
            exponents = exponents + zoom.grow_exponent
        else:
            exponents = np.where(delta <= L, exponents, exponents - zoom.shrink_exponent)
        return BinState(delta=2.0 ** (zoom.ell * exponents), L=L, lattice_exponents=exponents)

    if q == 0:
        new_delta = delta * zoom.grow_factor(lam)
    else:
        new_delta = np.where(delta <= L, delta, delta * zoom.shrink_factor(lam))
    return BinState(delta=new_delta, L=L)


def _rungs(size, mode):
    if mode == "real":
        return np.arange(size)
    if mode == "complex":
        if size % 2:
            raise InputError(f"Complex mode needs an even number of components, got {size}.")
        return np.arange(size) // 2
    raise InputError(f"Unknown bin-ordering mode {mode!r}.")


def init_bins(delta1_0, n, mode, zoom):
    if not delta1_0 > 0:
        raise InputError(f"Initial bin size must be positive, got {delta1_0}.")
    delta = float(delta1_0) * zoom.delta ** _rungs(n, mode)
    L = zoom.L if zoom.L is not None else zoom.c * delta
    return BinState(delta=delta, L=L)


def _snap_up(value, ell):
    return ell * math.ceil(math.log2(value) / ell - 1e-12)


def _snap_down(value, ell):
    return ell * math.floor(math.log2(value) / ell + 1e-12)


def init_bins_for_blocks(blocks, required, zoom):
    """Initial bins for a state made of Jordan blocks.

    blocks: objects with start, size and kind ("real" or "complex").
    required: per-component minimum initial bin size; the top rung of each block
    is raised until every rung of the ladder meets it.
    """
    required = np.atleast_1d(np.asarray(required, dtype=float))
    n = required.shape[0]
    delta = np.empty(n)
    for block in blocks:
        span = slice(block.start, block.start + block.size)
        rungs = _rungs(block.size, block.kind)
        top = float(np.max(required[span] / zoom.delta ** rungs))
        if zoom.on_lattice:
            top = 2.0 ** _snap_up(top, zoom.ell)
            for _ in range(64):
                ladder = np.array([2.0 ** _snap_down(top * zoom.delta ** r, zoom.ell) for r in rungs])
                if np.all(ladder >= required[span]):
                    break
                top *= 2.0 ** zoom.ell
            delta[span] = ladder
        else:
            delta[span] = top * zoom.delta ** rungs

    L = zoom.L if zoom.L is not None else zoom.c * delta
    exponents = None
    if zoom.on_lattice:
        exponents = np.rint(np.log2(delta) / zoom.ell).astype(np.int64)
        delta = 2.0 ** (zoom.ell * exponents)
    return BinState(delta=delta, L=L, lattice_exponents=exponents)


def check_bin_ordering(bins, blocks, ratio, rtol=ORDERING_RTOL):
    """True when every block keeps its ladder (real) or equal-pair ladder (complex)."""
    delta = bins.delta
    for block in blocks:
        values = delta[block.start:block.start + block.size]
        if block.kind == "complex":
            pairs = values.reshape(-1, 2)
            if not np.allclose(pairs[:, 0], pairs[:, 1], rtol=rtol, atol=0.0):
                return False
            values = pairs[:, 0]
        if np.any(values[1:] > ratio * values[:-1] * (1 + rtol)):
            return False
    return True


def snap_to_lattice(zoom, lam_abs, ell):
    """Move rho and the shrink factor onto powers of 2^ell with coprime exponents.

    epsilon and eta keep their ratio; every parameter may move by at most 10%.
    """
    if not ell > 0:
        raise InputError(f"Lattice step ell must be positive, got {ell}.")
    lam_abs = float(lam_abs)
    grow = math.log2(zoom.rho * lam_abs) / ell
    shrink = -math.log2(lam_abs / (lam_abs + zoom.epsilon - zoom.eta)) / ell

    a0, b0 = round(grow), round(shrink)
    if (
        a0 >= 1
        and b0 >= 1
        and abs(grow - a0) < 1e-9
        and abs(shrink - b0) < 1e-9
        and math.gcd(a0, b0) == 1
    ):
        return replace(zoom, ell=ell, grow_exponent=a0, shrink_exponent=b0)

    ratio = zoom.eta / zoom.epsilon
    best = None
    for a in range(max(1, a0 - 2), max(1, a0) + 3):
        for b in range(max(1, b0 - 2), max(1, b0) + 3):
            if math.gcd(a, b) != 1:
                continue
            rho = 2.0 ** (a * ell) / lam_abs
            gap = lam_abs * (2.0 ** (b * ell) - 1.0)
            epsilon = gap / (1.0 - ratio)
            eta = ratio * epsilon
            if rho <= 1.0:
                continue
            changes = (
                abs(rho - zoom.rho) / zoom.rho,
                abs(epsilon - zoom.epsilon) / zoom.epsilon,
                abs(eta - zoom.eta) / zoom.eta,
            )
            if max(changes) > LATTICE_MAX_RELATIVE_CHANGE + 1e-12:
                continue
            candidate = (sum(changes), a, b, rho, epsilon, eta)
            if best is None or candidate[:3] < best[:3]:
                best = candidate

    if best is None:
        raise ConfigurationError(
            f"No lattice with step {ell} keeps rho, epsilon and eta within "
            f"{LATTICE_MAX_RELATIVE_CHANGE:.0%} of ({zoom.rho}, {zoom.epsilon}, {zoom.eta})."
        )
    _, a, b, rho, epsilon, eta = best
    logger.info(
        "Snapped zoom parameters to lattice ell=%s: rho %.6g -> %.6g, epsilon %.6g -> %.6g, eta %.6g -> %.6g.",
        ell, zoom.rho, rho, zoom.epsilon, epsilon, zoom.eta, eta,
    )
    return replace(
        zoom, rho=rho, epsilon=epsilon, eta=eta, ell=ell, grow_exponent=a, shrink_exponent=b
    )
