"""Decentralized observability: block decomposition across sensors and eigenspace assignment.

Blocks are listed top to bottom. With sensor order (o_1, ..., o_M) the first
sensor processed owns the bottom block and the last one the top block, so the
transformed dynamics are block upper triangular: a block can only be driven by
the blocks below it.
"""

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import block_diag

from errors import ConfigurationError, InputError, StructuralError
from logging_setup import get_logger
from system_model import RANK_TOLERANCE, numerical_rank, observability_matrix, sort_eigenvalues
from transforms import coefficient_map, to_real_jordan

logger = get_logger("decomposition")

STRUCTURE_TOLERANCE = 1e-9
CONTAINMENT_TOLERANCE = 1e-9
MAX_ORDER_SEARCH_SENSORS = 6


def _orthonormal_rows(matrix, tol=RANK_TOLERANCE):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return np.zeros((0, matrix.shape[1]))
    _, singular_values, vt = np.linalg.svd(matrix, full_matrices=False)
    if singular_values.size == 0 or singular_values[0] == 0.0:
        return np.zeros((0, matrix.shape[1]))
    rank = int(np.sum(singular_values > tol * singular_values[0]))
    return vt[:rank]


def _fix_sign(rows):
    for row in rows:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return rows


def _new_rows_orthonormal(O_j, span):
    """Rows inside rowspace(O_j) that extend span, chosen from the part of O_j orthogonal to it."""
    U = _orthonormal_rows(O_j)
    if span.shape[0] == 0:
        return _fix_sign(U.copy())
    S = _orthonormal_rows(span)
    residual = U - (U @ S.T) @ S
    if not np.any(residual):
        return np.zeros((0, O_j.shape[1]))
    left, singular_values, _ = np.linalg.svd(residual, full_matrices=False)
    keep = singular_values > RANK_TOLERANCE
    return _fix_sign(left[:, keep].T @ U)


def _new_rows_literal(O_j, span):
    rows = []
    rank = numerical_rank(span) if span.shape[0] else 0
    current = span
    for row in O_j:
        candidate = np.vstack([current, row])
        if numerical_rank(candidate) > rank:
            rows.append(row)
            current = candidate
            rank += 1
    return np.array(rows).reshape(-1, O_j.shape[1])


@dataclass(frozen=True, eq=False)
class BlockDecomposition:
    Q: np.ndarray
    sensor_order: tuple
    block_sensors: tuple
    block_dims: tuple
    A_bar: np.ndarray
    C_bars: tuple
    block_eigs: tuple
    basis: str = "orthonormal"

    @property
    def block_slices(self):
        slices = []
        start = 0
        for size in self.block_dims:
            slices.append(slice(start, start + size))
            start += size
        return slices

    def coupling(self, upper, lower):
        """Norm of the block through which block `lower` drives block `upper` (top-to-bottom indices)."""
        slices = self.block_slices
        return float(np.linalg.norm(self.A_bar[slices[upper], slices[lower]]))

    def to_dict(self):
        def pairs(values):
            return [[float(value.real), float(value.imag)] for value in values]

        return {
            "sensor_order": list(self.sensor_order),
            "basis": self.basis,
            "block_sensors": list(self.block_sensors),
            "block_dims": list(self.block_dims),
            "block_eigs": [pairs(eigs) for eigs in self.block_eigs],
            "Q": self.Q.tolist(),
            "A_bar": self.A_bar.tolist(),
            "C_bars": [C.tolist() for C in self.C_bars],
        }


def _below_block_norm(matrix, row_slices, col_slices):
    worst = 0.0
    for r, rows in enumerate(row_slices):
        for c, cols in enumerate(col_slices):
            if c < r and rows.stop > rows.start and cols.stop > cols.start:
                worst = max(worst, float(np.max(np.abs(matrix[rows, cols]))))
    return worst


def build_block_decomposition(sys, sensor_order=None, basis="orthonormal"):
    M = sys.num_sensors
    order = tuple(range(1, M + 1)) if sensor_order is None else tuple(int(j) for j in sensor_order)
    if sorted(order) != list(range(1, M + 1)):
        raise InputError(f"sensor_order must be a permutation of 1..{M}, got {list(order)}.")
    if basis not in ("orthonormal", "rows"):
        raise InputError(f"Unknown decomposition basis {basis!r}; expected 'orthonormal' or 'rows'.")
    if numerical_rank(observability_matrix(sys.stacked_sensor, sys.A)) < sys.n:
        raise StructuralError("The stacked sensors are not jointly observable; no decomposition exists.")

    n = sys.n
    span = np.zeros((0, n))
    per_sensor = {}
    for j in order:
        O_j = observability_matrix(sys.sensor(j), sys.A)
        if basis == "orthonormal":
            rows = _new_rows_orthonormal(O_j, span)
        else:
            rows = _new_rows_literal(O_j, span)
        per_sensor[j] = rows
        span = np.vstack([span, rows])

    top_to_bottom = order[::-1]
    Q = np.vstack([per_sensor[j] for j in top_to_bottom])
    if Q.shape[0] != n or numerical_rank(Q) < n:
        raise StructuralError("Observable subspaces did not add up to the full state space.")

    Q_inv = np.linalg.inv(Q)
    A_bar = Q @ sys.A @ Q_inv
    C_bars = tuple(C @ Q_inv for C in sys.sensors)
    dims = tuple(per_sensor[j].shape[0] for j in top_to_bottom)

    decomp = BlockDecomposition(
        Q=Q,
        sensor_order=order,
        block_sensors=top_to_bottom,
        block_dims=dims,
        A_bar=A_bar,
        C_bars=C_bars,
        block_eigs=(),
        basis=basis,
    )
    slices = decomp.block_slices
    block_eigs = tuple(
        tuple(sort_eigenvalues(np.linalg.eigvals(A_bar[s, s]))) if s.stop > s.start else ()
        for s in slices
    )
    decomp = replace(decomp, block_eigs=block_eigs)

    verify_block_structure(decomp)
    logger.debug("Block decomposition for order %s: dims %s", order, dims)
    return decomp


def verify_block_structure(decomp, tol=STRUCTURE_TOLERANCE):
    """Raise StructuralError unless A_bar and the stacked C_bar are block upper triangular."""
    slices = decomp.block_slices
    scale = max(1.0, float(np.max(np.abs(decomp.A_bar))))
    if _below_block_norm(decomp.A_bar, slices, slices) > tol * scale:
        raise StructuralError("Transformed dynamics are not block upper triangular.")

    stacked = np.vstack([decomp.C_bars[j - 1] for j in decomp.block_sensors])
    row_slices = []
    start = 0
    for j in decomp.block_sensors:
        size = decomp.C_bars[j - 1].shape[0]
        row_slices.append(slice(start, start + size))
        start += size
    c_scale = max(1.0, float(np.max(np.abs(stacked))))
    if _below_block_norm(stacked, row_slices, slices) > tol * c_scale:
        raise StructuralError("Transformed sensor matrices do not have the triangular pattern.")
    return True


def _coupled_below(decomp, tol=STRUCTURE_TOLERANCE):
    """For each block, the set of lower blocks that drive it directly or through other blocks."""
    count = len(decomp.block_dims)
    scale = max(1.0, float(np.max(np.abs(decomp.A_bar))))
    reach = [set() for _ in range(count)]
    for upper in range(count - 1, -1, -1):
        for lower in range(upper + 1, count):
            if decomp.block_dims[lower] and decomp.coupling(upper, lower) > tol * scale:
                reach[upper].add(lower)
                reach[upper] |= reach[lower]
    return reach


def sufficient_rate(decomp, account_coupling=True):
    """Bits per stage: sum over modes of log2 of the largest magnitude the mode's block must absorb.

    Each mode is charged max(|lambda|, magnitudes of the lower blocks that drive its block).
    With account_coupling=False every lower block counts, coupled or not.
    """
    count = len(decomp.block_dims)
    if account_coupling:
        drivers = _coupled_below(decomp)
    else:
        drivers = [set(range(upper + 1, count)) for upper in range(count)]

    total = 0.0
    for block, eigs in enumerate(decomp.block_eigs):
        lower_max = max((abs(value) for b in drivers[block] for value in decomp.block_eigs[b]), default=0.0)
        for value in eigs:
            effective = max(abs(value), lower_max)
            if effective > 1.0:
                total += math.log2(effective)
    return total


def check_decreasing_order(decomp, rtol=1e-9):
    """True when every lower block's magnitudes are <= every upper block's (non-strict)."""
    eigs = [eigs for eigs in decomp.block_eigs if len(eigs)]
    for upper, lower in itertools.combinations(range(len(eigs)), 2):
        if max(abs(v) for v in eigs[lower]) > min(abs(v) for v in eigs[upper]) * (1 + rtol):
            return False
    return True


def find_decreasing_order(sys, basis="orthonormal"):
    if sys.num_sensors > MAX_ORDER_SEARCH_SENSORS:
        raise ConfigurationError(
            f"Order search is limited to {MAX_ORDER_SEARCH_SENSORS} sensors, got {sys.num_sensors}."
        )
    for order in itertools.permutations(range(1, sys.num_sensors + 1)):
        decomp = build_block_decomposition(sys, order, basis=basis)
        if check_decreasing_order(decomp):
            logger.info("Sensor order %s gives decreasing block magnitudes.", list(order))
            return decomp
    return None


@dataclass(frozen=True, eq=False)
class EigenspaceAssignment:
    assignments: tuple
    Q: np.ndarray
    blocks: tuple
    owners: tuple
    coefficient_maps: tuple
    source: str = "eigenspace"
    satisfied = True

    def to_dict(self):
        return {
            "satisfied": True,
            "source": self.source,
            "assignments": [[block, sensor] for block, sensor in self.assignments],
            "owners": list(self.owners),
            "blocks": [block.to_dict() for block in self.blocks],
            "Q": self.Q.tolist(),
        }


@dataclass(frozen=True)
class EigenspaceViolation:
    unassigned: tuple
    blocks: tuple
    satisfied = False

    def to_dict(self):
        return {
            "satisfied": False,
            "unassigned_blocks": list(self.unassigned),
            "blocks": [block.to_dict() for block in self.blocks],
        }


def in_row_space(rows, O, tol=CONTAINMENT_TOLERANCE):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    weights, *_ = np.linalg.lstsq(O.T, rows.T, rcond=None)
    residual = np.linalg.norm(weights.T @ O - rows)
    return residual <= tol * max(np.linalg.norm(rows), np.finfo(float).tiny)


def check_eigenspace_assumption(sys, transform=None):
    """Assign every Jordan block to the first sensor whose observable subspace contains it."""
    P, _, blocks = to_real_jordan(sys.A, transform)
    observability = [observability_matrix(C, sys.A) for C in sys.sensors]

    owner_of_block = []
    unassigned = []
    for index, block in enumerate(blocks):
        rows = P[block.start:block.stop]
        owner = next(
            (j for j, O_j in enumerate(observability, start=1) if in_row_space(rows, O_j)),
            None,
        )
        owner_of_block.append(owner)
        if owner is None:
            unassigned.append(index)

    if unassigned:
        logger.info("Eigenspace assumption fails for blocks %s.", unassigned)
        return EigenspaceViolation(unassigned=tuple(unassigned), blocks=tuple(blocks))

    ordering = sorted(range(len(blocks)), key=lambda i: (-owner_of_block[i], i))
    Q_rows, new_blocks, owners, maps = [], [], [], []
    for index in ordering:
        block = blocks[index]
        j = owner_of_block[index]
        rows = P[block.start:block.stop]
        new_blocks.append(replace(block, start=len(owners)))
        owners.extend([j] * block.size)
        Q_rows.append(rows)
        maps.append(coefficient_map(rows, observability[j - 1], "lsq"))

    return EigenspaceAssignment(
        assignments=tuple((index, owner_of_block[index]) for index in range(len(blocks))),
        Q=np.vstack(Q_rows),
        blocks=tuple(new_blocks),
        owners=tuple(owners),
        coefficient_maps=tuple(maps),
    )


def assignment_from_decomposition(sys, decomp):
    """Owner-per-coordinate transform from a block decomposition, with each diagonal block in real Jordan form."""
    transforms = []
    blocks, owners, maps = [], [], []
    assignments = []
    for index, (s, j) in enumerate(zip(decomp.block_slices, decomp.block_sensors)):
        if s.stop == s.start:
            continue
        P_j, _, local_blocks = to_real_jordan(decomp.A_bar[s, s])
        transforms.append(P_j)
        rows = P_j @ decomp.Q[s]
        maps.append(coefficient_map(rows, observability_matrix(sys.sensor(j), sys.A), "lsq"))
        for block in local_blocks:
            blocks.append(replace(block, start=block.start + s.start))
            assignments.append((len(blocks) - 1, j))
        owners.extend([j] * (s.stop - s.start))

    Q = block_diag(*transforms) @ decomp.Q
    return EigenspaceAssignment(
        assignments=tuple(assignments),
        Q=Q,
        blocks=tuple(blocks),
        owners=tuple(owners),
        coefficient_maps=tuple(maps),
        source="ordered_decomposition",
    )
