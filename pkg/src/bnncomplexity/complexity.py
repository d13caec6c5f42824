"""Binarization, 4x4 block decomposition, BDM and block entropy.

The two measures share one decomposition: a binary matrix is scanned
left to right, top to bottom, into non-overlapping 4x4 blocks (partial
boundary blocks are discarded), and the multiplicity of each distinct
block code feeds both the BDM sum and the empirical block distribution.

All functions are pure and safe to evaluate in parallel across
snapshots sharing one table.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .ctm import BLOCK_SIDE, CtmTable, encode_rows
from .errors import NonFiniteWeight

log = logging.getLogger(__name__)

BlockCounts = Counter  # code -> multiplicity


def binarize(weights) -> np.ndarray:
    """Map a real matrix to bits: entries > 0 become 1, entries <= 0 become 0."""
    arr = np.asarray(weights, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteWeight("weight matrix contains NaN or infinite entries")
    return (arr > 0).astype(np.uint8)


def partition_blocks(matrix) -> Counter:
    """Count the complete 4x4 blocks of a binary matrix by packed code.

    Scans the floor(rows/4) x floor(cols/4) grid of complete blocks;
    boundary leftovers are dropped.  A matrix smaller than 4x4 yields an
    empty counter.
    """
    m = np.ascontiguousarray(matrix, dtype=np.uint8)
    rows, cols = m.shape
    br, bc = rows // BLOCK_SIDE, cols // BLOCK_SIDE
    if br == 0 or bc == 0:
        return Counter()
    discarded = rows * cols - br * bc * BLOCK_SIDE * BLOCK_SIDE
    if discarded:
        log.debug("partition %dx%d: %d boundary cells discarded", rows, cols, discarded)
    core = m[: br * BLOCK_SIDE, : bc * BLOCK_SIDE]
    blocks = (
        core.reshape(br, BLOCK_SIDE, bc, BLOCK_SIDE)
        .transpose(0, 2, 1, 3)
        .reshape(-1, BLOCK_SIDE * BLOCK_SIDE)
    )
    codes, counts = np.unique(encode_rows(blocks), return_counts=True)
    return Counter(dict(zip(codes.tolist(), counts.tolist())))


def bdm(counts, table: CtmTable) -> float:
    """BDM in bits: sum over distinct blocks of log2(multiplicity) + table value."""
    if not counts:
        return 0.0
    codes = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
    mult = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
    return float(np.sum(np.log2(mult) + table.lookup(codes)))


def block_entropy(counts) -> float:
    """Shannon entropy in bits of the empirical block distribution.

    Empty counts and single-pattern partitions both give 0.
    """
    if not counts:
        return 0.0
    mult = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
    p = mult / mult.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0  # +0.0 folds -0.0


@dataclass(frozen=True)
class ComplexityReading:
    """Network-level BDM and entropy plus the per-matrix breakdown."""

    bdm_bits: float
    entropy_bits: float
    block_total: int
    per_matrix: tuple = field(default=(), compare=False)  # (matrix_id, bdm, entropy)


def measure_matrix(weights, table: CtmTable) -> tuple[float, float, int]:
    """(bdm, entropy, complete-block count) of one real weight matrix."""
    counts = partition_blocks(binarize(weights))
    return bdm(counts, table), block_entropy(counts), sum(counts.values())


def measure_network(weight_matrices, table: CtmTable) -> ComplexityReading:
    """Measure a list of linear-layer weight matrices and sum the results.

    Each matrix is binarized and measured independently (per-matrix
    block distributions); batch-norm parameters and bias vectors must
    not be passed in.
    """
    per_matrix = []
    total_bdm = 0.0
    total_ent = 0.0
    total_blocks = 0
    for idx, w in enumerate(weight_matrices):
        b, e, n = measure_matrix(w, table)
        per_matrix.append((idx, b, e))
        total_bdm += b
        total_ent += e
        total_blocks += n
    return ComplexityReading(
        bdm_bits=total_bdm,
        entropy_bits=total_ent,
        block_total=total_blocks,
        per_matrix=tuple(per_matrix),
    )
