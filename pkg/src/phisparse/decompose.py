"""Two-level decomposition of binary activations.

Every (row, partition) segment is either assigned the pattern at minimum
Hamming distance (level 1, stored as a pattern ID) with a ternary
correction (level 2), or left unassigned with the segment itself as its
level-2 row. A pattern is only used when it strictly beats the segment's
own popcount; ties between patterns go to the lowest ID.

Index file ``PHII`` (little-endian): magic, M:u32, P:u32, q:u32, then M*P
IDs row-major as u8 when q <= 255, else u16.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .binmat import (
    BitMatrix,
    FormatError,
    TernaryMatrix,
    TileSpec,
    all_tile_codes,
    bits_to_codes,
    codes_to_bits,
)
from .calibration import PatternSet

MAGIC_INDEX = b"PHII"
_HEADER = struct.Struct("<III")

# rows per chunk when materializing (rows x q) distance tables
_CHUNK = 8192


class CorruptionError(ValueError):
    """Level-1 and level-2 matrices do not sum to a binary matrix."""

    def __init__(self, msg, coords=None):
        super().__init__(msg)
        self.coords = coords


@dataclass(frozen=True, eq=False)
class L1IndexMatrix:
    """(M, P) pattern IDs; 0 means no pattern."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ValueError("index matrix must be 2-D")
        if ids.size and ids.min() < 0:
            raise ValueError("pattern IDs are non-negative")
        ids = ids.astype(np.int32)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    @property
    def rows(self) -> int:
        return self.ids.shape[0]

    @property
    def partitions(self) -> int:
        return self.ids.shape[1]

    def nnz(self) -> int:
        return int(np.count_nonzero(self.ids))

    def __eq__(self, other):
        if not isinstance(other, L1IndexMatrix):
            return NotImplemented
        return np.array_equal(self.ids, other.ids)


def _match_codes(codes: np.ndarray, patterns: np.ndarray):
    """Vectorized assignment for one partition.

    Returns (ids, pos, neg) where pos/neg are codes of the +1/-1 corrections.
    """
    ids = np.zeros(codes.size, dtype=np.int32)
    assigned = np.zeros(codes.size, dtype=np.uint64)
    if patterns.size:
        for lo in range(0, codes.size, _CHUNK):
            c = codes[lo:lo + _CHUNK]
            dist = np.bitwise_count(c[:, None] ^ patterns[None, :])
            best = np.argmin(dist, axis=1)
            use = dist[np.arange(c.size), best] < np.bitwise_count(c)
            ids[lo:lo + _CHUNK] = np.where(use, best + 1, 0)
            assigned[lo:lo + _CHUNK] = np.where(use, patterns[best], np.uint64(0))
    pos = codes & ~assigned
    neg = assigned & ~codes
    return ids, pos, neg


def match_row(row, patterns: PatternSet) -> tuple[int, np.ndarray]:
    """Best pattern ID for one segment and its ternary correction row."""
    row = np.asarray(row, dtype=np.uint8)
    if row.shape != (patterns.k,):
        raise ValueError(f"row length {row.shape} does not match k={patterns.k}")
    ids, pos, neg = _match_codes(bits_to_codes(row[None, :]), patterns.codes)
    l2 = codes_to_bits(pos, patterns.k)[0].astype(np.int8) - codes_to_bits(neg, patterns.k)[0]
    return int(ids[0]), l2.astype(np.int8)


def _check_sets(sets: Sequence[PatternSet], parts: int, k: int):
    if len(sets) != parts:
        raise ValueError(f"expected {parts} pattern sets, got {len(sets)}")
    for j, s in enumerate(sets):
        if s.k != k:
            raise ValueError(f"pattern set {j} has k={s.k}, tiling uses k={k}")


def decompose(
    a: BitMatrix, sets: Sequence[PatternSet], spec: TileSpec
) -> tuple[L1IndexMatrix, TernaryMatrix]:
    k = spec.k
    parts = spec.partitions(a.cols)
    _check_sets(sets, parts, k)
    tail = parts * k - a.cols
    if tail and parts and len(sets[-1].codes):
        live = np.uint64((1 << (k - tail)) - 1)
        if np.any(sets[-1].codes & ~live):
            raise ValueError("last partition has patterns with bits in the zero-padded columns")
    codes = all_tile_codes(a, k)
    ids = np.zeros((a.rows, parts), dtype=np.int32)
    l2 = np.zeros((a.rows, parts * k), dtype=np.int8)
    for j, s in enumerate(sets):
        ids[:, j], pos, neg = _match_codes(codes[:, j], s.codes)
        l2[:, j * k:(j + 1) * k] = codes_to_bits(pos, k).astype(np.int8) - codes_to_bits(neg, k)
    return L1IndexMatrix(ids), TernaryMatrix(l2[:, : a.cols])


def expand_l1(l1: L1IndexMatrix, sets: Sequence[PatternSet], k: int) -> np.ndarray:
    """(M, P*k) uint8 matrix of the pattern bits selected by each ID."""
    m, parts = l1.ids.shape
    _check_sets(sets, parts, k)
    out = np.zeros((m, parts * k), dtype=np.uint8)
    for j, s in enumerate(sets):
        col = l1.ids[:, j]
        if col.size and col.max() > s.q:
            bad = int(np.flatnonzero(col > s.q)[0])
            raise KeyError(f"row {bad}, partition {j}: pattern id {col[bad]} not in 1..{s.q}")
        table = np.zeros((s.q + 1, k), dtype=np.uint8)
        table[1:] = s.bits
        out[:, j * k:(j + 1) * k] = table[col]
    return out


def reconstruct(l1: L1IndexMatrix, sets: Sequence[PatternSet], l2: TernaryMatrix) -> BitMatrix:
    """Expanded level 1 plus level 2; raises CorruptionError on any entry outside {0, 1}."""
    if l1.rows != l2.rows:
        raise ValueError("level 1 and level 2 row counts differ")
    k = sets[0].k if sets else 0
    if not sets or -(-l2.cols // k) != l1.partitions:
        raise ValueError("level 2 width does not match the partition count")
    full = expand_l1(l1, sets, k).astype(np.int16)
    full[:, : l2.cols] += l2.values
    bad = np.argwhere((full < 0) | (full > 1))
    if bad.size:
        r, c = (int(x) for x in bad[0])
        raise CorruptionError(f"entry ({r}, {c}) reconstructs to {full[r, c]}", coords=(r, c))
    if np.any(full[:, l2.cols:]):
        r, c = (int(x) for x in np.argwhere(full[:, l2.cols:])[0])
        raise CorruptionError(f"padding column {l2.cols + c} of row {r} is nonzero",
                              coords=(r, l2.cols + c))
    return BitMatrix.from_dense(full[:, : l2.cols].astype(np.uint8))


@dataclass(frozen=True)
class PhiMetrics:
    bit_density: float
    l1_density: float
    l2_pos_density: float
    l2_neg_density: float
    index_density: float
    speedup_over_bit: float
    speedup_over_dense: float
    pwp_utilization: float
    bit_ops: int = 0
    l1_ops: int = 0
    l2_ops: int = 0

    @property
    def l2_density(self) -> float:
        return self.l2_pos_density + self.l2_neg_density

    @property
    def total_op_speedup_over_bit(self) -> float:
        """bit ops / (L1 PWP accumulations + L2 nonzeros): charges level 1 too."""
        total = self.l1_ops + self.l2_ops
        return math.inf if total == 0 else self.bit_ops / total

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["l2_density"] = self.l2_density
        d["total_op_speedup_over_bit"] = self.total_op_speedup_over_bit
        return d


def speedups(bit_density: float, l2_density: float) -> tuple[float, float]:
    """(over bit sparsity, over dense); +inf when level 2 is empty."""
    if l2_density <= 0:
        return math.inf, math.inf
    return bit_density / l2_density, 1.0 / l2_density


def pwp_utilization(l1: L1IndexMatrix, sets: Sequence[PatternSet], tile_rows: int | None = None) -> float:
    """Mean fraction of a partition's patterns referenced inside one row tile."""
    m = l1.rows
    tile_rows = tile_rows or m
    fracs = []
    for j, s in enumerate(sets):
        if s.q == 0:
            continue
        for lo in range(0, m, tile_rows):
            used = np.unique(l1.ids[lo:lo + tile_rows, j])
            fracs.append(np.count_nonzero(used) / s.q)
    return float(np.mean(fracs)) if fracs else 0.0


def metrics(
    a: BitMatrix,
    l1: L1IndexMatrix,
    sets: Sequence[PatternSet],
    l2: TernaryMatrix,
    tile_rows: int | None = None,
) -> PhiMetrics:
    size = a.rows * a.cols
    if size == 0:
        raise ValueError("metrics of an empty matrix")
    k = sets[0].k
    bit_ops = a.popcount()
    expanded = expand_l1(l1, sets, k)
    pos, neg = l2.count(1), l2.count(-1)
    bit_d = bit_ops / size
    over_bit, over_dense = speedups(bit_d, (pos + neg) / size)
    return PhiMetrics(
        bit_density=bit_d,
        l1_density=int(expanded[:, : a.cols].sum()) / size,
        l2_pos_density=pos / size,
        l2_neg_density=neg / size,
        index_density=l1.nnz() / l1.ids.size if l1.ids.size else 0.0,
        speedup_over_bit=over_bit,
        speedup_over_dense=over_dense,
        pwp_utilization=pwp_utilization(l1, sets, tile_rows),
        bit_ops=bit_ops,
        l1_ops=l1.nnz(),
        l2_ops=pos + neg,
    )


def paft_regularizer(acts, sets_per_layer, spec: TileSpec) -> int:
    """N-weighted count of level-2 nonzeros summed over layers.

    ``acts`` is a sequence of (activations, N) pairs, one per layer.
    """
    acts = list(acts)
    if len(acts) != len(sets_per_layer):
        raise ValueError("one pattern-set list per layer is required")
    total = 0
    for (a, n_out), sets in zip(acts, sets_per_layer):
        _, l2 = decompose(a, sets, spec)
        total += int(n_out) * l2.nnz()
    return total


# --- PHII serialization ----------------------------------------------------

def dump_index(l1: L1IndexMatrix, q: int) -> bytes:
    if l1.ids.size and l1.ids.max() > q:
        raise ValueError("index refers past q")
    dtype = "<u1" if q <= 255 else "<u2"
    if q > 65535:
        raise ValueError("q too large for PHII")
    m, p = l1.ids.shape
    return MAGIC_INDEX + _HEADER.pack(m, p, q) + l1.ids.astype(dtype).tobytes()


def parse_index(data: bytes) -> tuple[L1IndexMatrix, int]:
    if len(data) < 4 + _HEADER.size or data[:4] != MAGIC_INDEX:
        raise FormatError("not a PHII index file")
    m, p, q = _HEADER.unpack_from(data, 4)
    dtype = np.dtype("<u1" if q <= 255 else "<u2")
    body = data[4 + _HEADER.size:]
    if len(body) != m * p * dtype.itemsize:
        raise FormatError(f"payload is {len(body)} bytes, expected {m * p * dtype.itemsize}")
    ids = np.frombuffer(body, dtype=dtype).reshape(m, p)
    if ids.size and ids.max() > q:
        raise FormatError("pattern id exceeds q")
    return L1IndexMatrix(ids), q


def store_index(l1: L1IndexMatrix, q: int, path) -> None:
    Path(path).write_bytes(dump_index(l1, q))


def load_index(path) -> tuple[L1IndexMatrix, int]:
    return parse_index(Path(path).read_bytes())
