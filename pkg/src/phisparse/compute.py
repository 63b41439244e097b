"""Matrix engines: dense reference, bit-sparse count, and the two-level path.

The two-level path never multiplies activations by weights at runtime. Each
(row, partition) adds one precomputed pattern-weight product (PWP) row when
it has a pattern, then adds or subtracts single weight rows for its level-2
corrections. Integer weights make every path bit-exact against the dense
reference.

``PHPW`` cache file (little-endian): magic, P:u32, q:u32, n:u32, then
P*q*n int32 row-major. Partitions with fewer than q patterns are zero-padded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .binmat import BitMatrix, FormatError, TernaryMatrix, TileSpec
from .calibration import PatternSet
from .decompose import L1IndexMatrix

MAGIC_PWP = b"PHPW"
_HEADER = struct.Struct("<III")

_ACC_LIMIT = 2**62


def _as_weights(w) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D (K, N) array")
    if np.issubdtype(w.dtype, np.integer):
        return w.astype(np.int64)
    return w.astype(np.float64)


def _check_range(w: np.ndarray, k: int):
    if np.issubdtype(w.dtype, np.integer) and w.size:
        if k * int(np.abs(w).max()) >= _ACC_LIMIT:
            raise OverflowError("accumulation could overflow 64-bit integers")


def pwp_precompute(patterns: PatternSet, w_tile) -> np.ndarray:
    """(q, n) products of every pattern with a (k, n) weight tile."""
    w_tile = _as_weights(w_tile)
    if w_tile.shape[0] != patterns.k:
        raise ValueError(f"weight tile has {w_tile.shape[0]} rows, patterns have k={patterns.k}")
    _check_range(w_tile, patterns.k)
    return patterns.bits.astype(w_tile.dtype) @ w_tile


@dataclass
class PWPTable:
    """Per-partition PWP blocks. ``blocks[j][id - 1]`` is the product for pattern ``id``."""

    k: int
    blocks: list[np.ndarray]

    @property
    def partitions(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        return self.blocks[0].shape[1] if self.blocks else 0

    def lookup(self, j: int) -> np.ndarray:
        """Block j with a zero row prepended so that ID 0 indexes zeros."""
        b = self.blocks[j]
        return np.vstack([np.zeros((1, b.shape[1]), dtype=b.dtype), b])


def build_pwp_table(sets: Sequence[PatternSet], w) -> PWPTable:
    """PWPs for every partition against the matching k-row slice of ``w``."""
    w = _as_weights(w)
    if not sets:
        raise ValueError("no pattern sets")
    k = sets[0].k
    rows_needed = len(sets) * k
    if w.shape[0] > rows_needed or w.shape[0] <= rows_needed - k:
        raise ValueError(f"weights have K={w.shape[0]}, partitions cover {rows_needed} rows")
    padded = np.zeros((rows_needed, w.shape[1]), dtype=w.dtype)
    padded[: w.shape[0]] = w
    return PWPTable(k, [pwp_precompute(s, padded[j * k:(j + 1) * k]) for j, s in enumerate(sets)])


def dense_matmul(a: BitMatrix, w) -> np.ndarray:
    """Reference product of binary activations with weights (64-bit accumulators)."""
    w = _as_weights(w)
    if w.shape[0] != a.cols:
        raise ValueError(f"activation K={a.cols} does not match weight K={w.shape[0]}")
    _check_range(w, a.cols)
    return a.to_dense().astype(w.dtype) @ w


def bitsparse_ops(a: BitMatrix) -> int:
    """Accumulations needed when only 1-bits are skipped in."""
    return a.popcount()


@dataclass
class OpCounter:
    """Row-vector accumulations issued by :func:`phi_matmul`, per n-tile."""

    l1: int = 0
    l2: int = 0
    per_partition_l1: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.l1 + self.l2


def phi_matmul(
    l1: L1IndexMatrix,
    l2: TernaryMatrix,
    pwps: PWPTable,
    w,
    spec: TileSpec,
    counter: OpCounter | None = None,
) -> np.ndarray:
    w = _as_weights(w)
    k = spec.k
    if l2.cols != w.shape[0]:
        raise ValueError(f"level 2 has K={l2.cols}, weights have K={w.shape[0]}")
    if pwps.partitions != l1.partitions or -(-w.shape[0] // k) != l1.partitions:
        raise ValueError("partition count mismatch between indices, PWPs and weights")
    _check_range(w, w.shape[0])
    n_tiles = -(-w.shape[1] // spec.n)
    out = np.zeros((l1.rows, w.shape[1]), dtype=w.dtype)
    for j in range(l1.partitions):
        ids = l1.ids[:, j]
        table = pwps.lookup(j)
        if ids.size and ids.max() >= table.shape[0]:
            raise KeyError(f"partition {j}: pattern id {ids.max()} has no PWP")
        out += table[ids]
        if counter is not None:
            hits = int(np.count_nonzero(ids)) * n_tiles
            counter.l1 += hits
            counter.per_partition_l1.append(hits)
    out += l2.values.astype(w.dtype) @ w
    if counter is not None:
        counter.l2 += l2.nnz() * n_tiles
    return out


def phi_matmul_reference(l1, l2, pwps, w, spec) -> np.ndarray:
    """Row-by-row loop version of :func:`phi_matmul`; slow, used as a cross-check."""
    w = _as_weights(w)
    k = spec.k
    out = np.zeros((l1.rows, w.shape[1]), dtype=w.dtype)
    for i in range(l1.rows):
        for j in range(l1.partitions):
            pid = int(l1.ids[i, j])
            if pid:
                out[i] += pwps.blocks[j][pid - 1]
            seg = l2.values[i, j * k:(j + 1) * k]
            for c in np.flatnonzero(seg):
                out[i] += int(seg[c]) * w[j * k + c]
    return out


@dataclass
class LifState:
    """Membrane potentials of a layer of leaky integrate-and-fire neurons."""

    v: np.ndarray
    threshold: float = 1.0
    leak: float = 1.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if not 0.0 <= self.leak <= 1.0:
            raise ValueError("leak factor must be in [0, 1]")

    @classmethod
    def rest(cls, neurons: int, threshold: float = 1.0, leak: float = 1.0) -> "LifState":
        return cls(np.zeros(neurons), threshold, leak)


def lif_step(inputs, state: LifState) -> tuple[np.ndarray, LifState]:
    """One timestep: v = leak*v + input, fire where v >= threshold, reset to 0."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape != state.v.shape:
        raise ValueError(f"input shape {inputs.shape} does not match {state.v.shape}")
    v = state.leak * state.v + inputs
    spikes = v >= state.threshold
    v = np.where(spikes, 0.0, v)
    return spikes.astype(np.uint8), LifState(v, state.threshold, state.leak)


def lif_layer(currents: np.ndarray, state: LifState) -> tuple[BitMatrix, LifState]:
    """Run LIF over T timesteps of (T, N) input currents; spikes become the next layer's rows."""
    rows = []
    for t in range(currents.shape[0]):
        s, state = lif_step(currents[t], state)
        rows.append(s)
    return BitMatrix.from_dense(np.array(rows).reshape(len(rows), -1)), state


# --- PHPW serialization ----------------------------------------------------

def dump_pwp(table: PWPTable) -> bytes:
    if not table.blocks:
        raise ValueError("empty PWP table")
    q = max(b.shape[0] for b in table.blocks)
    n = table.width
    out = np.zeros((table.partitions, q, n), dtype=np.int64)
    for j, b in enumerate(table.blocks):
        if not np.issubdtype(b.dtype, np.integer):
            raise ValueError("PHPW stores integer PWPs only")
        out[j, : b.shape[0]] = b
    if out.size and (out.min() < np.iinfo(np.int32).min or out.max() > np.iinfo(np.int32).max):
        raise OverflowError("PWP entries exceed int32")
    return MAGIC_PWP + _HEADER.pack(table.partitions, q, n) + out.astype("<i4").tobytes()


def parse_pwp(data: bytes, k: int, sets: Sequence[PatternSet] | None = None) -> PWPTable:
    """Read a PHPW cache; ``sets`` trims padding rows to each partition's q."""
    if len(data) < 4 + _HEADER.size or data[:4] != MAGIC_PWP:
        raise FormatError("not a PHPW file")
    parts, q, n = _HEADER.unpack_from(data, 4)
    body = data[4 + _HEADER.size:]
    if len(body) != 4 * parts * q * n:
        raise FormatError(f"payload is {len(body)} bytes, expected {4 * parts * q * n}")
    arr = np.frombuffer(body, dtype="<i4").reshape(parts, q, n).astype(np.int64)
    if sets is not None and len(sets) != parts:
        raise FormatError("PWP partition count does not match the pattern sets")
    blocks = [arr[j, : (sets[j].q if sets is not None else q)].copy() for j in range(parts)]
    return PWPTable(k, blocks)


def store_pwp(table: PWPTable, path) -> None:
    Path(path).write_bytes(dump_pwp(table))


def load_pwp(path, k: int, sets=None) -> PWPTable:
    return parse_pwp(Path(path).read_bytes(), k, sets)
