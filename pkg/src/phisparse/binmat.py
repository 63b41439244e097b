"""Bit-packed binary and ternary activation matrices.

Rows are packed LSB-first: column ``c`` lives in byte ``c // 8`` at bit
``c % 8``. Each row is padded to a whole byte and the padding bits are
always zero.

On-disk formats (all integers little-endian):

``PHIA``  binary activations: magic, M:u32, K:u32, M rows of ceil(K/8) bytes.
``PHIT``  ternary matrix: magic, M:u32, K:u32, M rows of ceil(K/4) bytes,
          2 bits per entry (00 = 0, 01 = +1, 11 = -1), LSB-first.
``PHIW``  integer weights: magic, K:u32, N:u32, K*N int32 row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC_ACTS = b"PHIA"
MAGIC_TERNARY = b"PHIT"
MAGIC_WEIGHTS = b"PHIW"

_DIMS = struct.Struct("<II")


class FormatError(ValueError):
    """Raised when a serialized matrix is malformed."""


def _row_bytes(cols: int) -> int:
    return (cols + 7) // 8


@dataclass(frozen=True, eq=False)
class BitMatrix:
    """An M x K binary matrix stored as packed bytes (M, ceil(K/8))."""

    rows: int
    cols: int
    bits: np.ndarray

    def __post_init__(self):
        if self.bits.dtype != np.uint8 or self.bits.shape != (self.rows, _row_bytes(self.cols)):
            raise ValueError(
                f"packed payload shape {self.bits.shape} does not match {self.rows}x{self.cols}"
            )
        self.bits.setflags(write=False)

    @classmethod
    def from_dense(cls, dense) -> "BitMatrix":
        arr = np.asarray(dense)
        if arr.ndim != 2:
            raise ValueError("expected a 2-D array")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError("binary matrix entries must be 0 or 1")
        m, k = arr.shape
        packed = np.packbits(arr.astype(np.uint8), axis=1, bitorder="little")
        return cls(m, k, np.ascontiguousarray(packed))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "BitMatrix":
        return cls(rows, cols, np.zeros((rows, _row_bytes(cols)), dtype=np.uint8))

    @classmethod
    def random(cls, rows: int, cols: int, density: float, rng) -> "BitMatrix":
        """Bernoulli(density) matrix drawn from a numpy Generator or seed."""
        rng = np.random.default_rng(rng)
        return cls.from_dense(rng.random((rows, cols)) < density)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def to_dense(self) -> np.ndarray:
        """Unpack to an (M, K) uint8 array of 0/1."""
        return np.unpackbits(self.bits, axis=1, count=self.cols, bitorder="little")

    def popcount(self) -> int:
        return int(np.bitwise_count(self.bits).sum())

    def row_popcounts(self) -> np.ndarray:
        return np.bitwise_count(self.bits).sum(axis=1, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"BitMatrix({self.rows}x{self.cols}, ones={self.popcount()})"


@dataclass(frozen=True)
class TileSpec:
    """Tiling of the reduction dimension K into partitions of width k.

    ``m`` and ``n`` are the output tile height and width used by the
    simulator's schedule.
    """

    k: int = 16
    m: int = 256
    n: int = 32

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("partition width k must be >= 2")
        if self.m < 1 or self.n < 1:
            raise ValueError("tile sizes must be positive")

    def partitions(self, cols: int) -> int:
        return -(-cols // self.k)


def tile(a: BitMatrix, j: int, k: int) -> BitMatrix:
    """Columns ``[j*k, (j+1)*k)`` of ``a``, zero-padded past column K."""
    parts = -(-a.cols // k)
    if not 0 <= j < parts:
        raise IndexError(f"partition {j} out of range for K={a.cols}, k={k}")
    dense = a.to_dense()[:, j * k:(j + 1) * k]
    if dense.shape[1] < k:
        dense = np.pad(dense, ((0, 0), (0, k - dense.shape[1])))
    return BitMatrix.from_dense(dense)


def tile_codes(a: BitMatrix, j: int, k: int) -> np.ndarray:
    """Tile rows as uint64 integers (bit c = column j*k + c). Needs k <= 64."""
    return bits_to_codes(tile(a, j, k).to_dense())


def all_tile_codes(a: BitMatrix, k: int) -> np.ndarray:
    """(M, P) uint64 codes for every partition, last one zero-padded."""
    parts = -(-a.cols // k)
    dense = a.to_dense()
    if parts * k > a.cols:
        dense = np.pad(dense, ((0, 0), (0, parts * k - a.cols)))
    return bits_to_codes(dense.reshape(a.rows, parts, k))


def codes_to_bits(codes: np.ndarray, k: int) -> np.ndarray:
    """Expand integer codes to a (..., k) uint8 bit array."""
    codes = np.asarray(codes, dtype=np.uint64)
    shifts = np.arange(k, dtype=np.uint64)
    return ((codes[..., None] >> shifts) & np.uint64(1)).astype(np.uint8)


def bits_to_codes(bits: np.ndarray) -> np.ndarray:
    """Inverse of :func:`codes_to_bits` along the last axis."""
    bits = np.asarray(bits, dtype=np.uint64)
    k = bits.shape[-1]
    if k > 64:
        raise ValueError("integer row codes support k <= 64")
    weights = np.uint64(1) << np.arange(k, dtype=np.uint64)
    return (bits * weights).sum(axis=-1, dtype=np.uint64)


def density(a: BitMatrix) -> float:
    if a.rows * a.cols == 0:
        raise ValueError("density of an empty matrix is undefined")
    return a.popcount() / (a.rows * a.cols)


@dataclass(frozen=True, eq=False)
class TernaryMatrix:
    """An M x K matrix over {-1, 0, +1}, held as int8."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError("expected a 2-D array")
        if v.dtype != np.int8:
            object.__setattr__(self, "values", v.astype(np.int8))
        if self.values.size and not np.isin(self.values, (-1, 0, 1)).all():
            raise ValueError("ternary entries must be in {-1, 0, +1}")
        self.values.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    def count(self, sign: int) -> int:
        return int(np.count_nonzero(self.values == sign))

    def density(self) -> float:
        if self.values.size == 0:
            raise ValueError("density of an empty matrix is undefined")
        return self.nnz() / self.values.size

    def __eq__(self, other):
        if not isinstance(other, TernaryMatrix):
            return NotImplemented
        return np.array_equal(self.values, other.values)


# --- serialization ---------------------------------------------------------

def _read_header(data: bytes, magic: bytes) -> tuple[int, int]:
    if len(data) < 4 + _DIMS.size:
        raise FormatError("file too short for header")
    if data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}, expected {magic!r}")
    return _DIMS.unpack_from(data, 4)


def dump_bitmatrix(a: BitMatrix) -> bytes:
    return MAGIC_ACTS + _DIMS.pack(a.rows, a.cols) + a.bits.tobytes()


def parse_bitmatrix(data: bytes) -> BitMatrix:
    m, k = _read_header(data, MAGIC_ACTS)
    if m * k == 0:
        raise FormatError("activation matrix has zero size")
    body = data[12:]
    expected = m * _row_bytes(k)
    if len(body) != expected:
        raise FormatError(f"payload is {len(body)} bytes, expected {expected}")
    bits = np.frombuffer(body, dtype=np.uint8).reshape(m, _row_bytes(k)).copy()
    if k % 8 and np.any(bits[:, -1] >> (k % 8)):
        raise FormatError("nonzero padding bits")
    return BitMatrix(m, k, bits)


def store_bitmatrix(a: BitMatrix, path) -> None:
    Path(path).write_bytes(dump_bitmatrix(a))


def load_bitmatrix(path) -> BitMatrix:
    return parse_bitmatrix(Path(path).read_bytes())


_TERNARY_CODE = {0: 0b00, 1: 0b01, -1: 0b11}


def dump_ternary(t: TernaryMatrix) -> bytes:
    m, k = t.shape
    codes = np.zeros((m, -(-k // 4) * 4), dtype=np.uint8)
    codes[:, :k][t.values == 1] = 0b01
    codes[:, :k][t.values == -1] = 0b11
    quads = codes.reshape(m, -1, 4)
    packed = quads[..., 0] | (quads[..., 1] << 2) | (quads[..., 2] << 4) | (quads[..., 3] << 6)
    return MAGIC_TERNARY + _DIMS.pack(m, k) + packed.astype(np.uint8).tobytes()


def parse_ternary(data: bytes) -> TernaryMatrix:
    m, k = _read_header(data, MAGIC_TERNARY)
    if m * k == 0:
        raise FormatError("ternary matrix has zero size")
    per_row = -(-k // 4)
    body = data[12:]
    if len(body) != m * per_row:
        raise FormatError(f"payload is {len(body)} bytes, expected {m * per_row}")
    packed = np.frombuffer(body, dtype=np.uint8).reshape(m, per_row)
    codes = np.stack([(packed >> s) & 0b11 for s in (0, 2, 4, 6)], axis=-1).reshape(m, -1)
    if np.any(codes == 0b10):
        raise FormatError("invalid 2-bit ternary code 0b10")
    if np.any(codes[:, k:]):
        raise FormatError("nonzero padding entries")
    values = np.zeros((m, k), dtype=np.int8)
    values[codes[:, :k] == 0b01] = 1
    values[codes[:, :k] == 0b11] = -1
    return TernaryMatrix(values)


def store_ternary(t: TernaryMatrix, path) -> None:
    Path(path).write_bytes(dump_ternary(t))


def load_ternary(path) -> TernaryMatrix:
    return parse_ternary(Path(path).read_bytes())


def dump_weights(w: np.ndarray) -> bytes:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError("weights must be 2-D")
    if not np.issubdtype(w.dtype, np.integer):
        raise ValueError("PHIW stores 32-bit integer weights")
    if w.size and (w.min() < np.iinfo(np.int32).min or w.max() > np.iinfo(np.int32).max):
        raise ValueError("weights exceed int32 range")
    return MAGIC_WEIGHTS + _DIMS.pack(*w.shape) + w.astype("<i4").tobytes()


def parse_weights(data: bytes) -> np.ndarray:
    k, n = _read_header(data, MAGIC_WEIGHTS)
    if k * n == 0:
        raise FormatError("weight matrix has zero size")
    body = data[12:]
    if len(body) != 4 * k * n:
        raise FormatError(f"payload is {len(body)} bytes, expected {4 * k * n}")
    return np.frombuffer(body, dtype="<i4").reshape(k, n).astype(np.int32)


def store_weights(w: np.ndarray, path) -> None:
    Path(path).write_bytes(dump_weights(w))


def load_weights(path) -> np.ndarray:
    return parse_weights(Path(path).read_bytes())
