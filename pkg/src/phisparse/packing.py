"""Level-2 compressor and windowed packer.

A compressed row lists the (column, sign) of its nonzeros. Rows from
partitions after the first also carry one partial-sum unit, so the adder
tree folds in the running sum from the previous partition. Rows are
packed into fixed 8-unit packs; two rows whose partial sums live in the
same bank (row mod bank_count) never share a pack.

The packer keeps ``window_count`` open packs. An incoming row goes to the
fullest window that has room and no bank conflict. When none accepts it,
the fullest window is emitted and reused. Packs never mix partitions
(one weight tile per pack), so all windows are flushed when the partition
changes and at end of stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .binmat import TernaryMatrix

NONZERO = "nz"
PSUM = "psum"
PACK_CAPACITY = 8


class Unit(NamedTuple):
    label: str
    index: int
    value: int


@dataclass(frozen=True)
class CompressedRow:
    row: int
    partition: int
    units: tuple[Unit, ...]

    def __len__(self):
        return len(self.units)

    @property
    def has_psum(self) -> bool:
        return any(u.label == PSUM for u in self.units)


@dataclass
class Pack:
    partition: int
    units: list[Unit] = field(default_factory=list)
    row_meta: list[tuple[int, int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.units)

    def rows(self) -> list[int]:
        return [r for r, _ in self.row_meta]

    def row_units(self) -> Iterator[tuple[int, list[Unit]]]:
        pos = 0
        for r, n in self.row_meta:
            yield r, self.units[pos:pos + n]
            pos += n

    def to_json(self) -> str:
        return json.dumps({
            "partition": self.partition,
            "units": [list(u) for u in self.units],
            "row_meta": [list(m) for m in self.row_meta],
        })


@dataclass(frozen=True)
class PackerConfig:
    window_count: int = 4
    bank_count: int = 8
    pack_capacity: int = PACK_CAPACITY

    def __post_init__(self):
        if self.window_count < 1:
            raise ValueError("window_count must be >= 1")
        if self.bank_count < 1:
            raise ValueError("bank_count must be >= 1")
        if self.pack_capacity != PACK_CAPACITY:
            raise ValueError("pack capacity is fixed at 8 units")


def compress_row(l2_row, row_index: int, partition_index: int) -> CompressedRow | None:
    """Nonzero (column, sign) units of one level-2 segment; None for an all-zero row."""
    seg = np.asarray(l2_row)
    cols = np.flatnonzero(seg)
    if cols.size == 0:
        return None
    units = tuple(Unit(NONZERO, int(c), int(seg[c])) for c in cols)
    return CompressedRow(row_index, partition_index, units)


def attach_psum(row: CompressedRow, partition_index: int) -> CompressedRow:
    """Append the partial-sum unit for every partition after the first."""
    if partition_index == 0 or row.has_psum:
        return row
    return CompressedRow(row.row, row.partition, row.units + (Unit(PSUM, 0, 1),))


def split_row(row: CompressedRow, capacity: int = PACK_CAPACITY) -> list[CompressedRow]:
    """Break a row wider than a pack into logical rows sharing its index.

    Every piece after the first reads the partial sum the earlier piece wrote,
    so it carries a psum unit; the first piece keeps the original psum (if any).
    """
    if len(row) <= capacity:
        return [row]
    nz = [u for u in row.units if u.label == NONZERO]
    first_psum = row.has_psum
    pieces = []
    take = capacity - 1 if first_psum else capacity
    pieces.append(nz[:take] + ([Unit(PSUM, 0, 1)] if first_psum else []))
    nz = nz[take:]
    while nz:
        pieces.append(nz[: capacity - 1] + [Unit(PSUM, 0, 1)])
        nz = nz[capacity - 1:]
    return [CompressedRow(row.row, row.partition, tuple(p)) for p in pieces]


class Packer:
    """Streaming packer; ``push`` returns the packs emitted by that row."""

    def __init__(self, cfg: PackerConfig | None = None):
        self.cfg = cfg or PackerConfig()
        self.windows: list[Pack | None] = [None] * self.cfg.window_count
        self.partition: int | None = None
        self.emitted = 0

    def _bank(self, row: int) -> int:
        return row % self.cfg.bank_count

    def _accepts(self, pack: Pack | None, row: CompressedRow) -> bool:
        if pack is None:
            return True
        if pack.size + len(row) > self.cfg.pack_capacity:
            return False
        bank = self._bank(row.row)
        return all(self._bank(r) != bank for r in pack.rows())

    def _place(self, w: int, row: CompressedRow):
        pack = self.windows[w]
        if pack is None:
            pack = self.windows[w] = Pack(row.partition)
        psum_slot = sum(1 for u in pack.units if u.label == PSUM)
        for u in row.units:
            if u.label == PSUM:
                pack.units.append(Unit(PSUM, psum_slot, 1))
                psum_slot += 1
            else:
                pack.units.append(u)
        pack.row_meta.append((row.row, len(row)))

    def _emit(self, w: int) -> list[Pack]:
        pack = self.windows[w]
        self.windows[w] = None
        if pack is None or not pack.units:
            return []
        self.emitted += 1
        return [pack]

    def _fullest(self, candidates) -> int:
        return max(candidates, key=lambda w: (self.windows[w].size if self.windows[w] else -1, -w))

    def push(self, row: CompressedRow) -> list[Pack]:
        out = []
        if self.partition is not None and row.partition != self.partition:
            out += self.flush()
        self.partition = row.partition
        pieces = split_row(row, self.cfg.pack_capacity)
        for i, piece in enumerate(pieces):
            if i:
                # a split piece must run after the one before it
                out += self._emit(last)
            ok = [w for w in range(len(self.windows)) if self._accepts(self.windows[w], piece)]
            if ok:
                w = self._fullest(ok)
            else:
                w = self._fullest(range(len(self.windows)))
                out += self._emit(w)
            self._place(w, piece)
            last = w
        return out

    def flush(self) -> list[Pack]:
        order = sorted(range(len(self.windows)),
                       key=lambda w: (-(self.windows[w].size if self.windows[w] else 0), w))
        out = []
        for w in order:
            out += self._emit(w)
        return out

    def pending_units(self) -> int:
        return sum(p.size for p in self.windows if p is not None)


def pack_stream(rows: Iterable[CompressedRow], cfg: PackerConfig | None = None) -> list[Pack]:
    packer = Packer(cfg)
    packs = []
    for r in rows:
        packs += packer.push(r)
    packs += packer.flush()
    return packs


def compressed_rows(l2: TernaryMatrix, k: int, row_lo: int = 0, row_hi: int | None = None,
                    partitions: Iterable[int] | None = None) -> Iterator[CompressedRow]:
    """Compressed, psum-tagged rows of a row tile in K-first (partition-major) order."""
    row_hi = l2.rows if row_hi is None else row_hi
    parts = -(-l2.cols // k)
    for j in (range(parts) if partitions is None else partitions):
        block = l2.values[row_lo:row_hi, j * k:(j + 1) * k]
        for i in np.flatnonzero(np.any(block, axis=1)):
            r = compress_row(block[i], row_lo + int(i), j)
            yield attach_psum(r, j)


def utilization(packs: list[Pack], capacity: int = PACK_CAPACITY) -> float:
    if not packs:
        return 0.0
    return sum(p.size for p in packs) / (len(packs) * capacity)


def write_trace(packs: Iterable[Pack], path) -> None:
    with open(path, "w") as fh:
        for p in packs:
            fh.write(p.to_json() + "\n")


def read_trace(path) -> list[Pack]:
    packs = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            packs.append(Pack(d["partition"], [Unit(*u) for u in d["units"]],
                              [tuple(m) for m in d["row_meta"]]))
    return packs
