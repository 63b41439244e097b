"""Offline pattern calibration: binary k-means under the Hamming metric.

Each K-partition gets its own pattern set. Rows are filtered (all-zero and
one-hot rows carry no information for a pattern), then clustered with a
Lloyd-style loop: Hamming assignment, per-bit mean, round to {0, 1}.
Rounding the mean of binary vectors is the per-bit median, so every update
step is the L1-optimal center for its cluster.

Pattern set file ``PHIP`` (little-endian): magic, k:u32, q:u32, P:u32, then
P*q patterns of ceil(k/8) bytes each (LSB-first), partition-major in ID
order. Partitions with fewer than q patterns are padded with all-zero
entries, which are dropped again on load (a valid pattern is never zero).
"""

from __future__ import annotations

import heapq
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .binmat import (
    BitMatrix,
    FormatError,
    TileSpec,
    all_tile_codes,
    bits_to_codes,
    codes_to_bits,
)

log = logging.getLogger(__name__)

MAGIC_PATTERNS = b"PHIP"
_HEADER = struct.Struct("<III")


@dataclass(frozen=True, eq=False)
class PatternSet:
    """Patterns for one partition. ``codes[i]`` holds pattern ID ``i + 1``.

    ``short`` is set when calibration produced fewer patterns than requested.
    """

    k: int
    codes: np.ndarray
    short: bool = False
    cost: int | None = field(default=None, compare=False)

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint64).reshape(-1)
        object.__setattr__(self, "codes", codes)
        codes.setflags(write=False)
        if self.k > 64:
            raise ValueError("patterns support k <= 64")
        if codes.size:
            if self.k < 64 and np.any(codes >> np.uint64(self.k)):
                raise ValueError("pattern has bits beyond k")
            if np.any(np.bitwise_count(codes) < 2):
                raise ValueError("patterns must have popcount >= 2")
            if np.unique(codes).size != codes.size:
                raise ValueError("duplicate patterns")

    @classmethod
    def from_bits(cls, patterns, **kw) -> "PatternSet":
        arr = np.asarray(patterns, dtype=np.uint8)
        if arr.ndim != 2:
            raise ValueError("expected a (q, k) array")
        return cls(arr.shape[1], bits_to_codes(arr), **kw)

    @property
    def q(self) -> int:
        return int(self.codes.size)

    @property
    def bits(self) -> np.ndarray:
        """(q, k) uint8 view of the patterns in ID order."""
        return codes_to_bits(self.codes, self.k)

    def pattern(self, pid: int) -> np.ndarray:
        if not 1 <= pid <= self.q:
            raise KeyError(f"pattern id {pid} not in 1..{self.q}")
        return self.bits[pid - 1]

    def __eq__(self, other):
        if not isinstance(other, PatternSet):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.codes, other.codes)

    def __len__(self):
        return self.q


@dataclass(frozen=True)
class CalibrationConfig:
    q: int = 128
    max_iters: int = 25
    seed: int = 0
    sample_fraction: float = 0.1
    init: str = "greedy"  # "random", "kmeans++"
    max_candidates: int = 4096

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.init not in ("greedy", "random", "kmeans++"):
            raise ValueError(f"unknown init {self.init!r}")


def hamming(a, b) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def filter_rows(rows) -> np.ndarray:
    """Drop all-zero and one-hot rows, keeping order."""
    arr = np.asarray(rows, dtype=np.uint8)
    if arr.size == 0:
        return arr.reshape(0, arr.shape[1] if arr.ndim == 2 else 0)
    return arr[arr.sum(axis=1) >= 2]


def _distances(codes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.bitwise_count(codes[:, None] ^ centers[None, :])


def _greedy_seed(uniq, weights, q, rng, max_candidates):
    """Lazy greedy facility location on the level-2 cost sum(w * min(popcount, d)).

    Candidates are the ``max_candidates`` most frequent distinct rows (ties in
    frequency broken by a seeded shuffle). Returns fewer than q centers only
    when no candidate lowers the cost further.
    """
    order = rng.permutation(uniq.size)
    order = order[np.argsort(-weights[order], kind="stable")][:max_candidates]
    cand = uniq[order]
    cur = np.bitwise_count(uniq).astype(np.int16)
    gains = np.empty(cand.size)
    for lo in range(0, cand.size, 256):
        d = np.bitwise_count(uniq[:, None] ^ cand[None, lo:lo + 256]).astype(np.int16)
        gains[lo:lo + 256] = weights @ np.maximum(cur[:, None] - d, 0)
    heap = [(-g, i) for i, g in enumerate(gains)]
    heapq.heapify(heap)
    chosen = []
    while heap and len(chosen) < q:
        _, i = heapq.heappop(heap)
        d = np.bitwise_count(uniq ^ cand[i]).astype(np.int16)
        g = float(weights @ np.maximum(cur - d, 0))
        if heap and (-g, i) > heap[0]:
            heapq.heappush(heap, (-g, i))
            continue
        if g <= 0:
            break
        chosen.append(cand[i])
        cur = np.minimum(cur, d)
    return np.array(chosen, dtype=np.uint64)


def _init_centers(uniq, weights, q, rng, cfg):
    if cfg.init == "greedy":
        centers = _greedy_seed(uniq, weights, q, rng, cfg.max_candidates)
        if centers.size == q:
            return centers
        # top up with frequent rows not yet chosen
        rest = uniq[np.argsort(-weights, kind="stable")]
        rest = rest[~np.isin(rest, centers)][: q - centers.size]
        return np.concatenate([centers, rest])
    p = weights / weights.sum()
    if cfg.init == "random":
        return uniq[rng.choice(uniq.size, size=q, replace=False, p=p)]
    # k-means++ spreading, weighted by squared Hamming distance
    chosen = [int(rng.choice(uniq.size, p=p))]
    nearest = np.bitwise_count(uniq ^ uniq[chosen[0]]).astype(np.float64)
    for _ in range(1, q):
        score = weights * nearest ** 2
        if score.sum() == 0:
            remaining = np.setdiff1d(np.arange(uniq.size), chosen)
            chosen.extend(remaining[: q - len(chosen)].tolist())
            break
        nxt = int(rng.choice(uniq.size, p=score / score.sum()))
        chosen.append(nxt)
        nearest = np.minimum(nearest, np.bitwise_count(uniq ^ uniq[nxt]))
    return uniq[np.array(chosen)]


def _degenerate(centers: np.ndarray, empty: np.ndarray) -> np.ndarray:
    """Mask of centers needing reseed: empty, popcount < 2, or repeated."""
    bad = empty | (np.bitwise_count(centers) < 2)
    seen = set()
    for i, c in enumerate(centers.tolist()):
        if bad[i]:
            continue
        if c in seen:
            bad[i] = True
        seen.add(c)
    return bad


def _reseed(centers, bad, uniq, far_dist):
    """Replace bad centers with the rows farthest from their own center."""
    keep = set(centers[~bad].tolist())
    order = np.argsort(-far_dist, kind="stable")
    slots = np.flatnonzero(bad)
    s = 0
    for idx in order:
        if s == slots.size:
            break
        cand = int(uniq[idx])
        if cand in keep:
            continue
        centers[slots[s]] = cand
        keep.add(cand)
        s += 1
    return s == slots.size


def kmeans_binary(rows, cfg: CalibrationConfig, rng=None) -> PatternSet:
    """Cluster filtered binary rows into at most ``cfg.q`` patterns.

    Identical rows are merged and clustered with multiplicity weights, which
    gives the same centers as clustering every row.
    """
    arr = np.asarray(rows, dtype=np.uint8)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("kmeans_binary needs a non-empty (n, k) array")
    k = arr.shape[1]
    rng = np.random.default_rng(cfg.seed if rng is None else rng)

    uniq, counts = np.unique(bits_to_codes(arr), return_counts=True)
    usable = np.bitwise_count(uniq) >= 2
    uniq, counts = uniq[usable], counts[usable]
    if uniq.size == 0:
        log.warning("no usable rows (popcount >= 2); returning empty pattern set")
        return PatternSet(k, np.zeros(0, dtype=np.uint64), short=True, cost=0)

    weights = counts.astype(np.float64)
    uniq_bits = codes_to_bits(uniq, k).astype(np.float64)
    q = min(cfg.q, uniq.size)
    centers = _init_centers(uniq, weights, q, rng, cfg).copy()

    prev = None
    for _ in range(cfg.max_iters):
        dist = _distances(uniq, centers)
        assign = np.argmin(dist, axis=1)
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        total = np.bincount(assign, weights=weights, minlength=q)
        sums = np.stack(
            [np.bincount(assign, weights=weights * uniq_bits[:, c], minlength=q) for c in range(k)],
            axis=1,
        )
        # mean >= 0.5 rounds to 1
        new_bits = (2 * sums >= total[:, None]) & (total[:, None] > 0)
        centers = bits_to_codes(new_bits.astype(np.uint8))
        bad = _degenerate(centers, total == 0)
        if bad.any():
            _reseed(centers, bad, uniq, dist[np.arange(uniq.size), assign])

    bad = _degenerate(centers, np.zeros(q, dtype=bool))
    centers = centers[~bad]
    short = centers.size < cfg.q
    if short:
        log.warning("calibration produced %d of %d requested patterns", centers.size, cfg.q)
    cost = int((np.min(_distances(uniq, centers), axis=1) * counts).sum()) if centers.size else None
    return PatternSet(k, centers, short=short, cost=cost)


def sample_rows(m: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded uniform row subset (sorted indices) of size round(fraction*m) >= 1."""
    n = min(m, max(1, int(round(fraction * m))))
    if n == m:
        return np.arange(m)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(m, size=n, replace=False))


def calibrate(samples: BitMatrix, spec: TileSpec, cfg: CalibrationConfig) -> list[PatternSet]:
    """One independently calibrated pattern set per K-partition."""
    if samples.rows * samples.cols == 0:
        raise ValueError("empty sample matrix")
    idx = sample_rows(samples.rows, cfg.sample_fraction, cfg.seed)
    codes = all_tile_codes(samples, spec.k)[idx]
    sets = []
    for j in range(codes.shape[1]):
        rows = codes_to_bits(codes[:, j], spec.k)
        usable = filter_rows(rows)
        log.debug("partition %d: %d usable rows for q=%d", j, usable.shape[0], cfg.q)
        if usable.shape[0] == 0:
            sets.append(PatternSet(spec.k, np.zeros(0, dtype=np.uint64), short=True, cost=0))
            continue
        sets.append(kmeans_binary(usable, cfg, rng=np.random.default_rng((cfg.seed, j))))
    return sets


# --- PHIP serialization ----------------------------------------------------

def dump_patterns(sets: Sequence[PatternSet]) -> bytes:
    if not sets:
        raise ValueError("no pattern sets to store")
    k = sets[0].k
    if any(s.k != k for s in sets):
        raise ValueError("pattern sets disagree on k")
    q = max(s.q for s in sets)
    nbytes = (k + 7) // 8
    out = bytearray(MAGIC_PATTERNS + _HEADER.pack(k, q, len(sets)))
    for s in sets:
        codes = np.zeros(q, dtype="<u8")
        codes[: s.q] = s.codes
        out += codes.view(np.uint8).reshape(q, 8)[:, :nbytes].tobytes()
    return bytes(out)


def parse_patterns(data: bytes) -> list[PatternSet]:
    if len(data) < 4 + _HEADER.size or data[:4] != MAGIC_PATTERNS:
        raise FormatError("not a PHIP pattern file")
    k, q, parts = _HEADER.unpack_from(data, 4)
    if k < 2 or k > 64:
        raise FormatError(f"unsupported pattern length k={k}")
    nbytes = (k + 7) // 8
    body = data[4 + _HEADER.size:]
    if len(body) != parts * q * nbytes:
        raise FormatError(f"payload is {len(body)} bytes, expected {parts * q * nbytes}")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(parts, q, nbytes)
    padded = np.zeros((parts, q, 8), dtype=np.uint8)
    padded[..., :nbytes] = raw
    codes = padded.view("<u8")[..., 0].astype(np.uint64)
    sets = []
    for j in range(parts):
        row = codes[j]
        live = np.flatnonzero(row)
        n = live[-1] + 1 if live.size else 0
        if np.any(row[:n] == 0):
            raise FormatError(f"partition {j}: zero pattern before end of set")
        try:
            sets.append(PatternSet(k, row[:n], short=n < q))
        except ValueError as exc:
            raise FormatError(f"partition {j}: {exc}") from exc
    return sets


def store_patterns(sets: Sequence[PatternSet], path) -> None:
    Path(path).write_bytes(dump_patterns(sets))


def load_patterns(path) -> list[PatternSet]:
    return parse_patterns(Path(path).read_bytes())
