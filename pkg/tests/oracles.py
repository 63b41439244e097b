"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np


def hamming(a, b) -> int:
    return sum(int(x) != int(y) for x, y in zip(a, b))


def best_match(segment, patterns) -> tuple[int, int]:
    """(pattern id or 0, L2 nonzero count) by exhaustive search."""
    pop = sum(int(x) for x in segment)
    best_id, best_d = 0, pop
    for pid, p in enumerate(patterns, start=1):
        d = hamming(segment, p)
        if d < best_d:
            best_id, best_d = pid, d
    return best_id, best_d


def segments(dense: np.ndarray, k: int):
    """Yield (row, partition, zero-padded k-bit segment)."""
    m, cols = dense.shape
    parts = -(-cols // k)
    padded = np.zeros((m, parts * k), dtype=np.uint8)
    padded[:, :cols] = dense
    for i in range(m):
        for j in range(parts):
            yield i, j, padded[i, j * k:(j + 1) * k]


def l2_nnz(dense: np.ndarray, pattern_bits: list, k: int) -> int:
    return sum(best_match(seg, pattern_bits[j])[1] for _, j, seg in segments(dense, k))


def matmul(dense: np.ndarray, w: np.ndarray) -> np.ndarray:
    m, kk = dense.shape
    out = np.zeros((m, w.shape[1]), dtype=object)
    for i in range(m):
        for c in range(kk):
            if dense[i, c]:
                out[i] += w[c].astype(object)
    return out.astype(np.int64)


def random_patterns(rng, dense: np.ndarray, k: int, q: int) -> list[np.ndarray]:
    """Per-partition pattern bits drawn from the matrix's own segments plus noise."""
    from phisparse.calibration import PatternSet

    m, cols = dense.shape
    parts = -(-cols // k)
    padded = np.zeros((m, parts * k), dtype=np.uint8)
    padded[:, :cols] = dense
    live = [min(k, cols - j * k) for j in range(parts)]
    sets = []
    for j in range(parts):
        seen, out = set(), []
        for _ in range(4 * q):
            if len(out) == q:
                break
            if rng.random() < 0.7:
                cand = padded[rng.integers(m), j * k:(j + 1) * k].copy()
            else:
                cand = np.zeros(k, dtype=np.uint8)
                cand[: live[j]] = rng.random(live[j]) < rng.uniform(0.1, 0.6)
            key = cand.tobytes()
            if cand.sum() >= 2 and key not in seen:
                seen.add(key)
                out.append(cand)
        bits = np.array(out, dtype=np.uint8).reshape(-1, k)
        sets.append(PatternSet.from_bits(bits) if len(out) else PatternSet(k, np.zeros(0, dtype=np.uint64)))
    return sets
