import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import hamming as hamming_ref

from phisparse.binmat import BitMatrix, FormatError, TileSpec
from phisparse.calibration import (
    CalibrationConfig,
    PatternSet,
    calibrate,
    dump_patterns,
    filter_rows,
    hamming,
    kmeans_binary,
    parse_patterns,
    sample_rows,
)


def test_hamming_examples():
    assert hamming([1, 0, 1, 1], [1, 1, 0, 1]) == 2
    assert hamming([0] * 8, [0] * 8) == 0
    with pytest.raises(ValueError):
        hamming([1, 0], [1, 0, 1])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=64))
def test_hamming_matches_oracle(pairs):
    a, b = zip(*pairs)
    assert hamming(a, b) == hamming_ref(a, b)


def test_filter_rows():
    rows = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=np.uint8)
    assert filter_rows(rows).tolist() == [[1, 1, 0], [1, 1, 1]]


def test_pattern_set_validation():
    with pytest.raises(ValueError):
        PatternSet.from_bits([[1, 0, 0, 0]])  # popcount 1
    with pytest.raises(ValueError):
        PatternSet.from_bits([[1, 1, 0, 0], [1, 1, 0, 0]])
    with pytest.raises(ValueError):
        PatternSet(4, np.array([0b10011], dtype=np.uint64))
    s = PatternSet.from_bits([[1, 1, 0, 0], [0, 1, 1, 1]])
    assert s.q == 2 and s.pattern(2).tolist() == [0, 1, 1, 1]
    with pytest.raises(KeyError):
        s.pattern(3)


def test_mean_tie_rounds_up():
    rows = np.array([[1, 1, 0, 0], [1, 0, 1, 0]], dtype=np.uint8)
    s = kmeans_binary(rows, CalibrationConfig(q=1))
    assert s.bits.tolist() == [[1, 1, 1, 0]]


def test_recovers_planted_clusters(rng):
    k = 16
    centers = np.zeros((4, k), dtype=np.uint8)
    for c in range(4):
        centers[c, 4 * c:4 * c + 4] = 1
    rows = centers[rng.integers(0, 4, 2000)].copy()
    flip = rng.random(rows.shape) < 0.03
    rows ^= flip.astype(np.uint8)
    s = kmeans_binary(filter_rows(rows), CalibrationConfig(q=4, seed=3))
    assert sorted(map(tuple, s.bits.tolist())) == sorted(map(tuple, centers.tolist()))


@pytest.mark.parametrize("init", ["greedy", "random", "kmeans++"])
def test_kmeans_is_deterministic(rng, init):
    rows = filter_rows((rng.random((500, 16)) < 0.3).astype(np.uint8))
    cfg = CalibrationConfig(q=20, seed=7, init=init)
    a, b = kmeans_binary(rows, cfg), kmeans_binary(rows, cfg)
    assert a == b and a.q == 20
    assert np.all(np.bitwise_count(a.codes) >= 2)


def test_short_set_warns(caplog):
    rows = np.array([[1, 1, 0, 0]] * 5 + [[0, 1, 1, 0]] * 3, dtype=np.uint8)
    with caplog.at_level(logging.WARNING):
        s = kmeans_binary(rows, CalibrationConfig(q=512))
    assert s.short and s.q == 2
    assert "2 of 512" in caplog.text


def test_q512_on_100_rows(rng, caplog):
    a = BitMatrix.random(100, 32, 0.3, rng)
    with caplog.at_level(logging.WARNING):
        sets = calibrate(a, TileSpec(16), CalibrationConfig(q=512, sample_fraction=1.0))
    assert len(sets) == 2
    assert all(s.q < 512 and s.short for s in sets)
    assert "requested patterns" in caplog.text


def test_calibrate_one_set_per_partition(rng):
    a = BitMatrix.random(400, 256, 0.1, rng)
    sets = calibrate(a, TileSpec(16), CalibrationConfig(q=16, sample_fraction=0.5))
    assert len(sets) == 16
    assert all(s.k == 16 and s.q == 16 for s in sets)


def test_calibrate_padded_partition_has_no_padding_bits(rng):
    a = BitMatrix.random(300, 20, 0.5, rng)
    sets = calibrate(a, TileSpec(16), CalibrationConfig(q=8, sample_fraction=1.0))
    assert not np.any(sets[1].bits[:, 4:])


def test_sample_rows():
    assert sample_rows(100, 1.0, 0).tolist() == list(range(100))
    s = sample_rows(100, 0.1, 0)
    assert len(s) == 10 and np.array_equal(s, sample_rows(100, 0.1, 0))


def test_config_validation():
    for bad in (dict(q=0), dict(sample_fraction=0), dict(init="nope"), dict(max_iters=0)):
        with pytest.raises(ValueError):
            CalibrationConfig(**bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**31))
def test_pattern_file_roundtrip(k, seed):
    rng = np.random.default_rng(seed)
    sets = []
    for _ in range(3):
        q = int(rng.integers(0, 10))
        bits = rng.integers(0, 2, size=(q, k), dtype=np.uint8)
        bits = np.unique(bits[bits.sum(axis=1) >= 2], axis=0)
        sets.append(PatternSet.from_bits(bits) if len(bits) else PatternSet(k, np.zeros(0)))
    if all(s.q == 0 for s in sets):
        return
    back = parse_patterns(dump_patterns(sets))
    assert back == sets


def test_pattern_file_errors():
    blob = dump_patterns([PatternSet.from_bits([[1, 1, 0, 0]])])
    with pytest.raises(FormatError):
        parse_patterns(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        parse_patterns(blob[:-1])


def test_single_cluster_of_identical_rows():
    rows = np.array([[1, 1, 0, 0]] * 50, dtype=np.uint8)
    assert kmeans_binary(rows, CalibrationConfig(q=1)).bits.tolist() == [[1, 1, 0, 0]]


def test_separated_clusters():
    rows = np.array([[1, 1, 0, 0]] * 50 + [[0, 0, 1, 1]] * 50, dtype=np.uint8)
    s = kmeans_binary(rows, CalibrationConfig(q=2))
    assert sorted(map(tuple, s.bits.tolist())) == [(0, 0, 1, 1), (1, 1, 0, 0)]


@pytest.mark.parametrize("init", ["greedy", "random", "kmeans++"])
def test_cost_within_bound_of_brute_force(init):
    from itertools import combinations

    rng = np.random.default_rng(11)
    rows = filter_rows((rng.random((256, 6)) < 0.4).astype(np.uint8))
    codes = (rows @ (1 << np.arange(6))).astype(np.uint64)
    uniq, weight = np.unique(codes, return_counts=True)
    cands = np.array([c for c in range(64) if c.bit_count() >= 2], dtype=np.uint64)
    dist = np.bitwise_count(uniq[:, None] ^ cands[None, :]).astype(np.int64)
    combos = np.array(list(combinations(range(cands.size), 4)))
    best = (dist[:, combos].min(axis=2) * weight[:, None]).sum(axis=0).min()

    s = kmeans_binary(rows, CalibrationConfig(q=4, init=init, seed=1))
    got = np.bitwise_count(codes[:, None] ^ s.codes[None, :]).min(axis=1).sum()
    assert got <= 1.5 * best
