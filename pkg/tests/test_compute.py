import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import matmul as matmul_ref, random_patterns

from phisparse.binmat import BitMatrix, FormatError, TileSpec
from phisparse.calibration import PatternSet
from phisparse.compute import (
    LifState,
    OpCounter,
    PWPTable,
    bitsparse_ops,
    build_pwp_table,
    dense_matmul,
    dump_pwp,
    lif_layer,
    lif_step,
    parse_pwp,
    phi_matmul,
    phi_matmul_reference,
    pwp_precompute,
)
from phisparse.decompose import decompose


def test_pwp_precompute_example():
    s = PatternSet.from_bits([[1, 1, 0], [0, 1, 1]])
    w = np.array([[1, 10], [2, 20], [4, 40]])
    assert pwp_precompute(s, w).tolist() == [[3, 30], [6, 60]]
    with pytest.raises(ValueError):
        pwp_precompute(s, w[:2])


def test_dense_matmul_example():
    a = BitMatrix.from_dense([[1, 0, 1], [0, 0, 0]])
    w = np.array([[1, 2], [3, 4], [5, 6]])
    assert dense_matmul(a, w).tolist() == [[6, 8], [0, 0]]
    with pytest.raises(ValueError):
        dense_matmul(a, w[:2])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 40), st.integers(1, 70), st.integers(1, 40),
       st.sampled_from([4, 8, 16]))
def test_phi_matmul_matches_dense(seed, m, kk, n, k):
    rng = np.random.default_rng(seed)
    dense = (rng.random((m, kk)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
    a = BitMatrix.from_dense(dense)
    w = rng.integers(-1000, 1000, size=(kk, n))
    sets = random_patterns(rng, dense, k, int(rng.integers(1, 12)))
    spec = TileSpec(k, 16, 8)
    l1, l2 = decompose(a, sets, spec)
    table = build_pwp_table(sets, w)
    got = phi_matmul(l1, l2, table, w, spec)
    assert np.array_equal(got, dense_matmul(a, w))
    assert np.array_equal(got, matmul_ref(dense, w))


def test_reference_loop_agrees(rng):
    dense = (rng.random((20, 40)) < 0.3).astype(np.uint8)
    a = BitMatrix.from_dense(dense)
    w = rng.integers(-50, 50, size=(40, 9))
    sets = random_patterns(rng, dense, 16, 8)
    spec = TileSpec(16)
    l1, l2 = decompose(a, sets, spec)
    table = build_pwp_table(sets, w)
    assert np.array_equal(phi_matmul_reference(l1, l2, table, w, spec),
                          phi_matmul(l1, l2, table, w, spec))


def test_op_counter(rng):
    dense = (rng.random((30, 32)) < 0.3).astype(np.uint8)
    a = BitMatrix.from_dense(dense)
    w = rng.integers(-5, 5, size=(32, 70))
    sets = random_patterns(rng, dense, 16, 8)
    spec = TileSpec(16, 16, 32)
    l1, l2 = decompose(a, sets, spec)
    c = OpCounter()
    phi_matmul(l1, l2, build_pwp_table(sets, w), w, spec, c)
    assert c.l1 == l1.nnz() * 3  # three n-tiles of width 32 cover N=70
    assert c.l2 == l2.nnz() * 3
    assert sum(c.per_partition_l1) == c.l1
    assert bitsparse_ops(a) == int(dense.sum())


def test_float_weights_within_tolerance(rng):
    dense = (rng.random((25, 48)) < 0.25).astype(np.uint8)
    a = BitMatrix.from_dense(dense)
    w = rng.normal(size=(48, 12))
    sets = random_patterns(rng, dense, 16, 10)
    spec = TileSpec(16)
    l1, l2 = decompose(a, sets, spec)
    got = phi_matmul(l1, l2, build_pwp_table(sets, w), w, spec)
    np.testing.assert_allclose(got, dense_matmul(a, w), rtol=1e-4, atol=1e-9)


def test_missing_pwp_row():
    s = PatternSet.from_bits([[1, 1, 0, 0]])
    a = BitMatrix.from_dense([[1, 1, 0, 0]])
    spec = TileSpec(4)
    l1, l2 = decompose(a, [s], spec)
    w = np.eye(4, dtype=np.int64)
    empty = PWPTable(4, [np.zeros((0, 4), dtype=np.int64)])
    with pytest.raises(KeyError):
        phi_matmul(l1, l2, empty, w, spec)


def test_overflow_guard():
    s = PatternSet.from_bits([[1, 1]])
    with pytest.raises(OverflowError):
        pwp_precompute(s, np.full((2, 1), 2**62, dtype=np.int64))


def test_pwp_file_roundtrip(rng):
    sets = [PatternSet.from_bits([[1, 1, 0, 0], [0, 1, 1, 1]]), PatternSet.from_bits([[1, 0, 0, 1]])]
    w = rng.integers(-100, 100, size=(8, 5))
    table = build_pwp_table(sets, w)
    back = parse_pwp(dump_pwp(table), 4, sets)
    assert all(np.array_equal(x, y) for x, y in zip(back.blocks, table.blocks))
    padded = parse_pwp(dump_pwp(table), 4)
    assert padded.blocks[1].shape == (2, 5) and not padded.blocks[1][1].any()
    with pytest.raises(FormatError):
        parse_pwp(dump_pwp(table)[:-4], 4)
    with pytest.raises(FormatError):
        parse_pwp(b"XXXX" + dump_pwp(table)[4:], 4)


def test_lif_step_examples():
    state = LifState.rest(3, threshold=1.0, leak=0.5)
    spikes, state = lif_step([0.6, 1.2, 0.0], state)
    assert spikes.tolist() == [0, 1, 0]
    assert state.v.tolist() == [0.6, 0.0, 0.0]
    spikes, state = lif_step([0.8, 0.2, 0.0], state)
    # 0.5 * 0.6 + 0.8 = 1.1 fires and resets
    assert spikes.tolist() == [1, 0, 0]
    assert state.v.tolist() == [0.0, 0.2, 0.0]
    with pytest.raises(ValueError):
        lif_step([1.0], state)
    with pytest.raises(ValueError):
        LifState.rest(2, leak=1.5)


def test_lif_layer_chains_into_next_layer(rng):
    currents = rng.normal(0.5, 0.5, size=(6, 10))
    spikes, state = lif_layer(currents, LifState.rest(10))
    assert spikes.shape == (6, 10)
    v = np.zeros(10)
    for t in range(6):
        v = v + currents[t]
        fired = v >= 1.0
        assert np.array_equal(spikes.to_dense()[t], fired.astype(np.uint8))
        v[fired] = 0.0
    np.testing.assert_allclose(state.v, v)
