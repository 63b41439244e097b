import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from phisparse.binmat import (
    BitMatrix,
    FormatError,
    TernaryMatrix,
    TileSpec,
    all_tile_codes,
    bits_to_codes,
    codes_to_bits,
    density,
    dump_bitmatrix,
    dump_ternary,
    dump_weights,
    parse_bitmatrix,
    parse_ternary,
    parse_weights,
    tile,
    tile_codes,
)

dense_mats = st.integers(1, 40).flatmap(
    lambda m: st.integers(1, 70).flatmap(
        lambda k: arrays(np.uint8, (m, k), elements=st.integers(0, 1))))


@given(dense_mats)
def test_dense_roundtrip(d):
    a = BitMatrix.from_dense(d)
    assert a.shape == d.shape
    assert np.array_equal(a.to_dense(), d)
    assert a.popcount() == int(d.sum())
    assert np.array_equal(a.row_popcounts(), d.sum(axis=1))


@given(dense_mats)
def test_file_roundtrip(d):
    a = BitMatrix.from_dense(d)
    assert parse_bitmatrix(dump_bitmatrix(a)) == a


def test_lsb_first_layout():
    a = BitMatrix.from_dense([[1, 0, 0, 0, 0, 0, 0, 0, 1]])
    assert a.bits.tolist() == [[0b00000001, 0b00000001]]
    blob = dump_bitmatrix(a)
    assert blob[:4] == b"PHIA"
    assert blob[4:12] == (1).to_bytes(4, "little") + (9).to_bytes(4, "little")


def test_from_dense_rejects_non_binary():
    with pytest.raises(ValueError):
        BitMatrix.from_dense([[0, 2]])


def test_parse_errors():
    a = BitMatrix.from_dense([[1, 0, 1]])
    blob = dump_bitmatrix(a)
    with pytest.raises(FormatError):
        parse_bitmatrix(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        parse_bitmatrix(blob[:-1])
    with pytest.raises(FormatError):
        parse_bitmatrix(blob[:-1] + bytes([0xFF]))  # padding bits set


def test_tile_pads_last_partition():
    d = np.ones((2, 20), dtype=np.uint8)
    a = BitMatrix.from_dense(d)
    last = tile(a, 1, 16)
    assert last.shape == (2, 16)
    assert last.to_dense()[:, :4].all() and not last.to_dense()[:, 4:].any()
    with pytest.raises(IndexError):
        tile(a, 2, 16)
    assert TileSpec().partitions(20) == 2


def test_codes_match_bits(rng):
    d = (rng.random((30, 50)) < 0.4).astype(np.uint8)
    a = BitMatrix.from_dense(d)
    codes = all_tile_codes(a, 16)
    assert codes.shape == (30, 4)
    for j in range(4):
        assert np.array_equal(codes[:, j], tile_codes(a, j, 16))
        assert np.array_equal(codes_to_bits(codes[:, j], 16), tile(a, j, 16).to_dense())
    row = np.array([[1, 1, 0, 1]], dtype=np.uint8)
    assert bits_to_codes(row).tolist() == [0b1011]


def test_density():
    assert density(BitMatrix.from_dense([[1, 0], [0, 0]])) == 0.25
    with pytest.raises(ValueError):
        density(BitMatrix.zeros(0, 4))


def test_ternary_codes():
    t = TernaryMatrix(np.array([[0, 1, -1, 0, 1]], dtype=np.int8))
    blob = dump_ternary(t)
    assert blob[:4] == b"PHIT"
    # 00, 01, 11, 00 packed LSB first, then 01 and zero padding
    assert blob[12:] == bytes([0b00_11_01_00, 0b00_00_00_01])
    assert parse_ternary(blob) == t
    assert t.nnz() == 3 and t.count(1) == 2 and t.count(-1) == 1


def test_ternary_rejects_invalid_code():
    blob = bytearray(dump_ternary(TernaryMatrix(np.zeros((1, 4), dtype=np.int8))))
    blob[12] = 0b10
    with pytest.raises(FormatError):
        parse_ternary(bytes(blob))
    with pytest.raises(ValueError):
        TernaryMatrix(np.array([[2]]))


@settings(max_examples=50)
@given(arrays(np.int8, st.tuples(st.integers(1, 10), st.integers(1, 30)), elements=st.integers(-1, 1)))
def test_ternary_roundtrip(v):
    assert parse_ternary(dump_ternary(TernaryMatrix(v))) == TernaryMatrix(v)


def test_weights_roundtrip(rng):
    w = rng.integers(-2**31, 2**31, size=(7, 5), dtype=np.int64).astype(np.int32)
    assert np.array_equal(parse_weights(dump_weights(w)), w)
    with pytest.raises(ValueError):
        dump_weights(np.array([[2**40]]))
    with pytest.raises(ValueError):
        dump_weights(np.array([[0.5]]))


def test_random_density(rng):
    a = BitMatrix.random(200, 200, 0.1, rng)
    assert abs(density(a) - 0.1) < 0.01
