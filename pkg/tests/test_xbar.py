import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cimforge import kernels
from cimforge.quant import qrange
from cimforge.target import CimTarget
from cimforge.xbar import (
    AccumulatorOverflow,
    CrossbarError,
    CrossbarState,
    InputEncoding,
    map_weights,
    sliced_mvm,
    xbar_mvm,
    xbar_write,
)

DIMS = [(8, 8), (17, 17), (256, 256)]


def _target(rows=256, cols=256, r_cell=4, r_dac=1):
    return CimTarget(rows_n=rows, cols_m=cols, r_cell=r_cell, r_dac=r_dac)


def test_map_weights_negative_example():
    sw = map_weights(np.array([[-5]]), 4, _target(r_cell=2))
    assert sw.slice_weights == [1, 4]
    g_pos, g_neg = sw.slices[0]
    assert g_pos.sum() == 0
    assert g_neg[0].tolist() == [0, 1, 0, 1]  # (+,-) per slice; 5 = 1*4 + 1*1
    assert sw.reconstruct().tolist() == [[-5]]


def test_map_weights_positive_and_zero():
    sw = map_weights(np.array([[7]]), 8, _target())
    g_pos, g_neg = sw.slices[0]
    assert g_pos[0].tolist() == [7, 0, 0, 0] and g_neg.sum() == 0
    assert sw.slice_weights == [1, 16]
    z = map_weights(np.zeros((3, 2), dtype=int), 6, _target(r_cell=2))
    assert all(p.sum() == 0 and n.sum() == 0 for p, n in z.slices)


def test_map_weights_names_bad_index():
    w = np.zeros((4, 3), dtype=int)
    w[2, 1] = 9
    with pytest.raises(CrossbarError, match=r"\(2, 1\)"):
        map_weights(w, 4, _target())


def test_write_counter_and_occupancy():
    st_ = CrossbarState.for_target(_target())
    tile = (np.full((256, 256), 15), np.zeros((256, 256), dtype=int))
    xbar_write(st_, tile)
    assert st_.write_count == 1
    assert (st_.g_pos == 15).all()
    with pytest.raises(CrossbarError):
        xbar_write(st_, (np.full((2, 2), 16), np.zeros((2, 2), dtype=int)))
    assert st_.write_count == 1


def test_mvm_examples(rng):
    st_ = CrossbarState.for_target(_target(8, 8))
    assert xbar_mvm(st_, np.zeros(8, dtype=int)).tolist() == [0] * 8
    g_pos = np.zeros((8, 8), dtype=int)
    g_neg = np.zeros((8, 8), dtype=int)
    g_pos[3, 5], g_neg[3, 5] = 3, 1
    xbar_write(st_, (g_pos, g_neg))
    v = np.zeros(8, dtype=int)
    v[3] = 1
    assert xbar_mvm(st_, v)[5] == 2
    gp, gn = rng.integers(0, 16, (8, 8)), rng.integers(0, 16, (8, 8))
    xbar_write(st_, (gp, gn))
    v = rng.integers(0, 2, 8)
    assert xbar_mvm(st_, v).tolist() == ((gp - gn).T @ v).tolist()
    assert st_.mvm_count == 3


def test_mvm_rejects_out_of_range_input():
    st_ = CrossbarState.for_target(_target(8, 8))
    with pytest.raises(CrossbarError):
        xbar_mvm(st_, np.full(8, 2))
    with pytest.raises(CrossbarError):
        xbar_mvm(st_, np.ones(7, dtype=int))


def test_sliced_mvm_examples():
    for r_cell in (1, 2, 4):
        for rows, cols in DIMS:
            t = _target(rows, cols, r_cell)
            assert sliced_mvm(np.array([[-5], [3]]), np.array([2, 3]), 4, 2, t, signed=False).tolist() == [-1]
            assert sliced_mvm(np.array([[-5], [3]]), np.zeros(2, dtype=int), 4, 2, t).tolist() == [0]


@st.composite
def mvm_case(draw):
    w_bit, a_bit = draw(st.integers(2, 8)), draw(st.integers(2, 8))
    n, m = draw(st.integers(1, 24)), draw(st.integers(1, 24))
    signed = draw(st.booleans())
    seed = draw(st.integers(0, 2 ** 31))
    r_cell, r_dac = draw(st.sampled_from([1, 2, 4])), draw(st.sampled_from([1, 2]))
    rows, cols = draw(st.sampled_from(DIMS))
    rng = np.random.default_rng(seed)
    wl, wh = qrange(w_bit, True)
    xl, xh = qrange(a_bit, signed)
    w = rng.integers(wl, wh + 1, (n, m))
    x = rng.integers(xl, xh + 1, (draw(st.integers(1, 3)), n))
    return w, x, w_bit, a_bit, signed, _target(rows, cols, r_cell, r_dac)


@given(mvm_case())
def test_sliced_mvm_is_bit_exact(case):
    w, x, w_bit, a_bit, signed, t = case
    st_ = CrossbarState.for_target(t)
    out = sliced_mvm(w, x, w_bit, a_bit, t, signed=signed, state=st_)
    assert np.array_equal(out, x @ w)
    # counters: one write per tile, one MVM per (tile, vector, plane)
    sw = map_weights(w, w_bit, t)
    enc = InputEncoding(a_bit, t.r_dac, signed)
    assert st_.write_count == sw.n_tiles
    assert st_.mvm_count == sw.n_tiles * len(x) * enc.n_planes


@given(st.integers(2, 8), st.integers(1, 4), st.integers(1, 12), st.integers(1, 12), st.integers(0, 10 ** 6))
def test_reconstruction(w_bit, r_cell, n, m, seed):
    lo, hi = qrange(w_bit, True)
    w = np.random.default_rng(seed).integers(lo, hi + 1, (n, m))
    sw = map_weights(w, w_bit, _target(8, 8, r_cell))
    assert np.array_equal(sw.reconstruct(), w)
    assert sw.n_slices == -(-w_bit // r_cell)
    for g_pos, g_neg in sw.slices:
        assert g_pos.min() >= 0 and g_pos.max() < 2 ** r_cell and g_neg.max() < 2 ** r_cell


def test_accumulator_overflow():
    w = np.full((256, 1), 127)
    x = np.full(256, 2 ** 17 - 1)
    with pytest.raises(AccumulatorOverflow):
        sliced_mvm(w, x, 8, 18, _target(), signed=False)


def test_signed_offset_encoding_roundtrip(rng):
    enc = InputEncoding(4, 2, True)  # (4-1) % 2 != 0 -> offset binary
    assert enc.mode == "offset" and enc.offset == 8
    w = rng.integers(-7, 8, (5, 3))
    x = rng.integers(-7, 8, (4, 5))
    assert np.array_equal(sliced_mvm(w, x, 4, 4, _target(8, 8, 2, 2), signed=True), x @ w)


def test_kernel_paths_agree(rng):
    gp, gn = rng.integers(0, 16, (17, 9)), rng.integers(0, 16, (17, 9))
    v = rng.integers(0, 4, (5, 17))
    assert np.array_equal(kernels.mvm_batch_numpy(gp, gn, v), kernels.mvm_batch_numba(gp, gn, v))
    vals = rng.integers(0, 256, (3, 11))
    assert np.array_equal(kernels.digit_planes_numpy(vals, 2, 4), kernels.digit_planes_numba(vals, 2, 4))
