import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cimforge.quant import (
    QTensor,
    dequantize,
    fake_quant_backward,
    fake_quant_forward,
    qrange,
    quantize_symmetric,
    quantize_with_scale,
    requantize,
    requantize_by,
    round_half_away,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_quantize_examples():
    q = quantize_symmetric([-2.0, 1.0, 0.0], 4)
    assert q.data.tolist() == [-7, 4, 0] and q.scale == pytest.approx(2 / 7)
    q = quantize_symmetric([0.5], 8)
    assert q.data.tolist() == [127] and q.scale == pytest.approx(0.5 / 127)
    q = quantize_symmetric([0.0, 0.0], 5)
    assert q.data.tolist() == [0, 0] and q.scale == 1.0


def test_dequantize_examples():
    np.testing.assert_allclose(dequantize(QTensor(np.array([-7, 4, 0]), 2 / 7, 4)), [-2.0, 8 / 7, 0.0])
    np.testing.assert_allclose(dequantize(QTensor(np.array([127]), 0.5 / 127, 8)), [0.5])


def test_requantize_examples():
    assert requantize(np.array([100]), 0.5, 0.1, 1.0, 8, True).data.tolist() == [5]
    assert requantize_by(np.array([100]), 0.055, 3, True).tolist() == [3]
    assert requantize(np.array([0]), 3.0, 7.0, 0.1, 4, False).data.tolist() == [0]


def test_fake_quant_examples():
    np.testing.assert_allclose(fake_quant_forward(np.array([-2.0, 1.0]), 4), [-2.0, 8 / 7])
    grid = np.arange(-127, 128) * (3.0 / 127)
    np.testing.assert_allclose(fake_quant_forward(grid, 8), grid)
    assert fake_quant_backward(np.array([1.0, 2.0]), np.array([5.0, -3.0])).tolist() == [1.0, 2.0]
    assert fake_quant_backward(np.array([0.0])).tolist() == [0.0]


def test_rounding_is_half_away_from_zero():
    assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]


def test_qtensor_invariants():
    with pytest.raises(ValueError):
        QTensor(np.array([8]), 1.0, 4)
    with pytest.raises(ValueError):
        QTensor(np.array([-1]), 1.0, 4, signed=False)
    with pytest.raises(ValueError):
        QTensor(np.array([1]), 1.0, 4, zero_point=3)
    assert qrange(4, True) == (-7, 7) and qrange(4, False) == (0, 15)


@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.integers(2, 8), st.booleans())
def test_quantize_range_and_error_bound(x, bits, signed):
    if not signed:
        x = np.abs(x)
    q = quantize_symmetric(x, bits, signed)
    lo, hi = qrange(bits, signed)
    assert q.data.min() >= lo and q.data.max() <= hi
    assert np.all(np.abs(dequantize(q) - x) <= q.scale / 2 + 1e-9 * max(1.0, np.abs(x).max()))


@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.integers(2, 8))
def test_fake_quant_is_idempotent(x, bits):
    once = fake_quant_forward(x, bits)
    np.testing.assert_allclose(fake_quant_forward(once, bits), once, rtol=1e-12, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 30), elements=finite))
def test_ste_preserves_gradient_sum(g):
    assert fake_quant_backward(g).sum() == pytest.approx(g.sum())


@given(st.lists(st.integers(-(2 ** 20), 2 ** 20), min_size=1, max_size=20),
       st.floats(1e-6, 10.0), st.integers(2, 8), st.booleans())
def test_requantize_stays_in_range(acc, mult, bits, signed):
    out = requantize_by(np.array(acc), mult, bits, signed)
    lo, hi = qrange(bits, signed)
    assert out.min() >= lo and out.max() <= hi


def test_quantize_with_frozen_scale_clips():
    assert quantize_with_scale([10.0, -10.0], 1.0, 4).tolist() == [7, -7]
    np.testing.assert_allclose(fake_quant_forward(np.array([0.3, 9.0]), 4, scale=0.5), [0.5, 3.5])
