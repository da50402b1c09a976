"""Integer inner loops of the crossbar simulator.

Each kernel has a numba implementation and a numpy implementation with the
same contract; ``JIT_ENABLED`` picks the default. All arithmetic is int64.
"""
from __future__ import annotations

import numpy as np

from cimforge._jit import JIT_ENABLED, njit


def mvm_batch_numpy(g_pos: np.ndarray, g_neg: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Column currents ``sum_j v_j (g+_jk - g-_jk)`` for each row of ``inputs``."""
    diff = g_pos.astype(np.int64) - g_neg.astype(np.int64)
    return np.asarray(inputs, dtype=np.int64) @ diff


@njit
def _mvm_batch_loops(g_pos, g_neg, inputs):
    n_vec, rows = inputs.shape
    cols = g_pos.shape[1]
    out = np.zeros((n_vec, cols), dtype=np.int64)
    for b in range(n_vec):
        for j in range(rows):
            v = inputs[b, j]
            if v == 0:
                continue
            for k in range(cols):
                out[b, k] += v * (g_pos[j, k] - g_neg[j, k])
    return out


def mvm_batch_numba(g_pos: np.ndarray, g_neg: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    return _mvm_batch_loops(
        np.ascontiguousarray(g_pos, dtype=np.int64),
        np.ascontiguousarray(g_neg, dtype=np.int64),
        np.ascontiguousarray(inputs, dtype=np.int64),
    )


def digit_planes_numpy(values: np.ndarray, digit_bits: int, n_digits: int) -> np.ndarray:
    """Base-``2**digit_bits`` digits of nonnegative ``values`` (..., n) -> (..., n_digits, n).

    Least-significant digit first.
    """
    values = np.asarray(values, dtype=np.int64)
    mask = (1 << digit_bits) - 1
    shifts = np.arange(n_digits, dtype=np.int64) * digit_bits
    planes = (values[..., None, :] >> shifts[:, None]) & mask
    return planes


@njit
def _digit_planes_loops(values, digit_bits, n_digits):
    n_vec, n = values.shape
    mask = (1 << digit_bits) - 1
    out = np.zeros((n_vec, n_digits, n), dtype=np.int64)
    for b in range(n_vec):
        for j in range(n):
            v = values[b, j]
            for d in range(n_digits):
                out[b, d, j] = (v >> (d * digit_bits)) & mask
    return out


def digit_planes_numba(values: np.ndarray, digit_bits: int, n_digits: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    flat = np.ascontiguousarray(values.reshape(-1, values.shape[-1]))
    out = _digit_planes_loops(flat, digit_bits, n_digits)
    return out.reshape(values.shape[:-1] + (n_digits, values.shape[-1]))


if JIT_ENABLED:
    mvm_batch = mvm_batch_numba
    digit_planes = digit_planes_numba
else:
    mvm_batch = mvm_batch_numpy
    digit_planes = digit_planes_numpy
