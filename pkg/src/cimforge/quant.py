"""Symmetric per-tensor linear quantization.

Zero points are always 0. Rounding is half-away-from-zero everywhere so that the
integer pipeline is reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def qrange(bits: int, signed: bool) -> tuple[int, int]:
    """Inclusive integer range; the signed range is symmetric (no -2^(B-1))."""
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    if signed:
        hi = (1 << (bits - 1)) - 1
        return -hi, hi
    return 0, (1 << bits) - 1


@dataclass(frozen=True, eq=False)
class QTensor:
    data: np.ndarray
    scale: float
    bits: int
    signed: bool = True
    zero_point: int = 0

    def __post_init__(self) -> None:
        if self.zero_point != 0:
            raise ValueError("only symmetric quantization (zero_point=0) is supported")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        lo, hi = qrange(self.bits, self.signed)
        if self.data.size and (self.data.min() < lo or self.data.max() > hi):
            raise ValueError(f"data outside [{lo}, {hi}] for {self.bits}-bit")


def quantize_symmetric(x, bits: int, signed: bool = True) -> QTensor:
    """Quantize ``x`` with a scale derived from its own range.

    An all-zero input yields zeros with scale 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty array")
    lo, hi = qrange(bits, signed)
    peak = float(np.max(np.abs(x))) if signed else float(np.max(x))
    if peak <= 0.0 or hi == 0:
        return QTensor(np.zeros(x.shape, dtype=np.int64), 1.0, bits, signed)
    q = np.clip(round_half_away(x * (hi / peak)), lo, hi).astype(np.int64)
    return QTensor(q, peak / hi, bits, signed)


def quantize_with_scale(x, scale: float, bits: int, signed: bool = True) -> np.ndarray:
    """Quantize against a frozen scale (what a Quantize node does)."""
    lo, hi = qrange(bits, signed)
    x = np.asarray(x, dtype=np.float64)
    return np.clip(round_half_away(x / scale), lo, hi).astype(np.int64)


def dequantize(q: QTensor) -> np.ndarray:
    return q.data.astype(np.float64) * q.scale


def requantize_by(acc, multiplier: float, bits: int, signed: bool = True) -> np.ndarray:
    lo, hi = qrange(bits, signed)
    acc = np.asarray(acc, dtype=np.int64)
    scaled = acc.astype(np.float64) * float(multiplier)
    return np.clip(round_half_away(scaled), lo, hi).astype(np.int64)


def requantize(acc, s_in: float, s_w: float, s_out: float, bits_out: int,
               signed_out: bool = True) -> QTensor:
    """Rescale a 32-bit accumulator (scale ``s_in*s_w``) into ``bits_out`` at ``s_out``."""
    if min(s_in, s_w, s_out) <= 0:
        raise ValueError("scales must be positive")
    data = requantize_by(acc, (s_in * s_w) / s_out, bits_out, signed_out)
    return QTensor(data, s_out, bits_out, signed_out)


def fake_quant_forward(x, bits: int, signed: bool = True, scale: float | None = None) -> np.ndarray:
    """Quantize-dequantize in the real domain, with the tensor's own scale unless one is given."""
    if scale is None:
        return dequantize(quantize_symmetric(x, bits, signed))
    return quantize_with_scale(x, scale, bits, signed).astype(np.float64) * scale


def fake_quant_backward(upstream_grad, x=None) -> np.ndarray:
    """Straight-through estimator: the gradient passes unchanged.

    No clipping mask is applied, also when a frozen scale clips outliers.
    """
    grad = np.asarray(upstream_grad, dtype=np.float64)
    if x is not None and np.shape(x) != grad.shape:
        raise ValueError("gradient and input shapes differ")
    return grad.copy()
