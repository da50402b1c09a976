"""Closed-form latency model of a single-core crossbar accelerator.

Per layer ``l`` with a (M_l x N_l) weight matrix applied to V_l input vectors::

    N_write = ceil(2 * M_l / M * ceil(w_bit / r_cell)) * ceil(N_l / N)
    N_mvm   = V_l * N_write * ceil(a_bit / r_dac)
    T       = sum_l r_repeat * (N_write * t_write + N_mvm * t_mvm)

The outer ceiling of N_write is evaluated exactly on the rational product, which
equals ``ceil(2 * M_l * n_slices / M)``. Latencies are exact ``Fraction`` values
in microseconds.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from cimforge.config import QuantConfig
from cimforge.target import CimTarget, format_us

LAYER_KINDS = ("Conv2D", "Dense", "MatMul")
SAL_EPSILON = Fraction(1, 1000)  # percent


def _ceil(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


@dataclass(frozen=True)
class ConvParams:
    c_in: int
    c_out: int
    k_h: int
    k_w: int
    h_out: int
    w_out: int


@dataclass(frozen=True)
class LayerDesc:
    id: str
    kind: str
    m_l: int
    n_l: int
    v_l: int = 1
    r_repeat: int = 1
    conv_params: ConvParams | None = None
    seq_len: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.id}: unknown kind {self.kind!r}")
        for name in ("m_l", "n_l", "v_l", "r_repeat"):
            if getattr(self, name) < 1:
                raise ValueError(f"layer {self.id}: {name} must be >= 1")
        if self.kind == "Conv2D" and self.conv_params is not None:
            if (self.m_l, self.n_l, self.v_l) != gemm_dims(self.conv_params):
                raise ValueError(f"layer {self.id}: GEMM dims disagree with conv params")
        if self.seq_len is not None and self.kind in ("Dense", "MatMul") and self.v_l != self.seq_len:
            raise ValueError(f"layer {self.id}: attention layers need v_l == seq_len")

    @classmethod
    def conv(cls, id: str, c_in: int, c_out: int, k_h: int, k_w: int, h_out: int, w_out: int,
             r_repeat: int = 1) -> "LayerDesc":
        params = ConvParams(c_in, c_out, k_h, k_w, h_out, w_out)
        m, n, v = gemm_dims(params)
        return cls(id, "Conv2D", m, n, v, r_repeat, conv_params=params)

    @classmethod
    def dense(cls, id: str, n_in: int, n_out: int, seq_len: int | None = None,
              r_repeat: int = 1) -> "LayerDesc":
        return cls(id, "Dense", n_out, n_in, seq_len or 1, r_repeat, seq_len=seq_len)


def gemm_dims(conv: ConvParams) -> tuple[int, int, int]:
    """(M_l, N_l, V_l) of the im2col GEMM equivalent to a Conv2D."""
    return conv.c_out, conv.c_in * conv.k_h * conv.k_w, conv.h_out * conv.w_out


def n_write(layer: LayerDesc, w_bit: int, target: CimTarget) -> int:
    slices = -(-w_bit // target.r_cell)
    col_tiles = _ceil(Fraction(2 * layer.m_l, target.cols_m) * slices)
    row_tiles = -(-layer.n_l // target.rows_n)
    return col_tiles * row_tiles


def n_mvm(layer: LayerDesc, w_bit: int, a_bit: int, target: CimTarget) -> int:
    return layer.v_l * n_write(layer, w_bit, target) * (-(-a_bit // target.r_dac))


def layer_latency(layer: LayerDesc, w_bit: int, a_bit: int, target: CimTarget) -> Fraction:
    """One layer's term of the total latency, repeat factor included."""
    writes = n_write(layer, w_bit, target)
    mvms = n_mvm(layer, w_bit, a_bit, target)
    return layer.r_repeat * (writes * target.t_write + mvms * target.t_mvm)


def total_latency(layers: Sequence[LayerDesc], config: QuantConfig, target: CimTarget) -> Fraction:
    total = Fraction(0)
    for layer in layers:
        w_bit, a_bit = config[layer.id]
        total += layer_latency(layer, w_bit, a_bit, target)
    return total


def baseline_latency(layers: Sequence[LayerDesc], target: CimTarget, bits: int = 8) -> Fraction:
    return total_latency(layers, QuantConfig.uniform([l.id for l in layers], bits, bits), target)


class LatencyLut:
    """Per-layer latency for every (w_bit, a_bit) in [b_min, b_max]^2."""

    def __init__(self, layers: Sequence[LayerDesc], target: CimTarget):
        self.layer_ids = [l.id for l in layers]
        self.b_min, self.b_max = target.b_min, target.b_max
        self.table: dict[str, dict[tuple[int, int], Fraction]] = {
            l.id: {(w, a): layer_latency(l, w, a, target)
                   for w in target.bit_range for a in target.bit_range}
            for l in layers
        }

    def __getitem__(self, key: tuple[str, int, int]) -> Fraction:
        layer_id, w_bit, a_bit = key
        return self.table[layer_id][(w_bit, a_bit)]

    def __len__(self) -> int:
        return sum(len(v) for v in self.table.values())

    def latency(self, config: QuantConfig) -> Fraction:
        return sum((self.table[lid][config[lid]] for lid in self.layer_ids), Fraction(0))

    def rows(self) -> Iterable[tuple[str, int, int, Fraction]]:
        for lid in self.layer_ids:
            for (w, a), value in sorted(self.table[lid].items()):
                yield lid, w, a, value

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_id", "w_bit", "a_bit", "latency_us"])
        for lid, w, a, value in self.rows():
            writer.writerow([lid, w, a, format_us(value)])
        return buf.getvalue()


def build_lut(layers: Sequence[LayerDesc], target: CimTarget) -> LatencyLut:
    return LatencyLut(layers, target)


def speedup_and_score(t_8b, t_q, acc_8b, acc_q) -> tuple[float, float]:
    """Speedup over the 8-bit baseline and speedup per percent of accuracy loss.

    The loss magnitude is floored at 0.001 % so a lossless result scores finitely.
    """
    t_8b, t_q = Fraction(t_8b), Fraction(t_q)
    if t_q <= 0:
        raise ValueError("T_q must be positive")
    speedup = t_8b / t_q
    loss = abs(Fraction(acc_q) - Fraction(acc_8b))
    score = speedup / max(loss, SAL_EPSILON)
    return float(speedup), float(score)
