"""Bit-exact model of a differential 1T1R RRAM crossbar.

Physical layout
---------------
The crossbar has ``rows_n`` word lines and ``cols_m`` bit lines. A signed
weight column is realised differentially: its positive part ``max(w, 0)`` sits
on one bit line and its negative part ``max(-w, 0)`` on another, and the host
subtracts the two currents. Each magnitude is further split into
``ceil(w_bit / r_cell)`` base-``2**r_cell`` digits (weight bit slices). Every
(slice, output column, polarity) triple therefore needs one bit line, and these
``2 * M_l * n_slices`` bit lines are packed densely into column tiles of
``cols_m``; rows are tiled by ``rows_n``. One tile is one crossbar write.

A bit line holding a positive part stores its digits in ``g_pos`` and a bit line
holding a negative part stores them in ``g_neg``, so the per-column current is
``sum_j v_j (g+_jk - g-_jk)`` for every column.

Inputs are streamed as base-``2**r_dac`` digit planes, one MVM per plane.
Signed inputs use two's complement; when the top plane carries only the sign bit
its partial sum is weighted by ``-2**(a_bit-1)``. Otherwise the input is offset
by ``2**(a_bit-1)`` and the host subtracts the precomputed column sums.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cimforge import kernels
from cimforge.quant import qrange
from cimforge.target import CimTarget

ACC_LIMIT = 1 << 31


class CrossbarError(ValueError):
    pass


class AccumulatorOverflow(CrossbarError):
    pass


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def n_weight_slices(w_bit: int, r_cell: int) -> int:
    return ceil_div(w_bit, r_cell)


def n_input_planes(a_bit: int, r_dac: int) -> int:
    return ceil_div(a_bit, r_dac)


@dataclass
class CrossbarState:
    rows_n: int
    cols_m: int
    r_cell: int
    r_dac: int = 1
    g_pos: np.ndarray = None
    g_neg: np.ndarray = None
    write_count: int = 0
    mvm_count: int = 0

    def __post_init__(self) -> None:
        if self.g_pos is None:
            self.g_pos = np.zeros((self.rows_n, self.cols_m), dtype=np.int64)
        if self.g_neg is None:
            self.g_neg = np.zeros((self.rows_n, self.cols_m), dtype=np.int64)

    @classmethod
    def for_target(cls, target: CimTarget) -> "CrossbarState":
        return cls(target.rows_n, target.cols_m, target.r_cell, target.r_dac)

    @property
    def cell_max(self) -> int:
        return (1 << self.r_cell) - 1

    def write(self, tile: tuple[np.ndarray, np.ndarray]) -> None:
        g_pos, g_neg = (np.asarray(t, dtype=np.int64) for t in tile)
        if g_pos.shape != g_neg.shape or g_pos.ndim != 2:
            raise CrossbarError("tile halves must be 2-D arrays of equal shape")
        rows, cols = g_pos.shape
        if rows > self.rows_n or cols > self.cols_m:
            raise CrossbarError(
                f"tile {rows}x{cols} exceeds crossbar {self.rows_n}x{self.cols_m}")
        for name, half in (("g_pos", g_pos), ("g_neg", g_neg)):
            if half.size and (half.min() < 0 or half.max() > self.cell_max):
                raise CrossbarError(
                    f"{name} cell value outside [0, {self.cell_max}] for r_cell={self.r_cell}")
        self.g_pos = np.zeros((self.rows_n, self.cols_m), dtype=np.int64)
        self.g_neg = np.zeros((self.rows_n, self.cols_m), dtype=np.int64)
        self.g_pos[:rows, :cols] = g_pos
        self.g_neg[:rows, :cols] = g_neg
        self.write_count += 1

    def mvm(self, v: np.ndarray) -> np.ndarray:
        return self.mvm_many(np.asarray(v)[None, :])[0]

    def mvm_many(self, vs: np.ndarray) -> np.ndarray:
        """Run ``len(vs)`` MVMs against the resident tile (one per row of ``vs``)."""
        vs = np.asarray(vs, dtype=np.int64)
        if vs.ndim != 2 or vs.shape[1] != self.rows_n:
            raise CrossbarError(f"input vectors must have length rows_n={self.rows_n}")
        dac_max = (1 << self.r_dac) - 1
        if vs.size and (vs.min() < 0 or vs.max() > dac_max):
            raise CrossbarError(f"input element outside DAC range [0, {dac_max}]")
        out = kernels.mvm_batch(self.g_pos, self.g_neg, vs)
        self.mvm_count += vs.shape[0]
        return out


def xbar_write(state: CrossbarState, tile) -> CrossbarState:
    state.write(tile)
    return state


def xbar_mvm(state: CrossbarState, v) -> np.ndarray:
    return state.mvm(v)


@dataclass
class SlicedWeights:
    """Weight matrix (N_l x M_l) mapped onto crossbar tiles.

    ``slices[t]`` is the ``(g_pos, g_neg)`` pair written for tile ``t``;
    ``column_map[t]`` holds one ``(slice, output_col, polarity)`` row per used
    bit line. Tiles are ordered column-tile major.
    """

    slices: list[tuple[np.ndarray, np.ndarray]]
    slice_weights: list[int]
    tile_coords: list[tuple[int, int]]
    column_map: list[np.ndarray]
    row_ranges: list[tuple[int, int]]
    shape: tuple[int, int]
    w_bit: int
    r_cell: int
    col_sums: list[np.ndarray] = field(default_factory=list)

    @property
    def n_slices(self) -> int:
        return len(self.slice_weights)

    @property
    def n_tiles(self) -> int:
        return len(self.slices)

    def reconstruct(self) -> np.ndarray:
        w = np.zeros(self.shape, dtype=np.int64)
        for (g_pos, g_neg), cmap, (r0, r1) in zip(self.slices, self.column_map, self.row_ranges):
            for c, (s, k, _pol) in enumerate(cmap):
                w[r0:r1, k] += self.slice_weights[s] * (g_pos[:, c] - g_neg[:, c])
        return w

    def tile_slice_indices(self, t: int) -> list[int]:
        return sorted({int(s) for s in self.column_map[t][:, 0]})


def column_layout(m_l: int, n_slices: int) -> np.ndarray:
    """Bit-line order: slice-major, then output column, then (+, -)."""
    s = np.repeat(np.arange(n_slices), 2 * m_l)
    k = np.tile(np.repeat(np.arange(m_l), 2), n_slices)
    pol = np.tile(np.array([1, -1]), m_l * n_slices)
    return np.stack([s, k, pol], axis=1).astype(np.int64)


def map_weights(w, w_bit: int, target: CimTarget) -> SlicedWeights:
    w = np.asarray(w)
    if w.ndim != 2 or min(w.shape) < 1:
        raise CrossbarError("weight matrix must be 2-D and non-empty")
    if not np.issubdtype(w.dtype, np.integer):
        if not np.all(np.equal(np.mod(w, 1), 0)):
            raise CrossbarError("weights must be integers")
    w = w.astype(np.int64)
    lo, hi = qrange(w_bit, True)
    bad = np.argwhere((w < lo) | (w > hi))
    if len(bad):
        idx = tuple(int(i) for i in bad[0])
        raise CrossbarError(
            f"weight {int(w[idx])} at index {idx} outside [{lo}, {hi}] for w_bit={w_bit}")
    n_l, m_l = w.shape
    r_cell = target.r_cell
    n_slices = n_weight_slices(w_bit, r_cell)
    mask = (1 << r_cell) - 1

    layout = column_layout(m_l, n_slices)
    w_pos = np.maximum(w, 0)
    w_neg = np.maximum(-w, 0)
    # (N_l, n_cols) digit per bit line
    mags = np.where(layout[:, 2] > 0, w_pos[:, layout[:, 1]], w_neg[:, layout[:, 1]])
    digits = (mags >> (layout[:, 0] * r_cell)) & mask
    is_pos = layout[:, 2] > 0

    n_cols = layout.shape[0]
    slices, coords, cmaps, rranges, col_sums = [], [], [], [], []
    for ct in range(ceil_div(n_cols, target.cols_m)):
        c0, c1 = ct * target.cols_m, min(n_cols, (ct + 1) * target.cols_m)
        for rt in range(ceil_div(n_l, target.rows_n)):
            r0, r1 = rt * target.rows_n, min(n_l, (rt + 1) * target.rows_n)
            block = digits[r0:r1, c0:c1]
            pos = np.where(is_pos[c0:c1], block, 0)
            neg = np.where(is_pos[c0:c1], 0, block)
            slices.append((pos, neg))
            coords.append((rt, ct))
            cmaps.append(layout[c0:c1])
            rranges.append((r0, r1))
            col_sums.append((pos - neg).sum(axis=0))
    slice_weights = [1 << (s * r_cell) for s in range(n_slices)]
    return SlicedWeights(slices, slice_weights, coords, cmaps, rranges, (n_l, m_l),
                         w_bit, r_cell, col_sums)


@dataclass(frozen=True)
class InputEncoding:
    """How an integer activation vector is streamed through the DACs."""

    a_bit: int
    r_dac: int
    signed: bool

    @property
    def n_planes(self) -> int:
        return n_input_planes(self.a_bit, self.r_dac)

    @property
    def mode(self) -> str:
        if not self.signed:
            return "unsigned"
        if (self.a_bit - 1) % self.r_dac == 0:
            return "twos_complement"
        return "offset"

    @property
    def offset(self) -> int:
        return (1 << (self.a_bit - 1)) if self.mode == "offset" else 0

    def plane_weights(self) -> list[int]:
        weights = [1 << (b * self.r_dac) for b in range(self.n_planes)]
        if self.mode == "twos_complement":
            weights[-1] = -weights[-1]
        return weights

    def plane_shifts(self) -> list[int]:
        return [b * self.r_dac for b in range(self.n_planes)]

    def check(self, x: np.ndarray) -> None:
        lo, hi = qrange(self.a_bit, self.signed)
        bad = np.argwhere((x < lo) | (x > hi))
        if len(bad):
            idx = tuple(int(i) for i in bad[0])
            raise CrossbarError(
                f"input {int(x[idx])} at index {idx} outside [{lo}, {hi}] for a_bit={self.a_bit}")

    def encode(self, x: np.ndarray) -> np.ndarray:
        """(V, N) integers -> (V, n_planes, N) DAC codes."""
        x = np.asarray(x, dtype=np.int64)
        self.check(x)
        if self.mode == "twos_complement":
            u = x & ((1 << self.a_bit) - 1)
        else:
            u = x + self.offset
        return kernels.digit_planes(u, self.r_dac, self.n_planes)


def check_accumulator(w: np.ndarray, x: np.ndarray) -> None:
    """Refuse products whose worst-case magnitude does not fit a signed 32-bit accumulator."""
    bound = np.abs(np.asarray(x, dtype=np.int64)) @ np.abs(np.asarray(w, dtype=np.int64))
    if bound.size and bound.max() >= ACC_LIMIT:
        raise AccumulatorOverflow(
            f"sum |w||x| = {int(bound.max())} does not fit a 32-bit accumulator")


class TileExecutor:
    """Runs one mapped layer on a crossbar, tile by tile.

    The host side keeps ``acc`` (V x M_l); ``mvm`` returns raw column currents
    and ``shift_add`` folds them into the accumulator.
    """

    def __init__(self, sw: SlicedWeights, planes: np.ndarray, enc: InputEncoding,
                 state: CrossbarState):
        self.sw = sw
        self.planes = planes
        self.enc = enc
        self.state = state
        self.plane_weights = np.array(enc.plane_weights(), dtype=np.int64)
        self.acc = np.zeros((planes.shape[0], sw.shape[1]), dtype=np.int64)

    def write(self, t: int) -> None:
        self.state.write(self.sw.slices[t])

    def mvm(self, t: int, vec_idx: np.ndarray, plane_idx: np.ndarray) -> np.ndarray:
        r0, r1 = self.sw.row_ranges[t]
        rows = np.zeros((len(vec_idx), self.state.rows_n), dtype=np.int64)
        rows[:, : r1 - r0] = self.planes[vec_idx, plane_idx, r0:r1]
        return self.state.mvm_many(rows)

    def shift_add(self, t: int, vec_idx: np.ndarray, plane_idx: np.ndarray,
                  currents: np.ndarray, plane_weights: np.ndarray | None = None) -> None:
        cmap = self.sw.column_map[t]
        n_used = cmap.shape[0]
        pw = self.plane_weights if plane_weights is None else np.asarray(plane_weights, dtype=np.int64)
        weighted = currents[:, :n_used] * pw[plane_idx][:, None]
        slice_w = np.array(self.sw.slice_weights, dtype=np.int64)[cmap[:, 0]]
        contrib = weighted * slice_w[None, :]
        per_vec = np.zeros((self.acc.shape[0], n_used), dtype=np.int64)
        np.add.at(per_vec, vec_idx, contrib)
        np.add.at(self.acc.T, cmap[:, 1], per_vec.T)

    def offset_correction(self, t: int, offset: int) -> np.ndarray:
        """Host constant ``offset * colsum`` of tile ``t`` for offset-coded signed inputs."""
        corr = np.zeros(self.sw.shape[1], dtype=np.int64)
        if offset:
            cmap = self.sw.column_map[t]
            slice_w = np.array(self.sw.slice_weights, dtype=np.int64)[cmap[:, 0]]
            np.add.at(corr, cmap[:, 1], slice_w * self.sw.col_sums[t])
        return corr * offset

    def correct(self, t: int, vec_idx: np.ndarray, offset: int) -> None:
        if offset:
            self.acc[np.unique(vec_idx)] -= self.offset_correction(t, offset)[None, :]

    def run_all(self) -> np.ndarray:
        """Canonical weight-stationary order over every tile."""
        n_vec, n_planes = self.planes.shape[:2]
        vec_idx = np.repeat(np.arange(n_vec), n_planes)
        plane_idx = np.tile(np.arange(n_planes), n_vec)
        for t in range(self.sw.n_tiles):
            self.write(t)
            currents = self.mvm(t, vec_idx, plane_idx)
            self.shift_add(t, vec_idx, plane_idx, currents)
            self.correct(t, vec_idx, self.enc.offset)
        return self.finish()

    def finish(self) -> np.ndarray:
        if self.acc.size and np.abs(self.acc).max() >= ACC_LIMIT:
            raise AccumulatorOverflow("accumulator exceeded 32 bits")
        return self.acc


def sliced_mvm(w, x, w_bit: int, a_bit: int, target: CimTarget,
               signed: bool | None = None, state: CrossbarState | None = None) -> np.ndarray:
    """Compute ``w.T @ x`` through the crossbar with weight and input bit slicing.

    ``x`` may be a vector of length N_l or a (V, N_l) batch. ``signed`` defaults
    to whether ``x`` has negative entries.
    """
    w = np.asarray(w, dtype=np.int64)
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != w.shape[0]:
        raise CrossbarError(f"input length {xb.shape[1]} != weight rows {w.shape[0]}")
    if signed is None:
        signed = bool((xb < 0).any())
    enc = InputEncoding(a_bit, target.r_dac, signed)
    check_accumulator(w, xb)
    sw = map_weights(w, w_bit, target)
    planes = enc.encode(xb)
    state = state if state is not None else CrossbarState.for_target(target)
    out = TileExecutor(sw, planes, enc, state).run_all()
    return out[0] if single else out
