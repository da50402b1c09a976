"""Executes a host program, offloading CIM layers to the crossbar simulator by replaying the trace."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from cimforge.compiler.graph import GraphError, eval_node
from cimforge.compiler.lower import DeviceTrace, HostProgram, TraceError, program_from_trace
from cimforge.quant import requantize_by
from cimforge.xbar import CrossbarState, InputEncoding, TileExecutor, check_accumulator, map_weights


def im2col(x: np.ndarray, k_h: int, k_w: int, stride: int, pad: int) -> np.ndarray:
    """(C,H,W) -> (H_out*W_out, C*K_H*K_W), patch rows in (C, K_H, K_W) order."""
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k_h, k_w), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, KH, KW)
    c, ho, wo = win.shape[:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k_h * k_w)


@dataclass
class LayerStats:
    writes: int = 0
    mvms: int = 0
    latency_us: Fraction = Fraction(0)


@dataclass
class InferenceResult:
    outputs: dict[str, np.ndarray]
    latency_us: Fraction
    layers: dict[str, LayerStats] = field(default_factory=dict)


def _gemm_operands(node, args):
    """Per-repeat (X (V,N), W (N,M)) pairs and a function restoring the output layout."""
    x, w = args[0], args[1]
    if node.op == "Dense":
        lead = x.shape[:-1]
        return [(x.reshape(-1, x.shape[-1]), w)], lambda accs: accs[0].reshape(lead + (w.shape[1],))
    if node.op == "Conv2D":
        co, _, kh, kw = w.shape
        stride, pad = int(node.attrs.get("stride", 1)), int(node.attrs.get("padding", 0))
        cols = im2col(x, kh, kw, stride, pad)
        ho = (x.shape[1] + 2 * pad - kh) // stride + 1
        wo = (x.shape[2] + 2 * pad - kw) // stride + 1
        return [(cols, w.reshape(co, -1).T)], lambda accs: accs[0].T.reshape(co, ho, wo)
    b = np.swapaxes(w, -1, -2) if node.attrs.get("transpose_b") else w
    batch = x.shape[:-2]
    xs = x.reshape((-1,) + x.shape[-2:])
    bs = b.reshape((-1,) + b.shape[-2:])
    pairs = list(zip(xs, bs))
    return pairs, lambda accs: np.stack(accs).reshape(batch + (x.shape[-2], b.shape[-1]))


def _run_layer(node, args, records: list[dict], program: HostProgram, state: CrossbarState) -> np.ndarray:
    target = program.target
    cfg = node.attrs["cim_config"]
    enc = InputEncoding(cfg["a_bit"], target.r_dac, cfg["input_signed"])
    pairs, restore = _gemm_operands(node, args)
    execs = []
    for x_mat, w_mat in pairs:
        check_accumulator(w_mat, x_mat)
        execs.append(TileExecutor(map_weights(w_mat, cfg["w_bit"], target), enc.encode(x_mat), enc, state))

    pending: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    i = 0
    while i < len(records):
        r = records[i]
        kind = r["kind"]
        if kind == "label":
            i += 1
            continue
        if kind == "host_requantize":
            i += 1
            continue
        ex = execs[r["repeat"]]
        t = r["tile"]
        if kind == "write_tile":
            if tuple(r["tile_coords"]) != ex.sw.tile_coords[t]:
                raise TraceError(f"layer {node.id}: tile {t} coordinates disagree with the mapping")
            ex.write(t)
            i += 1
        elif kind == "mvm":
            j = i
            while (j < len(records) and records[j]["kind"] == "mvm"
                   and records[j]["tile"] == t and records[j]["repeat"] == r["repeat"]):
                j += 1
            vec = np.array([records[k]["vec_index"] for k in range(i, j)], dtype=np.int64)
            plane = np.array([records[k]["bit_plane"] for k in range(i, j)], dtype=np.int64)
            pending[(r["repeat"], t)] = (vec, plane, ex.mvm(t, vec, plane))
            i = j
        elif kind == "host_shift_add":
            j = i
            while (j < len(records) and records[j]["kind"] == "host_shift_add"
                   and records[j]["tile"] == t and records[j]["repeat"] == r["repeat"]):
                j += 1
            vec, plane, cur = pending[(r["repeat"], t)]
            wanted = np.array([records[k]["vec_index"] for k in range(i, j)], dtype=np.int64)
            sel = np.isin(vec, wanted)
            weights = np.array([s * (1 << sh) for s, sh in zip(r["plane_signs"], r["plane_shifts"])],
                               dtype=np.int64)
            expected = [s * ex.sw.r_cell for s in ex.sw.tile_slice_indices(t)]
            if r["slice_shifts"] != expected:
                raise TraceError(f"layer {node.id}: slice shifts of tile {t} disagree with the mapping")
            ex.shift_add(t, vec[sel], plane[sel], cur[sel], weights)
            ex.correct(t, wanted, int(r.get("input_offset", 0)))
            i = j
        else:
            raise TraceError(f"unexpected record kind {kind!r}")
    acc = restore([ex.finish() for ex in execs])
    if len(args) == 3:
        bias_shape = (-1, 1, 1) if node.op == "Conv2D" else (-1,)
        acc = (acc << int(node.attrs.get("acc_shift", 0))) + args[2].reshape(bias_shape)
    return acc


def run_inference(program: HostProgram | DeviceTrace, feeds: Mapping[str, np.ndarray],
                  trace: DeviceTrace | None = None) -> InferenceResult:
    """End-to-end integer inference; CIM layers run on the simulator as dictated by the trace."""
    if isinstance(program, DeviceTrace):
        trace, program = program, program_from_trace(program)
    if trace is None:
        raise TraceError("a device trace is required")
    g = program.graph
    target = program.target
    by_layer = trace.by_layer()
    env: dict[str, np.ndarray] = {}
    for name, spec in g.inputs.items():
        if name not in feeds:
            raise GraphError(f"missing input {name!r}")
        arr = np.asarray(feeds[name])
        if tuple(arr.shape) != tuple(spec["shape"]):
            raise GraphError(f"input {name!r} has shape {arr.shape}, expected {tuple(spec['shape'])}")
        env[name] = arr.astype(np.int64 if spec.get("dtype") == "int" else np.float64)
    env.update(g.initializers)

    state = CrossbarState.for_target(target)
    stats: dict[str, LayerStats] = {}
    fused: set[str] = set()
    total = Fraction(0)
    for n in g.nodes:
        if n.id in fused:
            continue
        args = [env[i] for i in n.inputs]
        if n.placement != "CIM":
            env[n.id] = eval_node(n, args)
            continue
        records = by_layer.get(n.id, [])
        w0, m0 = state.write_count, state.mvm_count
        env[n.id] = _run_layer(n, args, records, program, state)
        for r in records:
            if r["kind"] == "host_requantize":
                env[r["node"]] = requantize_by(env[n.id], r["multiplier"], r["bits"], r["signed"])
                fused.add(r["node"])
        s = LayerStats(state.write_count - w0, state.mvm_count - m0)
        s.latency_us = s.writes * target.t_write + s.mvms * target.t_mvm
        stats[n.id] = s
        total += s.latency_us
    return InferenceResult({o: env[o] for o in g.outputs}, total, stats)
