"""Weight-stationary scheduling of CIM layers and lowering to a device trace.

Trace file: JSON Lines. The first line is ``{"header": {...}}`` carrying the
target, the run manifest and the host program (integer graph plus per-layer
staging buffers); every following line is one record whose ``kind`` is one of
``label``, ``write_tile``, ``mvm``, ``host_shift_add``, ``host_requantize``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

from cimforge.compiler.graph import CIM_OPS, Graph, Node, graph_from_dict, graph_to_dict, infer_shapes
from cimforge.compiler.passes import layer_desc
from cimforge.cost import LayerDesc, n_mvm, n_write
from cimforge.target import CimTarget
from cimforge.xbar import InputEncoding, ceil_div, column_layout, n_input_planes, n_weight_slices

AXIS_LABELS = ("outer_col_tile", "outer_row_tile", "weight_slice", "input_vec", "input_bit")
RECORD_KINDS = ("write_tile", "mvm", "host_shift_add", "host_requantize", "label")
TRACE_FORMAT = "cimforge-trace"


class TraceError(ValueError):
    pass


@dataclass
class Axis:
    label: str
    extent: int
    fused_into: str | None = None


@dataclass
class LoopNest:
    """Labeled loop nest of one CIM layer, outermost axis first.

    Weight slices do not get their own write loop: slice bit lines are packed
    into column tiles together with the output columns, so ``weight_slice`` is
    fused into ``outer_col_tile``. Writes sit at ``outer_row_tile`` level, above
    the streamed ``input_vec`` / ``input_bit`` loops.
    """

    layer: str
    axes: list[Axis]
    r_repeat: int
    m_l: int
    n_l: int
    v_l: int
    w_bit: int
    a_bit: int
    write_level: str = "outer_row_tile"

    def extent(self, label: str) -> int:
        return next(a.extent for a in self.axes if a.label == label)

    @property
    def n_tiles(self) -> int:
        return self.extent("outer_col_tile") * self.extent("outer_row_tile")

    @property
    def writes(self) -> int:
        return self.r_repeat * self.n_tiles

    @property
    def mvms(self) -> int:
        return self.writes * self.v_l * self.extent("input_bit")


def schedule(node: Node, target: CimTarget, shapes: dict | None = None, graph: Graph | None = None) -> LoopNest:
    if node.op not in CIM_OPS or "cim_config" not in node.attrs:
        raise TraceError(f"node {node.id} is not an annotated CIM layer")
    if shapes is None:
        shapes = infer_shapes(graph)
    desc = layer_desc(node, shapes)
    cfg = node.attrs["cim_config"]
    return schedule_layer(desc, cfg["w_bit"], cfg["a_bit"], target)


def schedule_layer(desc: LayerDesc, w_bit: int, a_bit: int, target: CimTarget) -> LoopNest:
    slices = n_weight_slices(w_bit, target.r_cell)
    col_tiles = ceil_div(2 * desc.m_l * slices, target.cols_m)
    axes = [
        Axis("outer_col_tile", col_tiles),
        Axis("outer_row_tile", ceil_div(desc.n_l, target.rows_n)),
        Axis("weight_slice", slices, fused_into="outer_col_tile"),
        Axis("input_vec", desc.v_l),
        Axis("input_bit", n_input_planes(a_bit, target.r_dac)),
    ]
    nest = LoopNest(desc.id, axes, desc.r_repeat, desc.m_l, desc.n_l, desc.v_l, w_bit, a_bit)
    assert nest.n_tiles == n_write(desc, w_bit, target)
    assert nest.v_l * nest.n_tiles * nest.extent("input_bit") == n_mvm(desc, w_bit, a_bit, target)
    return nest


@dataclass
class DeviceTrace:
    header: dict
    records: list[dict] = field(default_factory=list)

    def counts(self) -> dict[str, tuple[int, int]]:
        out: dict[str, list[int]] = {}
        for r in self.records:
            if r["kind"] in ("write_tile", "mvm"):
                c = out.setdefault(r["layer"], [0, 0])
                c[0 if r["kind"] == "write_tile" else 1] += 1
        return {k: (v[0], v[1]) for k, v in out.items()}

    def by_layer(self) -> dict[str, list[dict]]:
        out: dict[str, list[dict]] = {}
        for r in self.records:
            out.setdefault(r["layer"], []).append(r)
        return out

    def check_weight_stationary(self) -> None:
        """Every MVM must hit the tile most recently written, and each tile is written once."""
        resident = None
        seen = set()
        for i, r in enumerate(self.records):
            if r["kind"] not in RECORD_KINDS:
                raise TraceError(f"record {i}: unknown kind {r['kind']!r}")
            key = (r.get("layer"), r.get("repeat"), r.get("tile"))
            if r["kind"] == "write_tile":
                if key in seen:
                    raise TraceError(f"record {i}: tile {key} written twice")
                seen.add(key)
                resident = key
            elif r["kind"] == "mvm" and key != resident:
                raise TraceError(f"record {i}: MVM on tile {key} but {resident} is resident")

    def dumps(self) -> str:
        lines = [json.dumps({"header": self.header}, sort_keys=True, separators=(",", ":"))]
        lines += [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "DeviceTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise TraceError("empty trace file")
        try:
            first = json.loads(lines[0])
            records = [json.loads(ln) for ln in lines[1:]]
        except json.JSONDecodeError as exc:
            raise TraceError(f"trace is not valid JSON Lines: {exc}") from None
        if "header" not in first or first["header"].get("format") != TRACE_FORMAT:
            raise TraceError("first trace line must be the cimforge-trace header")
        for i, r in enumerate(records):
            if r.get("kind") not in RECORD_KINDS:
                raise TraceError(f"record {i}: unknown kind {r.get('kind')!r}")
        return cls(first["header"], records)

    @classmethod
    def load(cls, path: str | Path) -> "DeviceTrace":
        return cls.loads(Path(path).read_text())


@dataclass
class HostProgram:
    """Integer graph plus per-CIM-layer lowering metadata."""

    graph: Graph
    target: CimTarget
    layers: dict[str, dict]

    def to_dict(self) -> dict:
        return {"graph": graph_to_dict(self.graph), "layers": self.layers}

    @classmethod
    def from_dict(cls, d: dict, target: CimTarget) -> "HostProgram":
        return cls(graph_from_dict(d["graph"]), target, d["layers"])


def _fused_requantize(g: Graph, n: Node) -> Node | None:
    uses = g.consumers().get(n.id, [])
    if len(uses) == 1 and uses[0].op == "Requantize" and n.id not in g.outputs:
        return uses[0]
    return None


def _layer_records(nest: LoopNest, node: Node, target: CimTarget, rq: Node | None) -> Iterator[dict]:
    cfg = node.attrs["cim_config"]
    enc = InputEncoding(cfg["a_bit"], target.r_dac, cfg["input_signed"])
    slices = n_weight_slices(nest.w_bit, target.r_cell)
    layout = column_layout(nest.m_l, slices)
    col_tiles, row_tiles = nest.extent("outer_col_tile"), nest.extent("outer_row_tile")
    n_vec, n_planes = nest.v_l, nest.extent("input_bit")
    plane_shifts = enc.plane_shifts()
    plane_signs = [1 if w > 0 else -1 for w in enc.plane_weights()]
    yield {
        "kind": "label", "layer": nest.layer, "op": node.op, "r_repeat": nest.r_repeat,
        "axes": [asdict(a) for a in nest.axes], "write_level": nest.write_level,
        "buffers": {"weights": [target.rows_n, target.cols_m], "inputs": [1, target.rows_n],
                    "outputs": [1, target.cols_m]},
    }
    for rep in range(nest.r_repeat):
        for ct in range(col_tiles):
            tile_slices = sorted({int(s) for s in layout[ct * target.cols_m:(ct + 1) * target.cols_m, 0]})
            for rt in range(row_tiles):
                t = ct * row_tiles + rt
                base = {"layer": nest.layer, "repeat": rep, "tile": t}
                yield {"kind": "write_tile", **base, "tile_coords": [rt, ct], "slice_index": tile_slices}
                for v in range(n_vec):
                    for b in range(n_planes):
                        yield {"kind": "mvm", **base, "vec_index": v, "bit_plane": b}
                for v in range(n_vec):
                    yield {"kind": "host_shift_add", **base, "vec_index": v,
                           "plane_shifts": plane_shifts, "plane_signs": plane_signs,
                           "slice_shifts": [s * target.r_cell for s in tile_slices],
                           "input_offset": enc.offset}
    if rq is not None:
        yield {"kind": "host_requantize", "layer": nest.layer, "node": rq.id,
               "multiplier": float(rq.attrs["multiplier"]), "bits": int(rq.attrs["bits"]),
               "signed": bool(rq.attrs.get("signed", True)), "bias": len(node.inputs) == 3,
               "acc_shift": int(node.attrs.get("acc_shift", 0))}


def lower(g: Graph, target: CimTarget, manifest: dict | None = None) -> tuple[DeviceTrace, HostProgram]:
    """Emit the device trace and host program of an optimized, partitioned graph."""
    shapes = infer_shapes(g)
    records: list[dict] = []
    layers: dict[str, dict] = {}
    for n in g.nodes:
        if n.placement != "CIM":
            continue
        nest = schedule(n, target, shapes)
        rq = _fused_requantize(g, n)
        records.extend(_layer_records(nest, n, target, rq))
        layers[n.id] = {
            "w_bit": nest.w_bit, "a_bit": nest.a_bit, "m_l": nest.m_l, "n_l": nest.n_l,
            "v_l": nest.v_l, "r_repeat": nest.r_repeat, "n_write": nest.writes, "n_mvm": nest.mvms,
            "fused_requantize": rq.id if rq is not None else None,
            "buffers": {"weights": [target.rows_n, target.cols_m], "inputs": [1, target.rows_n],
                        "outputs": [1, target.cols_m]},
        }
    program = HostProgram(g, target, layers)
    header = {"format": TRACE_FORMAT, "version": 1, "target": target.to_dict(),
              "program": program.to_dict()}
    if manifest is not None:
        header["manifest"] = manifest
    return DeviceTrace(header, records), program


def program_from_trace(trace: DeviceTrace) -> HostProgram:
    target = CimTarget.from_dict(trace.header["target"])
    return HostProgram.from_dict(trace.header["program"], target)
