"""Graph-level rewrites: QDQ folding, leaf fusion, bit-width annotation, partitioning."""
from __future__ import annotations

import math

import numpy as np

from cimforge.compiler.graph import (CIM_OPS, Graph, GraphError, Node, eval_node, evaluate, infer_shapes,
                                     tensor_domains)
from cimforge.cost import ConvParams, LayerDesc
from cimforge.quant import qrange, round_half_away
from cimforge.target import CimTarget
from cimforge.xbar import InputEncoding, n_input_planes, n_weight_slices

COMMUTING_OPS = ("ReLU", "MaxPool", "Flatten")
ACC_BITS = 32
FINE_BITS = 8  # sub-step precision for folded biases and residual alignment


class PassError(GraphError):
    pass


def _producer(g: Graph, name: str) -> Node | None:
    for n in g.nodes:
        if n.id == name:
            return n
    return None


def _sole_consumer(g: Graph, name: str) -> Node | None:
    if name in g.outputs:
        return None
    uses = g.consumers().get(name, [])
    return uses[0] if len(uses) == 1 else None


def _insert_after(g: Graph, anchor: str, node: Node) -> None:
    idx = next(i for i, n in enumerate(g.nodes) if n.id == anchor)
    g.nodes.insert(idx + 1, node)


def _remove(g: Graph, node: Node) -> None:
    g.nodes = [n for n in g.nodes if n.id != node.id]


def _requant_node(g: Graph, base: str, source: str, multiplier: float, bits: int, signed: bool,
                  in_scale: float, out_scale: float) -> Node:
    return Node(g.fresh_id(base), "Requantize", [source], {
        "multiplier": float(multiplier), "bits": int(bits), "signed": bool(signed),
        "in_scale": float(in_scale), "out_scale": float(out_scale)})


def _quant_meta(dx: Node, dw: Node) -> dict:
    return {
        "in_scale": float(dx.attrs["scale"]), "in_bits": int(dx.attrs["bits"]),
        "in_signed": bool(dx.attrs.get("signed", True)),
        "w_scale": float(dw.attrs["scale"]), "w_bits": int(dw.attrs["bits"]),
        "w_signed": bool(dw.attrs.get("signed", True)),
    }


def _acc_scale(n: Node) -> float:
    return n.attrs["in_scale"] * n.attrs["w_scale"]


def _is_int_compute(g: Graph, n: Node, dom: dict) -> bool:
    return n.op in CIM_OPS and dom.get(n.id) == "int"


# ---------------------------------------------------------------- shared rules

def _rule_commute(g: Graph, dom: dict) -> bool:
    """op(Dequantize(x)) -> Dequantize(op(x)) for scale-invariant unary ops."""
    nodes = g.node_map()
    for n in g.nodes:
        if n.op not in COMMUTING_OPS:
            continue
        d = nodes.get(n.inputs[0])
        if d is None or d.op != "Dequantize":
            continue
        inner = Node(g.fresh_id(f"{n.id}_int"), n.op, [d.inputs[0]], dict(n.attrs))
        idx = g.nodes.index(n)
        g.nodes.insert(idx, inner)
        n.op, n.inputs, n.attrs = "Dequantize", [inner.id], dict(d.attrs)
        return True
    return False


def _rule_qdq(g: Graph, dom: dict) -> bool:
    """Quantize(Dequantize(x)): cancel when parameters agree, otherwise requantize."""
    nodes = g.node_map()
    for q in g.nodes:
        if q.op != "Quantize":
            continue
        d = nodes.get(q.inputs[0])
        if d is None or d.op != "Dequantize":
            continue
        same = (float(d.attrs["scale"]) == float(q.attrs["scale"])
                and int(d.attrs["bits"]) == int(q.attrs["bits"])
                and bool(d.attrs.get("signed", True)) == bool(q.attrs.get("signed", True)))
        if same:
            g.replace_uses(q.id, d.inputs[0])
            _remove(g, q)
        else:
            mult = float(d.attrs["scale"]) / float(q.attrs["scale"])
            q.op, q.inputs = "Requantize", [d.inputs[0]]
            q.attrs = {"multiplier": mult, "bits": int(q.attrs["bits"]),
                       "signed": bool(q.attrs.get("signed", True)),
                       "in_scale": float(d.attrs["scale"]), "out_scale": float(q.attrs["scale"])}
        return True
    return False


def _trailing_quantize(g: Graph, n: Node) -> tuple[Node | None, Node | None]:
    """Return (relu, quantize) if ``n`` feeds Quantize directly or through one ReLU."""
    c = _sole_consumer(g, n.id)
    if c is None:
        return None, None
    if c.op == "Quantize":
        return None, c
    if c.op == "ReLU":
        q = _sole_consumer(g, c.id)
        if q is not None and q.op == "Quantize":
            return c, q
    return None, None


def _close_with_requant(g: Graph, n: Node, relu: Node | None, q: Node, acc_scale: float) -> None:
    """Replace ``[relu ->] q`` after accumulator ``n`` with Requantize [-> ReLU]."""
    s_q = float(q.attrs["scale"])
    rq = _requant_node(g, f"{n.id}_rq", n.id, acc_scale / s_q, q.attrs["bits"],
                       q.attrs.get("signed", True), acc_scale, s_q)
    rq.attrs["replaces"] = q.attrs.get("replaces", q.id)
    if relu is not None:
        _remove(g, relu)
    g.replace_uses(q.id, rq.id)
    _remove(g, q)
    _insert_after(g, n.id, rq)
    if relu is not None:
        r = Node(g.fresh_id(f"{n.id}_relu"), "ReLU", [rq.id])
        g.replace_uses(rq.id, r.id)
        r.inputs = [rq.id]
        _insert_after(g, rq.id, r)


# ---------------------------------------------------------------- FQ2I

def _fq2i_compute(g: Graph, dom: dict) -> bool:
    nodes = g.node_map()
    for n in g.nodes:
        if n.op not in CIM_OPS or dom.get(n.id) != "float":
            continue
        srcs = [nodes.get(i) for i in n.inputs]
        if len(srcs) != 2 or any(s is None or s.op != "Dequantize" for s in srcs):
            continue
        dx, dw = srcs
        relu, q = _trailing_quantize(g, n)
        c = _sole_consumer(g, n.id)
        bias_next = c is not None and c.op == "BiasAdd"
        if q is None and not bias_next:
            continue
        n.inputs = [dx.inputs[0], dw.inputs[0]]
        n.attrs = {**n.attrs, **_quant_meta(dx, dw)}
        if q is not None:
            _close_with_requant(g, n, relu, q, _acc_scale(n))
        else:
            # float bias is outside this rule; leave DQ -> BiasAdd for the fusion pass
            d = Node(g.fresh_id(f"{n.id}_dq"), "Dequantize", [n.id],
                     {"scale": _acc_scale(n), "bits": ACC_BITS, "signed": True})
            g.replace_uses(n.id, d.id)
            d.inputs = [n.id]
            _insert_after(g, n.id, d)
        return True
    return False


def _fq2i_add(g: Graph, dom: dict) -> bool:
    nodes = g.node_map()
    for n in g.nodes:
        if n.op != "Add" or dom.get(n.id) != "float":
            continue
        srcs = [nodes.get(i) for i in n.inputs]
        if any(s is None or s.op != "Dequantize" for s in srcs):
            continue
        relu, q = _trailing_quantize(g, n)
        if q is None:
            continue
        scales = [float(s.attrs["scale"]) for s in srcs]
        # fine enough that alignment rounding is a small fraction of an output step,
        # coarse enough that the aligned sum keeps 32-bit headroom
        s_q = float(q.attrs["scale"])
        peak = max(_code_peak(int(s.attrs["bits"]), bool(s.attrs.get("signed", True))) * sc
                   for s, sc in zip(srcs, scales))
        common = max(min(min(scales), s_q / (1 << FINE_BITS)), 2.0 * peak / (1 << 30))
        new_inputs = []
        for s, sc in zip(srcs, scales):
            rq = _requant_node(g, f"{n.id}_align", s.inputs[0], sc / common, ACC_BITS, True, sc, common)
            g.nodes.insert(g.nodes.index(n), rq)
            new_inputs.append(rq.id)
        n.inputs = new_inputs
        n.attrs = {**n.attrs, "scale": common}
        _close_with_requant(g, n, relu, q, common)
        return True
    return False


def _check_mixed(g: Graph) -> None:
    dom = tensor_domains(g)
    nodes = g.node_map()
    for n in g.nodes:
        if n.op in ("Quantize", "Dequantize", "Requantize") or dom[n.id] != "float":
            continue
        from_dq = [i for i in n.inputs if i in nodes and nodes[i].op == "Dequantize"]
        other = [i for i in n.inputs if i not in from_dq and i not in g.initializers]
        if from_dq and other:
            raise PassError(f"node {n.id} ({n.op}): mixed quantized/float inputs not covered by any rule")


def _run_rules(g: Graph, rules) -> Graph:
    g = g.copy()
    g.validate()
    changed = True
    while changed:
        changed = False
        for rule in rules:
            dom = tensor_domains(g)
            if rule(g, dom):
                changed = True
                break
    g.prune()
    g.validate()
    return g


def fq2i_pass(g: Graph) -> Graph:
    """Fold Dequantize -> float op -> Quantize patterns into integer ops plus Requantize."""
    out = _run_rules(g, [_rule_qdq, _rule_commute, _fq2i_compute, _fq2i_add])
    _check_mixed(out)
    return out


# ---------------------------------------------------------------- QNNFuse

def _code_peak(bits: int, signed: bool) -> int:
    lo, hi = qrange(bits, signed)
    return max(-lo, hi)


def _acc_bound(g: Graph, n: Node) -> int:
    """Static bound on |accumulator| of an integer compute node."""
    x_peak = _code_peak(n.attrs["in_bits"], n.attrs["in_signed"])
    w = g.initializers.get(n.inputs[1])
    if w is not None:
        w = np.abs(w.astype(np.int64))
        per_col = w.sum(axis=tuple(range(1, w.ndim))) if n.op == "Conv2D" else w.sum(axis=0)
        return int(per_col.max()) * x_peak if per_col.size else 0
    depth = infer_shapes(g)[n.inputs[0]][-1]
    return depth * x_peak * _code_peak(n.attrs["w_bits"], n.attrs["w_signed"])


def _bias_shift(g: Graph, n: Node, out_scale: float | None) -> int:
    """Left shift of the accumulator that carries the bias at sub-output-step precision.

    Aims for a bias rounding of 2^-(FINE_BITS+1) output steps, limited by the 32-bit headroom.
    """
    if out_scale is None:
        return 0
    wanted = math.ceil(math.log2(_acc_scale(n) / out_scale)) + FINE_BITS
    headroom = 30 - _acc_bound(g, n).bit_length()
    return max(0, min(wanted, headroom))


def _fold_bias(g: Graph, n: Node, bias: np.ndarray, out_scale: float | None = None) -> None:
    acc_scale = _acc_scale(n)
    shift = _bias_shift(g, n, out_scale)
    fine = acc_scale / (1 << shift)
    folded = round_half_away(np.asarray(bias, dtype=np.float64) / fine).astype(np.int64)
    if folded.size and np.abs(folded).max() >= 1 << 31:
        raise PassError(f"node {n.id}: folded bias does not fit 32 bits")
    name = g.fresh_id(f"{n.id}_bias_i32")
    g.initializers[name] = folded
    n.inputs = n.inputs[:2] + [name]
    n.attrs["bias_scale"] = fine
    if shift:
        n.attrs["acc_shift"] = shift


def _fuse_bias(g: Graph, dom: dict) -> bool:
    """int op -> Dequantize -> BiasAdd(float) ... : move the bias into the accumulator."""
    nodes = g.node_map()
    for n in g.nodes:
        if not _is_int_compute(g, n, dom) or len(n.inputs) != 2:
            continue
        d = _sole_consumer(g, n.id)
        if d is None or d.op != "Dequantize":
            continue
        b = _sole_consumer(g, d.id)
        if b is None or b.op != "BiasAdd" or b.inputs[1] not in g.initializers:
            continue
        if dom[b.inputs[1]] != "float":
            continue
        relu, q = _trailing_quantize(g, b)
        _fold_bias(g, n, g.initializers[b.inputs[1]], None if q is None else float(q.attrs["scale"]))
        if q is not None:
            g.replace_uses(b.id, n.id)
            _remove(g, b)
            _remove(g, d)
            _close_with_requant(g, n, relu, q, n.attrs["bias_scale"])
        else:
            # leaf: keep one Dequantize in place of the bias add
            b.op, b.inputs, b.attrs = "Dequantize", [n.id], dict(d.attrs)
            _remove(g, d)
        return True
    return False


def _fuse_final_layer(g: Graph, dom: dict) -> bool:
    """Float op fed only by Dequantize nodes with no trailing Quantize: make it integer."""
    nodes = g.node_map()
    for n in g.nodes:
        if n.op not in CIM_OPS or dom.get(n.id) != "float":
            continue
        srcs = [nodes.get(i) for i in n.inputs]
        if len(srcs) != 2 or any(s is None or s.op != "Dequantize" for s in srcs):
            continue
        dx, dw = srcs
        n.inputs = [dx.inputs[0], dw.inputs[0]]
        n.attrs = {**n.attrs, **_quant_meta(dx, dw)}
        d = Node(g.fresh_id(f"{n.id}_dq"), "Dequantize", [n.id],
                 {"scale": _acc_scale(n), "bits": ACC_BITS, "signed": True})
        g.replace_uses(n.id, d.id)
        d.inputs = [n.id]
        _insert_after(g, n.id, d)
        return True
    return False


def _check_fused(g: Graph) -> None:
    dom = tensor_domains(g)
    uses = g.consumers()
    for n in g.nodes:
        if n.op == "Quantize":
            continue
        if n.op == "Dequantize":
            if uses.get(n.id) or n.id not in g.outputs:
                raise PassError(f"node {n.id}: Dequantize left inside the graph (unfusable float leaf)")
            continue
        if dom[n.id] == "float":
            raise PassError(f"node {n.id} ({n.op}): unfusable float leaf")
    for o in g.outputs:
        if sum(1 for x in g.outputs if x == o) > 1:
            raise PassError(f"output {o} listed twice")


def qnn_fuse_pass(g: Graph) -> Graph:
    """Quantize leaf operations left in float by FQ2I (bias adds, final layer)."""
    out = _run_rules(g, [_rule_qdq, _rule_commute, _fuse_bias, _fuse_final_layer])
    _check_fused(out)
    return out


# ---------------------------------------------------------------- annotation and partitioning

def config_update_pass(g: Graph, target: CimTarget) -> Graph:
    """Record bit widths and the crossbar splitting scheme on every integer CIM op."""
    g = g.copy()
    dom = tensor_domains(g)
    for n in g.nodes:
        if not _is_int_compute(g, n, dom):
            continue
        if "w_bits" not in n.attrs:
            raise PassError(f"node {n.id}: integer {n.op} without quantization metadata")
        if not n.attrs["w_signed"]:
            raise PassError(f"node {n.id}: stationary operand must use signed quantization")
        w_bit, a_bit, signed = n.attrs["w_bits"], n.attrs["in_bits"], n.attrs["in_signed"]
        n.attrs["cim_config"] = {
            "w_bit": w_bit,
            "a_bit": a_bit,
            "input_signed": signed,
            "r_cell": target.r_cell,
            "r_dac": target.r_dac,
            "n_slices": n_weight_slices(w_bit, target.r_cell),
            "n_planes": n_input_planes(a_bit, target.r_dac),
            "input_encoding": InputEncoding(a_bit, target.r_dac, signed).mode,
        }
    return g


def partition_pass(g: Graph) -> Graph:
    g = g.copy()
    dom = tensor_domains(g)
    for n in g.nodes:
        n.placement = "CIM" if _is_int_compute(g, n, dom) else "CPU"
    return g


def optimize(g: Graph, target: CimTarget) -> Graph:
    """Full graph-level pipeline: FQ2I, QNNFuse, bit-width annotation, partitioning."""
    g = fq2i_pass(g)
    g = qnn_fuse_pass(g)
    g = config_update_pass(g, target)
    return partition_pass(g)


# ---------------------------------------------------------------- layer extraction

def layerwise_deviation(reference: Graph, rewritten: Graph, feeds) -> dict[str, int]:
    """Max code difference of every quantized tensor of ``rewritten`` against ``reference``.

    The rewritten graph is run with each quantized tensor replaced by the reference codes
    once compared, so every entry measures one rewritten layer in isolation.
    """
    ref = evaluate(reference, feeds, keep=True)
    env = {k: np.asarray(v, dtype=np.float64) for k, v in feeds.items()}
    env.update(rewritten.initializers)
    uses = rewritten.consumers()
    out: dict[str, int] = {}
    for n in rewritten.nodes:
        v = eval_node(n, [env[i] for i in n.inputs])
        key = n.attrs.get("replaces", n.id)
        if n.op in ("Quantize", "Requantize") and key in ref:
            r = ref[key]
            relu_next = [c.op for c in uses.get(n.id, [])] == ["ReLU"]
            got = np.maximum(v, 0) if relu_next else v
            out[key] = int(np.abs(got - r).max()) if r.size else 0
            v = r
        env[n.id] = v
    return out


def layer_desc(n: Node, shapes: dict) -> LayerDesc:
    x = shapes[n.inputs[0]]
    w = shapes[n.inputs[1]]
    if n.op == "Conv2D":
        out = shapes[n.id]
        params = ConvParams(w[1], w[0], w[2], w[3], out[1], out[2])
        return LayerDesc.conv(n.id, *params.__dict__.values())
    if n.op == "Dense":
        v = int(np.prod(x[:-1])) if len(x) > 1 else 1
        return LayerDesc(n.id, "Dense", w[1], w[0], v, 1, seq_len=v if len(x) > 1 else None)
    if n.attrs.get("transpose_b"):
        w = w[:-2] + (w[-1], w[-2])
    repeat = int(np.prod(w[:-2])) if len(w) > 2 else 1
    return LayerDesc(n.id, "MatMul", w[-1], w[-2], x[-2], repeat, seq_len=x[-2])


def extract_layers(g: Graph) -> list[LayerDesc]:
    """GEMM view of every Conv2D/Dense/MatMul in graph order."""
    shapes = infer_shapes(g)
    return [layer_desc(n, shapes) for n in g.nodes if n.op in CIM_OPS]


def infer_config(g: Graph):
    """Bit widths actually carried by a quantized graph (QDQ or integer form)."""
    from cimforge.config import QuantConfig

    nodes = g.node_map()
    bits = {}
    for n in g.nodes:
        if n.op not in CIM_OPS:
            continue
        if "w_bits" in n.attrs:
            bits[n.id] = (n.attrs["w_bits"], n.attrs["in_bits"])
            continue
        srcs = []
        for i in n.inputs[:2]:
            s = nodes.get(i)
            while s is not None and s.op in ("MaxPool", "Flatten", "ReLU"):
                s = nodes.get(s.inputs[0])
            srcs.append(s)
        if any(s is None or s.op != "Dequantize" for s in srcs):
            raise PassError(f"node {n.id}: cannot infer bit widths (inputs are not dequantized)")
        bits[n.id] = (int(srcs[1].attrs["bits"]), int(srcs[0].attrs["bits"]))
    return QuantConfig(bits)
