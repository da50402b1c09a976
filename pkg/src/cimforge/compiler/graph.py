"""Graph IR, JSON model format and the reference interpreter.

Every node produces exactly one tensor, named after the node id. Node inputs
name either another node, a graph input, or an initializer.
"""
from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from cimforge.quant import quantize_with_scale, requantize_by

OPS = ("Conv2D", "Dense", "MatMul", "Quantize", "Dequantize", "Requantize",
       "BiasAdd", "ReLU", "Add", "Flatten", "MaxPool")
CIM_OPS = ("Conv2D", "Dense", "MatMul")
PLACEMENTS = ("CPU", "CIM", "Unassigned")
MODEL_FORMAT = "cimforge-model"


class GraphError(ValueError):
    """Malformed graph: unknown op, dangling edge, cycle or shape mismatch."""


@dataclass
class Node:
    id: str
    op: str
    inputs: list[str]
    attrs: dict[str, Any] = field(default_factory=dict)
    placement: str = "Unassigned"

    def to_dict(self) -> dict:
        d = {"id": self.id, "op": self.op, "inputs": list(self.inputs), "attrs": self.attrs}
        if self.placement != "Unassigned":
            d["placement"] = self.placement
        return d


@dataclass
class Graph:
    nodes: list[Node]
    inputs: dict[str, dict]  # name -> {"shape": [...], "dtype": "float"|"int", ...}
    outputs: list[str]
    initializers: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = "model"

    def copy(self) -> "Graph":
        return Graph([copy.deepcopy(n) for n in self.nodes], copy.deepcopy(self.inputs),
                     list(self.outputs), dict(self.initializers), self.name)

    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def consumers(self) -> dict[str, list[Node]]:
        uses: dict[str, list[Node]] = {}
        for n in self.nodes:
            for name in n.inputs:
                uses.setdefault(name, []).append(n)
        return uses

    def cim_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.op in CIM_OPS]

    def replace_uses(self, old: str, new: str) -> None:
        for n in self.nodes:
            n.inputs = [new if i == old else i for i in n.inputs]
        self.outputs = [new if o == old else o for o in self.outputs]

    def fresh_id(self, base: str) -> str:
        taken = {n.id for n in self.nodes} | set(self.inputs) | set(self.initializers)
        if base not in taken:
            return base
        i = 1
        while f"{base}_{i}" in taken:
            i += 1
        return f"{base}_{i}"

    def prune(self) -> None:
        """Drop nodes and initializers that no output depends on."""
        live = set(self.outputs)
        keep = []
        for n in reversed(self.nodes):
            if n.id in live:
                keep.append(n)
                live.update(n.inputs)
        self.nodes = keep[::-1]
        self.initializers = {k: v for k, v in self.initializers.items() if k in live}

    def validate(self) -> None:
        self.nodes = toposort(self)
        infer_shapes(self)
        tensor_domains(self)


def toposort(g: Graph) -> list[Node]:
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate node ids")
    sources = set(g.inputs) | set(g.initializers)
    clash = sources & set(ids)
    if clash:
        raise GraphError(f"names used both as node and input/initializer: {sorted(clash)}")
    by_id = g.node_map()
    for n in g.nodes:
        if n.op not in OPS:
            raise GraphError(f"node {n.id}: unknown op {n.op!r}")
        if n.placement not in PLACEMENTS:
            raise GraphError(f"node {n.id}: unknown placement {n.placement!r}")
        for i in n.inputs:
            if i not in by_id and i not in sources:
                raise GraphError(f"node {n.id}: dangling input {i!r}")
    for o in g.outputs:
        if o not in by_id and o not in sources:
            raise GraphError(f"dangling graph output {o!r}")
    order, state = [], {}

    def visit(nid: str, stack: list[str]) -> None:
        mark = state.get(nid)
        if mark == 2:
            return
        if mark == 1:
            raise GraphError(f"cycle through {' -> '.join(stack + [nid])}")
        state[nid] = 1
        for i in by_id[nid].inputs:
            if i in by_id:
                visit(i, stack + [nid])
        state[nid] = 2
        order.append(by_id[nid])

    for nid in ids:
        visit(nid, [])
    return order


# ---------------------------------------------------------------- shapes

def _conv_out(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def infer_shapes(g: Graph) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {k: tuple(v["shape"]) for k, v in g.inputs.items()}
    shapes.update({k: tuple(v.shape) for k, v in g.initializers.items()})
    for n in g.nodes:
        ins = [shapes[i] for i in n.inputs]
        try:
            shapes[n.id] = _node_shape(n, ins)
        except (IndexError, ValueError) as exc:
            raise GraphError(f"node {n.id} ({n.op}): shape mismatch: {exc}") from None
    return shapes


def _node_shape(n: Node, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    a = n.attrs
    if n.op in ("Quantize", "Dequantize", "Requantize", "ReLU"):
        _arity(n, ins, 1)
        return ins[0]
    if n.op == "Dense":
        _arity(n, ins, 2, 3)
        x, w = ins[0], ins[1]
        if len(w) != 2 or not x or x[-1] != w[0]:
            raise ValueError(f"input {x} incompatible with weight {w}")
        _check_bias(ins, w[1])
        return x[:-1] + (w[1],)
    if n.op == "Conv2D":
        _arity(n, ins, 2, 3)
        x, w = ins[0], ins[1]
        if len(x) != 3 or len(w) != 4 or x[0] != w[1]:
            raise ValueError(f"input {x} incompatible with weight {w}")
        s, p = int(a.get("stride", 1)), int(a.get("padding", 0))
        ho, wo = _conv_out(x[1], w[2], s, p), _conv_out(x[2], w[3], s, p)
        if ho < 1 or wo < 1:
            raise ValueError("empty convolution output")
        _check_bias(ins, w[0])
        return (w[0], ho, wo)
    if n.op == "MatMul":
        _arity(n, ins, 2, 3)
        x, b = ins[0], ins[1]
        if a.get("transpose_b"):
            b = b[:-2] + (b[-1], b[-2])
        if len(x) < 2 or len(b) < 2 or x[-1] != b[-2] or x[:-2] != b[:-2]:
            raise ValueError(f"operands {x} and {b} do not multiply")
        _check_bias(ins, b[-1])
        return x[:-1] + (b[-1],)
    if n.op == "BiasAdd":
        _arity(n, ins, 2)
        axis = int(a.get("axis", -1))
        if ins[1] != (ins[0][axis],):
            raise ValueError(f"bias {ins[1]} does not match axis {axis} of {ins[0]}")
        return ins[0]
    if n.op == "Add":
        _arity(n, ins, 2)
        if ins[0] != ins[1]:
            raise ValueError(f"{ins[0]} != {ins[1]}")
        return ins[0]
    if n.op == "Flatten":
        _arity(n, ins, 1)
        if "out_shape" in a:
            out = tuple(int(d) for d in a["out_shape"])
            if int(np.prod(out)) != int(np.prod(ins[0])):
                raise ValueError(f"cannot reshape {ins[0]} to {out}")
            return out
        return (int(np.prod(ins[0])),)
    if n.op == "MaxPool":
        _arity(n, ins, 1)
        k = int(a.get("kernel", 2))
        s = int(a.get("stride", k))
        c, h, w = ins[0]
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    raise ValueError(f"unknown op {n.op}")


def _arity(n: Node, ins: list, lo: int, hi: int | None = None) -> None:
    hi = lo if hi is None else hi
    if not lo <= len(ins) <= hi:
        raise ValueError(f"expected {lo}..{hi} inputs, got {len(ins)}")


def _check_bias(ins: list, width: int) -> None:
    if len(ins) == 3 and ins[2] != (width,):
        raise ValueError(f"bias {ins[2]} does not match {width} outputs")


def tensor_domains(g: Graph) -> dict[str, str]:
    """Static 'int' / 'float' domain of every tensor."""
    dom = {k: ("int" if v.get("dtype", "float") == "int" else "float") for k, v in g.inputs.items()}
    dom.update({k: ("int" if np.issubdtype(v.dtype, np.integer) else "float")
                for k, v in g.initializers.items()})
    for n in g.nodes:
        if n.op in ("Quantize", "Requantize"):
            dom[n.id] = "int"
        elif n.op == "Dequantize":
            if dom[n.inputs[0]] != "int":
                raise GraphError(f"node {n.id}: Dequantize of a float tensor")
            dom[n.id] = "float"
        else:
            kinds = {dom[i] for i in n.inputs}
            if len(kinds) != 1:
                raise GraphError(f"node {n.id} ({n.op}): mixed quantized/float inputs")
            dom[n.id] = kinds.pop()
    return dom


# ---------------------------------------------------------------- serialization

def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    dtype = "int64" if np.issubdtype(arr.dtype, np.integer) else "float64"
    raw = np.ascontiguousarray(arr, dtype="<i8" if dtype == "int64" else "<f8").tobytes()
    return {"dtype": dtype, "shape": list(arr.shape), "base64": base64.b64encode(raw).decode()}


def decode_tensor(d: Mapping) -> np.ndarray:
    dtype = d.get("dtype", "float64")
    if dtype not in ("int64", "int32", "int8", "float64", "float32"):
        raise GraphError(f"unsupported tensor dtype {dtype!r}")
    np_dtype = np.int64 if dtype.startswith("int") else np.float64
    if "base64" in d:
        raw = base64.b64decode(d["base64"])
        arr = np.frombuffer(raw, dtype="<i8" if np_dtype is np.int64 else "<f8").astype(np_dtype)
    else:
        arr = np.asarray(d["data"], dtype=np_dtype)
    shape = tuple(d.get("shape", arr.shape))
    if arr.size != int(np.prod(shape)):
        raise GraphError(f"tensor data has {arr.size} elements, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape)


def graph_to_dict(g: Graph) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": 1,
        "name": g.name,
        "inputs": [{"name": k, **v} for k, v in g.inputs.items()],
        "outputs": list(g.outputs),
        "initializers": {k: encode_tensor(v) for k, v in g.initializers.items()},
        "nodes": [n.to_dict() for n in g.nodes],
    }


def graph_from_dict(d: Mapping) -> Graph:
    try:
        inputs = {}
        for spec in d["inputs"]:
            spec = dict(spec)
            name = spec.pop("name")
            spec["shape"] = [int(s) for s in spec["shape"]]
            inputs[name] = spec
        inits = {k: decode_tensor(v) for k, v in d.get("initializers", {}).items()}
        nodes = [Node(str(n["id"]), n["op"], [str(i) for i in n.get("inputs", [])],
                      dict(n.get("attrs", {})), n.get("placement", "Unassigned"))
                 for n in d["nodes"]]
        g = Graph(nodes, inputs, [str(o) for o in d["outputs"]], inits, d.get("name", "model"))
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed model document: {exc}") from None
    g.validate()
    return g


def load_model(path: str | Path) -> Graph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: not valid JSON ({exc})") from None
    return graph_from_dict(doc)


def dumps_model(g: Graph) -> str:
    return json.dumps(graph_to_dict(g), indent=1, sort_keys=True) + "\n"


def save_model(g: Graph, path: str | Path) -> None:
    Path(path).write_text(dumps_model(g))


# ---------------------------------------------------------------- interpreter

def conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Sliding-window convolution (C,H,W) * (Co,C,KH,KW); exact for integer inputs."""
    integer = np.issubdtype(x.dtype, np.integer) and np.issubdtype(w.dtype, np.integer)
    dt = np.int64 if integer else np.float64
    x = np.pad(x.astype(dt), ((0, 0), (pad, pad), (pad, pad)))
    co, _, kh, kw = w.shape
    ho = (x.shape[1] - kh) // stride + 1
    wo = (x.shape[2] - kw) // stride + 1
    out = np.zeros((co, ho, wo), dtype=dt)
    w = w.astype(dt)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.einsum("oc,chw->ohw", w[:, :, i, j], patch)
    return out


def maxpool(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    c, h, w = x.shape
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    out = None
    for i in range(kernel):
        for j in range(kernel):
            patch = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out = patch.copy() if out is None else np.maximum(out, patch)
    return out


def _matmul_b(n: Node, b: np.ndarray) -> np.ndarray:
    return np.swapaxes(b, -1, -2) if n.attrs.get("transpose_b") else b


def eval_node(n: Node, args: list[np.ndarray]) -> np.ndarray:
    a = n.attrs
    op = n.op
    if op == "Quantize":
        return quantize_with_scale(args[0], a["scale"], a["bits"], a.get("signed", True))
    if op == "Dequantize":
        return args[0].astype(np.float64) * a["scale"]
    if op == "Requantize":
        return requantize_by(args[0], a["multiplier"], a["bits"], a.get("signed", True))
    if op == "ReLU":
        return np.maximum(args[0], 0)
    if op == "Add":
        return args[0] + args[1]
    if op == "Flatten":
        x = args[0]
        if "perm" in a:
            x = np.transpose(x, a["perm"])
        return x.reshape(a.get("out_shape", (-1,)))
    if op == "MaxPool":
        k = int(a.get("kernel", 2))
        return maxpool(args[0], k, int(a.get("stride", k)))
    if op == "BiasAdd":
        axis = int(a.get("axis", -1)) % args[0].ndim
        shape = [1] * args[0].ndim
        shape[axis] = -1
        return args[0] + args[1].reshape(shape)
    if op in CIM_OPS:
        if op == "Dense":
            out = args[0] @ args[1]
            bias_shape = (-1,)
        elif op == "Conv2D":
            out = conv2d_direct(args[0], args[1], int(a.get("stride", 1)), int(a.get("padding", 0)))
            bias_shape = (-1, 1, 1)
        else:
            out = args[0] @ _matmul_b(n, args[1])
            bias_shape = (-1,)
        if len(args) == 3:
            out = (out << int(a.get("acc_shift", 0))) + args[2].reshape(bias_shape)
        return out
    raise GraphError(f"cannot evaluate op {op}")


def evaluate(g: Graph, feeds: Mapping[str, np.ndarray], keep: bool = False) -> dict[str, np.ndarray]:
    """Run the graph directly in numpy (int64 for integer tensors, float64 otherwise)."""
    env: dict[str, np.ndarray] = {}
    for name, spec in g.inputs.items():
        if name not in feeds:
            raise GraphError(f"missing input {name!r}")
        arr = np.asarray(feeds[name])
        if tuple(arr.shape) != tuple(spec["shape"]):
            raise GraphError(f"input {name!r} has shape {arr.shape}, expected {tuple(spec['shape'])}")
        env[name] = arr.astype(np.int64 if spec.get("dtype") == "int" else np.float64)
    env.update(g.initializers)
    for n in g.nodes:
        env[n.id] = eval_node(n, [env[i] for i in n.inputs])
    return env if keep else {o: env[o] for o in g.outputs}
