"""Builders for quantized (QDQ-form) model graphs and benchmark layer lists.

``QdqBuilder`` emits Quantize/Dequantize-wrapped float graphs the way a QAT
export does: integer weights behind Dequantize nodes, activation quantizers whose
scales are calibrated on a sample batch. Scales are frozen into the graph.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from cimforge.compiler.graph import Graph, Node, conv2d_direct, eval_node, maxpool
from cimforge.config import QuantConfig
from cimforge.cost import LayerDesc
from cimforge.quant import qrange, quantize_symmetric, quantize_with_scale


def activation_scale(values: np.ndarray, bits: int, signed: bool) -> float:
    _, hi = qrange(bits, signed)
    peak = float(np.max(np.abs(values))) if signed else float(np.max(values))
    return peak / hi if peak > 0 else 1.0


class QdqBuilder:
    """Incrementally builds a QDQ graph while tracking calibration activations.

    ``values`` holds the float activation of every non-constant tensor for each
    calibration sample (leading axis); constants live in ``consts``.
    """

    def __init__(self, name: str, input_shape: Sequence[int], calib: np.ndarray,
                 input_name: str = "x"):
        self.g = Graph([], {input_name: {"shape": list(input_shape), "dtype": "float"}}, [], {}, name)
        self.values: dict[str, np.ndarray] = {input_name: np.asarray(calib, dtype=np.float64)}
        self.consts: dict[str, np.ndarray] = {}
        self.counter = 0

    def _id(self, base: str) -> str:
        self.counter += 1
        return f"{base}{self.counter}"

    def _arg(self, name: str) -> tuple[np.ndarray, bool]:
        if name in self.values:
            return self.values[name], True
        if name in self.consts:
            return self.consts[name], False
        return self.g.initializers[name], False

    def op(self, op: str, inputs: list[str], attrs: dict | None = None, nid: str | None = None) -> str:
        node = Node(nid or self._id(op.lower()), op, inputs, attrs or {})
        self.g.nodes.append(node)
        args = [self._arg(i) for i in inputs]
        n_batch = next(len(v) for v, batched in args if batched)
        outs = [eval_node(node, [v[k] if batched else v for v, batched in args]) for k in range(n_batch)]
        self.values[node.id] = np.stack(outs)
        return node.id

    def quant_act(self, src: str, bits: int, signed: bool | None = None, scale: float | None = None) -> str:
        """Quantize -> Dequantize on an activation; returns the dequantized name."""
        vals = self.values[src]
        if signed is None:
            signed = bool((vals < 0).any())
        if scale is None:
            scale = activation_scale(vals, bits, signed)
        attrs = {"scale": float(scale), "bits": int(bits), "signed": bool(signed)}
        q = self.op("Quantize", [src], attrs)
        return self.op("Dequantize", [q], dict(attrs))

    def weight(self, w: np.ndarray, bits: int) -> str:
        """Integer initializer behind a Dequantize node."""
        qt = quantize_symmetric(w, bits, signed=True)
        name = self._id("w")
        self.g.initializers[name] = qt.data
        node = Node(self._id("dequantize"), "Dequantize", [name],
                    {"scale": float(qt.scale), "bits": int(bits), "signed": True})
        self.g.nodes.append(node)
        self.consts[node.id] = qt.data.astype(np.float64) * qt.scale
        return node.id

    def dense(self, x: str, w: np.ndarray, w_bit: int, bias: np.ndarray | None = None,
              nid: str | None = None) -> str:
        y = self.op("Dense", [x, self.weight(w, w_bit)], nid=nid)
        if bias is not None:
            y = self.op("BiasAdd", [y, self._const(bias)], {"axis": -1})
        return y

    def conv(self, x: str, w: np.ndarray, w_bit: int, bias: np.ndarray | None = None,
             stride: int = 1, padding: int = 0, nid: str | None = None) -> str:
        y = self.op("Conv2D", [x, self.weight(w, w_bit)], {"stride": stride, "padding": padding}, nid=nid)
        if bias is not None:
            y = self.op("BiasAdd", [y, self._const(bias)], {"axis": 0})
        return y

    def _const(self, value: np.ndarray) -> str:
        name = self._id("b")
        self.g.initializers[name] = np.asarray(value, dtype=np.float64)
        return name

    def finish(self, outputs: list[str]) -> Graph:
        self.g.outputs = list(outputs)
        self.g.validate()
        return self.g


def _he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def mlp_graph(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray | None],
              bits: Sequence[tuple[int, int]], calib: np.ndarray, name: str = "mlp",
              layer_ids: Sequence[str] | None = None) -> Graph:
    """QDQ graph of a ReLU MLP with the given float parameters and per-layer (w_bit, a_bit)."""
    b = QdqBuilder(name, calib.shape[1:], calib)
    x = "x"
    signed = bool((calib < 0).any())
    ids = layer_ids or [f"dense{i + 1}" for i in range(len(weights))]
    for i, (w, bias, (w_bit, a_bit)) in enumerate(zip(weights, biases, bits)):
        x = b.quant_act(x, a_bit, signed if i == 0 else False)
        x = b.dense(x, w, w_bit, bias, nid=ids[i])
        if i < len(weights) - 1:
            x = b.op("ReLU", [x])
    return b.finish([x])


def toy_mlp(config: QuantConfig | Sequence[tuple[int, int]], seed: int = 0,
            sizes: Sequence[int] = (16, 32, 32, 24, 10), bias: bool = True,
            n_calib: int = 16) -> Graph:
    """Random-weight MLP (4 Dense layers by default) in QDQ form."""
    rng = np.random.default_rng(seed)
    bits = list(config.bits.values()) if isinstance(config, QuantConfig) else list(config)
    if len(bits) != len(sizes) - 1:
        raise ValueError(f"need {len(sizes) - 1} bit pairs, got {len(bits)}")
    weights = [_he(rng, a, (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [rng.normal(0, 0.1, b) if bias else None for b in sizes[1:]]
    calib = rng.normal(0, 1, (n_calib, sizes[0]))
    return mlp_graph(weights, biases, bits, calib, "toy_mlp")


TOY_CNN_LAYERS = ("conv1", "conv2", "conv3", "conv4", "fc1", "fc2")


def toy_cnn(config: QuantConfig | Sequence[tuple[int, int]], seed: int = 0, n_calib: int = 8) -> Graph:
    """Six-layer CNN: 4 Conv2D (one residual block, max-pool) and 2 Dense layers."""
    rng = np.random.default_rng(seed)
    bits = list(config.bits.values()) if isinstance(config, QuantConfig) else list(config)
    if len(bits) != 6:
        raise ValueError("toy CNN has 6 layers")
    calib = rng.normal(0, 1, (n_calib, 3, 8, 8))
    b = QdqBuilder("toy_cnn", (3, 8, 8), calib)
    (w1, a1), (w2, a2), (w3, a3), (w4, a4), (w5, a5), (w6, a6) = bits

    x = b.quant_act("x", a1, True)
    h = b.conv(x, _he(rng, 27, (8, 3, 3, 3)), w1, rng.normal(0, 0.1, 8), padding=1, nid="conv1")
    h = b.op("ReLU", [h])
    skip = b.quant_act(h, 8, False)
    h2_in = b.quant_act(skip, a2, False)
    h2 = b.conv(h2_in, _he(rng, 72, (8, 8, 3, 3)), w2, rng.normal(0, 0.1, 8), padding=1, nid="conv2")
    h2 = b.op("ReLU", [h2])
    h2 = b.quant_act(h2, 8, False)
    r = b.op("Add", [skip, h2])
    r = b.quant_act(r, a3, False)
    r = b.op("MaxPool", [r], {"kernel": 2, "stride": 2})
    h3 = b.conv(r, _he(rng, 72, (16, 8, 3, 3)), w3, rng.normal(0, 0.1, 16), padding=1, nid="conv3")
    h3 = b.op("ReLU", [h3])
    h3 = b.quant_act(h3, a4, False)
    h4 = b.conv(h3, _he(rng, 16, (16, 16, 1, 1)), w4, rng.normal(0, 0.1, 16), nid="conv4")
    h4 = b.op("ReLU", [h4])
    h4 = b.quant_act(h4, a5, False)
    f = b.op("Flatten", [h4])
    f = b.dense(f, _he(rng, 256, (256, 32)), w5, rng.normal(0, 0.1, 32), nid="fc1")
    f = b.op("ReLU", [f])
    f = b.quant_act(f, a6, False)
    out = b.dense(f, _he(rng, 32, (32, 10)), w6, rng.normal(0, 0.1, 10), nid="fc2")
    return b.finish([out])


def two_layer_mlp_int_input(seed: int = 0, sizes=(8, 16, 4), bits=(8, 8)) -> Graph:
    """Integer-input MLP: DQ(x), DQ(w1) -> Dense -> ReLU -> Q/DQ -> Dense(DQ(w2))."""
    rng = np.random.default_rng(seed)
    w_bit, a_bit = bits
    g = Graph([], {"x": {"shape": [sizes[0]], "dtype": "int", "bits": a_bit, "signed": True}},
              [], {}, "mlp2")
    _, hi = qrange(a_bit, True)
    s_x = 1.0 / hi
    q1 = quantize_symmetric(_he(rng, sizes[0], sizes[:2]), w_bit)
    q2 = quantize_symmetric(_he(rng, sizes[1], sizes[1:]), w_bit)
    g.initializers.update({"w1": q1.data, "w2": q2.data})
    calib = rng.uniform(-1, 1, (32, sizes[0]))
    h = np.maximum(calib @ (q1.data * q1.scale), 0)
    s_h = activation_scale(h, a_bit, False)
    g.nodes = [
        Node("dq_x", "Dequantize", ["x"], {"scale": s_x, "bits": a_bit, "signed": True}),
        Node("dq_w1", "Dequantize", ["w1"], {"scale": q1.scale, "bits": w_bit, "signed": True}),
        Node("dense1", "Dense", ["dq_x", "dq_w1"]),
        Node("relu1", "ReLU", ["dense1"]),
        Node("q_h", "Quantize", ["relu1"], {"scale": s_h, "bits": a_bit, "signed": False}),
        Node("dq_h", "Dequantize", ["q_h"], {"scale": s_h, "bits": a_bit, "signed": False}),
        Node("dq_w2", "Dequantize", ["w2"], {"scale": q2.scale, "bits": w_bit, "signed": True}),
        Node("dense2", "Dense", ["dq_h", "dq_w2"]),
    ]
    g.outputs = ["dense2"]
    g.validate()
    return g


def random_graph(rng: np.random.Generator, target_bits=(2, 8), allow_conv: bool = True,
                 output_bits: int | None = 8) -> Graph:
    """Small random QDQ graph (MLP or CNN) with random shapes, bits, biases and activations.

    With ``output_bits`` the logits pass through a final signed Quantize/Dequantize pair.
    """
    lo, hi = target_bits

    def rbits():
        return int(rng.integers(lo, hi + 1))

    use_conv = allow_conv and rng.random() < 0.5
    signed_in = bool(rng.random() < 0.5)
    if use_conv:
        c, h = int(rng.integers(1, 4)), int(rng.integers(3, 7))
        calib = rng.normal(0, 1, (6, c, h, h))
        if not signed_in:
            calib = np.abs(calib)
        b = QdqBuilder("rand_cnn", calib.shape[1:], calib)
        x = b.quant_act("x", rbits(), signed_in)
        n_conv = int(rng.integers(1, 3))
        for i in range(n_conv):
            co = int(rng.integers(1, 6))
            k = int(rng.choice([1, 3]))
            pad = int(k // 2) if rng.random() < 0.7 or h < k else 0
            stride = int(rng.choice([1, 2])) if h > 3 else 1
            bias = rng.normal(0, 0.2, co) if rng.random() < 0.7 else None
            x = b.conv(x, _he(rng, c * k * k, (co, c, k, k)), rbits(), bias, stride, pad, nid=f"conv{i + 1}")
            relu = rng.random() < 0.7
            if relu:
                x = b.op("ReLU", [x])
            x = b.quant_act(x, rbits(), not relu)
            h = (h + 2 * pad - k) // stride + 1
            c = co
        if h >= 2 and rng.random() < 0.5:
            x = b.op("MaxPool", [x], {"kernel": 2, "stride": 2})
            h = h // 2
        x = b.op("Flatten", [x])
        n_in = c * h * h
    else:
        n_in = int(rng.integers(1, 24))
        calib = rng.normal(0, 1, (6, n_in))
        if not signed_in:
            calib = np.abs(calib)
        b = QdqBuilder("rand_mlp", calib.shape[1:], calib)
        x = b.quant_act("x", rbits(), signed_in)
    n_dense = int(rng.integers(1, 4))
    for i in range(n_dense):
        n_out = int(rng.integers(1, 20))
        bias = rng.normal(0, 0.2, n_out) if rng.random() < 0.7 else None
        x = b.dense(x, _he(rng, n_in, (n_in, n_out)), rbits(), bias, nid=f"dense{i + 1}")
        n_in = n_out
        if i < n_dense - 1:
            relu = rng.random() < 0.7
            if relu:
                x = b.op("ReLU", [x])
            x = b.quant_act(x, rbits(), not relu)
    if output_bits is not None:
        x = b.quant_act(x, output_bits, True)
    return b.finish([x])


def resnet18_like(width: int = 2, res: int = 32, seed: int = 0) -> Graph:
    """ResNet-18 topology (20 Conv2D incl. 3 projections, 1 Dense) at toy width/resolution."""
    rng = np.random.default_rng(seed)
    calib = rng.normal(0, 1, (2, 3, res, res))
    b = QdqBuilder("resnet18_like", (3, res, res), calib)
    x = b.quant_act("x", 8, True)
    x = b.conv(x, _he(rng, 147, (width, 3, 7, 7)), 8, rng.normal(0, .1, width), 2, 3, nid="conv1")
    x = b.op("ReLU", [x])
    x = b.quant_act(x, 8, False)
    x = b.op("MaxPool", [x], {"kernel": 2, "stride": 2})
    c, n = width, 1
    for stage, mult in enumerate((1, 2, 4, 8)):
        co = width * mult
        for block in range(2):
            stride = 2 if stage > 0 and block == 0 else 1
            y = b.conv(x, _he(rng, c * 9, (co, c, 3, 3)), 8, None, stride, 1, nid=f"conv{n + 1}")
            y = b.quant_act(b.op("ReLU", [y]), 8, False)
            y = b.conv(y, _he(rng, co * 9, (co, co, 3, 3)), 8, None, 1, 1, nid=f"conv{n + 2}")
            n += 2
            y = b.quant_act(y, 8, True)
            if stride != 1 or co != c:
                skip = b.conv(x, _he(rng, c, (co, c, 1, 1)), 8, None, stride, 0, nid=f"down{stage}")
                skip = b.quant_act(skip, 8, True)
            else:
                skip = x
            x = b.op("Add", [y, skip])
            x = b.quant_act(b.op("ReLU", [x]), 8, False)
            c = co
    spatial = int(b.values[x].shape[-1])
    x = b.op("MaxPool", [x], {"kernel": spatial, "stride": spatial})
    x = b.op("Flatten", [x])
    x = b.dense(x, _he(rng, c, (c, 10)), 8, rng.normal(0, .1, 10), nid="fc")
    return b.finish([x])


def vit_like(depth: int = 12, dim: int = 8, tokens: int = 4, seed: int = 0) -> Graph:
    """Transformer-shaped graph: 1 patch Conv2D, 4 Dense + 2 MatMul per block, 1 head Dense.

    Softmax/LayerNorm are outside the op set and are stood in by ReLU; the graph
    exists for structural tests (partitioning, layer extraction, lowering).
    """
    rng = np.random.default_rng(seed)
    calib = rng.normal(0, 1, (2, 3, 4, 4 * tokens))
    b = QdqBuilder("vit_like", calib.shape[1:], calib)
    x = b.quant_act("x", 8, True)
    x = b.conv(x, _he(rng, 48, (dim, 3, 4, 4)), 8, rng.normal(0, .1, dim), 4, 0, nid="patch_embed")
    x = b.quant_act(x, 8, True)
    x = b.op("Flatten", [x], {"perm": [1, 2, 0], "out_shape": [tokens, dim]})
    damp = 0.1  # residual branches are scaled down since there is no normalization
    for i in range(depth):
        h = b.dense(x, damp * _he(rng, dim, (dim, dim)), 8, None, nid=f"b{i}_qkv")
        h = b.quant_act(h, 8, True)
        s = b.op("MatMul", [x, h], {"transpose_b": True}, nid=f"b{i}_qk")
        s = b.quant_act(b.op("ReLU", [s]), 8, False)
        a = b.op("MatMul", [s, h], nid=f"b{i}_av")
        a = b.quant_act(a, 8, True)
        o = b.dense(a, damp * _he(rng, dim, (dim, dim)), 8, None, nid=f"b{i}_proj")
        o = b.quant_act(o, 8, True)
        r = b.quant_act(b.op("Add", [x, o]), 8, True)
        f = b.dense(r, _he(rng, dim, (dim, 2 * dim)), 8, None, nid=f"b{i}_fc1")
        f = b.quant_act(b.op("ReLU", [f]), 8, False)
        f = b.dense(f, damp * _he(rng, 2 * dim, (2 * dim, dim)), 8, None, nid=f"b{i}_fc2")
        f = b.quant_act(f, 8, True)
        x = b.quant_act(b.op("Add", [r, f]), 8, True)
    out = b.dense(x, _he(rng, dim, (dim, 10)), 8, None, nid="head")
    return b.finish([out])


# ---------------------------------------------------------------- benchmark layer lists (ImageNet shapes)

def resnet18_layers() -> list[LayerDesc]:
    layers = [LayerDesc.conv("conv1", 3, 64, 7, 7, 112, 112)]
    c, hw, n = 64, 56, 1
    for stage, co in enumerate((64, 128, 256, 512)):
        for block in range(2):
            stride = 2 if stage > 0 and block == 0 else 1
            out_hw = hw // stride
            layers.append(LayerDesc.conv(f"conv{n + 1}", c, co, 3, 3, out_hw, out_hw))
            layers.append(LayerDesc.conv(f"conv{n + 2}", co, co, 3, 3, out_hw, out_hw))
            n += 2
            if stride != 1:
                layers.append(LayerDesc.conv(f"down{stage}", c, co, 1, 1, out_hw, out_hw))
            c, hw = co, out_hw
    layers.append(LayerDesc.dense("fc", 512, 1000))
    return layers


def vgg16_layers() -> list[LayerDesc]:
    plan = [(3, 64, 224), (64, 64, 224), (64, 128, 112), (128, 128, 112), (128, 256, 56),
            (256, 256, 56), (256, 256, 56), (256, 512, 28), (512, 512, 28), (512, 512, 28),
            (512, 512, 14), (512, 512, 14), (512, 512, 14)]
    layers = [LayerDesc.conv(f"conv{i + 1}", ci, co, 3, 3, hw, hw) for i, (ci, co, hw) in enumerate(plan)]
    layers += [LayerDesc.dense("fc1", 25088, 4096), LayerDesc.dense("fc2", 4096, 4096),
               LayerDesc.dense("fc3", 4096, 1000)]
    return layers


def vit_b32_layers(seq_len: int = 50, dim: int = 768, heads: int = 12, depth: int = 12) -> list[LayerDesc]:
    """ViT-B/32: patch Conv2D, per block qkv/proj/fc1/fc2 Dense and two attention MatMuls."""
    head_dim = dim // heads
    layers = [LayerDesc.conv("patch_embed", 3, dim, 32, 32, 7, 7)]
    for i in range(depth):
        layers.append(LayerDesc.dense(f"b{i}_qkv", dim, 3 * dim, seq_len=seq_len))
        layers.append(LayerDesc(f"b{i}_qk", "MatMul", seq_len, head_dim, seq_len, heads, seq_len=seq_len))
        layers.append(LayerDesc(f"b{i}_av", "MatMul", head_dim, seq_len, seq_len, heads, seq_len=seq_len))
        layers.append(LayerDesc.dense(f"b{i}_proj", dim, dim, seq_len=seq_len))
        layers.append(LayerDesc.dense(f"b{i}_fc1", dim, 4 * dim, seq_len=seq_len))
        layers.append(LayerDesc.dense(f"b{i}_fc2", 4 * dim, dim, seq_len=seq_len))
    layers.append(LayerDesc.dense("head", dim, 1000))
    return layers


BENCHMARK_LAYERS = {"resnet18": resnet18_layers, "vgg16": vgg16_layers, "vit_b32": vit_b32_layers}
