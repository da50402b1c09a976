"""Accuracy oracles for the search: a closed-form synthetic one and a toy QAT trainer."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from cimforge.config import ConfigError, QuantConfig
from cimforge.cost import LayerDesc
from cimforge.quant import fake_quant_forward, qrange


class AccuracyOracle(Protocol):
    acc_8b: float
    layer_ids: list[str]

    def __call__(self, config: QuantConfig) -> float: ...


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticOracle:
    """acc_q = acc_8b - sum_l c_w,l * max(0, 8-w)^p + c_a,l * max(0, 8-a)^p."""

    layer_ids: list[str]
    seed: int = 0
    acc_8b: float = 90.0
    p: float = 1.5
    coef_range: tuple[float, float] = (0.02, 0.2)
    c_w: np.ndarray | None = None
    c_a: np.ndarray | None = None

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.seed)
        k = len(self.layer_ids)
        drawn = rng.uniform(*self.coef_range, size=(2, k))
        self.c_w = drawn[0] if self.c_w is None else np.asarray(self.c_w, dtype=float)
        self.c_a = drawn[1] if self.c_a is None else np.asarray(self.c_a, dtype=float)

    def penalty(self, w_bits, a_bits) -> np.ndarray:
        """Vectorized accuracy penalty; trailing axis runs over layers."""
        w = np.maximum(0, 8 - np.asarray(w_bits, dtype=float))
        a = np.maximum(0, 8 - np.asarray(a_bits, dtype=float))
        return (self.c_w * w ** self.p + self.c_a * a ** self.p).sum(axis=-1)

    def __call__(self, config: QuantConfig) -> float:
        bits = np.array([config[lid] for lid in self.layer_ids])
        return float(self.acc_8b - self.penalty(bits[:, 0], bits[:, 1]))


def synthetic_layers(n: int = 5) -> list[LayerDesc]:
    """Fixed layer shapes for synthetic-oracle searches: a mix of MVM- and write-bound layers."""
    catalog = [
        LayerDesc.conv("conv1", 3, 32, 3, 3, 32, 32),
        LayerDesc.conv("conv2", 32, 64, 3, 3, 16, 16),
        LayerDesc.conv("conv3", 64, 128, 3, 3, 8, 8),
        LayerDesc.dense("fc1", 2048, 512),
        LayerDesc.dense("fc2", 512, 10),
        LayerDesc.conv("conv4", 128, 128, 3, 3, 8, 8),
        LayerDesc.dense("fc3", 512, 512),
    ]
    if not 1 <= n <= len(catalog):
        raise ValueError(f"n must be in [1, {len(catalog)}]")
    layers = catalog[:n]
    return layers


# ---------------------------------------------------------------- toy QAT

TOY_SIZES = (16, 32, 32, 8)
TOY_LAYER_IDS = ("fc1", "fc2", "fc3")


@dataclass(frozen=True)
class BlobData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


@lru_cache(maxsize=8)
def blob_dataset(seed: int = 0, n_train: int = 2048, n_val: int = 512, n_classes: int = 8,
                 dim: int = 16, spread: float = 1.0, noise: float = 1.0) -> BlobData:
    """Gaussian class blobs; regenerated from the seed on every call."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, (n_classes, dim))

    def draw(n):
        y = rng.integers(0, n_classes, n)
        return centers[y] + noise * rng.standard_normal((n, dim)), y

    x_tr, y_tr = draw(n_train)
    x_va, y_va = draw(n_val)
    return BlobData(x_tr, y_tr, x_va, y_va)


def _softmax_xent_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    return p / len(y)


class ToyMLP:
    """16-32-32-8 ReLU classifier with optional per-layer fake quantization."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = [w.copy() for w in weights]
        self.biases = [b.copy() for b in biases]

    @classmethod
    def init(cls, rng: np.random.Generator, sizes: Sequence[int] = TOY_SIZES) -> "ToyMLP":
        ws = [rng.normal(0, np.sqrt(2.0 / a), (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(ws, [np.zeros(b) for b in sizes[1:]])

    def forward(self, x, bits=None, act_scales=None):
        """Returns logits and the per-layer (possibly fake-quantized) inputs and weights."""
        inputs, wq = [], []
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if bits is not None:
                w_bit, a_bit = bits[i]
                h = fake_quant_forward(h, a_bit, signed=(i == 0), scale=act_scales[i])
                w = fake_quant_forward(w, w_bit)
            inputs.append(h)
            wq.append(w)
            h = h @ w + b
            if i < n - 1:
                h = np.maximum(h, 0.0)
        return h, inputs, wq

    def sgd_step(self, x, y, lr, bits=None, act_scales=None) -> None:
        logits, inputs, wq = self.forward(x, bits, act_scales)
        g = _softmax_xent_grad(logits, y)
        for i in reversed(range(len(self.weights))):
            gw = inputs[i].T @ g  # straight-through: quantizers pass gradients unchanged
            gb = g.sum(axis=0)
            if i > 0:
                g = (g @ wq[i].T) * (inputs[i] > 0)
            self.weights[i] -= lr * gw
            self.biases[i] -= lr * gb

    def accuracy(self, x, y, bits=None, act_scales=None) -> float:
        logits, _, _ = self.forward(x, bits, act_scales)
        return 100.0 * float(np.mean(np.argmax(logits, axis=1) == y))

    def activation_scales(self, x, bits) -> list[float]:
        """Per-layer input scales calibrated on float activations."""
        scales = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            signed = i == 0
            peak = float(np.max(np.abs(h))) if signed else float(np.max(h))
            hi = qrange(bits[i][1], signed)[1]
            scales.append(peak / hi if peak > 0 else 1.0)
            h = np.maximum(h @ w + b, 0.0)
        return scales


def train_epochs(model: ToyMLP, data: BlobData, epochs: int, lr: float, batch: int,
                 rng: np.random.Generator, bits=None) -> None:
    n = len(data.y_train)
    for _ in range(epochs):
        order = rng.permutation(n)
        scales = model.activation_scales(data.x_train, bits) if bits is not None else None
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            model.sgd_step(data.x_train[idx], data.y_train[idx], lr, bits, scales)


@lru_cache(maxsize=8)
def pretrained_toy(seed: int = 0, epochs: int = 30, lr: float = 0.05, batch: int = 64) -> ToyMLP:
    rng = np.random.default_rng(seed + 1)
    model = ToyMLP.init(rng)
    train_epochs(model, blob_dataset(seed), epochs, lr, batch, rng)
    return model


@dataclass
class ToyQatOracle:
    """Fine-tunes the pre-trained toy MLP under fake quantization and reports validation accuracy."""

    seed: int = 0
    epochs: int = 3
    lr: float = 0.05
    batch: int = 64
    layer_ids: list[str] = field(default_factory=lambda: list(TOY_LAYER_IDS))
    _acc_8b: float | None = field(default=None, init=False, repr=False)

    def _bits(self, config: QuantConfig) -> list[tuple[int, int]]:
        if len(config) != len(TOY_LAYER_IDS):
            raise ConfigError(f"the toy QAT oracle has {len(TOY_LAYER_IDS)} layers, config has {len(config)}")
        return [config[lid] for lid in self.layer_ids]

    @property
    def data(self) -> BlobData:
        return blob_dataset(self.seed)

    @property
    def float_accuracy(self) -> float:
        return pretrained_toy(self.seed).accuracy(self.data.x_val, self.data.y_val)

    @property
    def acc_8b(self) -> float:
        if self._acc_8b is None:
            self._acc_8b = self(QuantConfig.uniform(self.layer_ids))
        return self._acc_8b

    def finetune(self, config: QuantConfig) -> tuple[ToyMLP, list[float]]:
        bits = self._bits(config)
        base = pretrained_toy(self.seed)
        model = ToyMLP(base.weights, base.biases)
        rng = np.random.default_rng(self.seed + 2)
        train_epochs(model, self.data, self.epochs, self.lr, self.batch, rng, bits)
        return model, model.activation_scales(self.data.x_train, bits)

    def __call__(self, config: QuantConfig) -> float:
        bits = self._bits(config)
        model, scales = self.finetune(config)
        return model.accuracy(self.data.x_val, self.data.y_val, bits, scales)


def toy_layers() -> list[LayerDesc]:
    return [LayerDesc.dense(lid, a, b) for lid, a, b in zip(TOY_LAYER_IDS, TOY_SIZES[:-1], TOY_SIZES[1:])]
