from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cimforge.config import ConfigError, QuantConfig
from cimforge.cost import (
    ConvParams,
    LayerDesc,
    baseline_latency,
    build_lut,
    gemm_dims,
    layer_latency,
    n_mvm,
    n_write,
    speedup_and_score,
    total_latency,
)
from cimforge.models import resnet18_layers, vgg16_layers, vit_b32_layers
from cimforge.target import CimTarget

T = CimTarget()


def test_gemm_dims():
    assert gemm_dims(ConvParams(3, 64, 3, 3, 112, 112)) == (64, 27, 12544)
    assert gemm_dims(ConvParams(16, 32, 1, 1, 1, 1)) == (32, 16, 1)
    assert gemm_dims(ConvParams(1, 1, 1, 1, 1, 1)) == (1, 1, 1)


def test_n_write_examples():
    assert n_write(LayerDesc.dense("d", 128, 64), 8, T) == 1
    assert n_write(LayerDesc.dense("d", 300, 512), 6, CimTarget(r_cell=2)) == 24
    assert n_write(LayerDesc.dense("d", 256, 128), 4, T) == 1


def test_n_mvm_examples():
    d = LayerDesc.dense("d", 128, 64)
    assert n_mvm(d, 8, 8, T) == 8
    assert n_mvm(d, 8, 1, T) == 1
    conv = LayerDesc.conv("c", 64, 128, 3, 3, 28, 28)
    assert n_mvm(conv, 8, 4, T) * 2 == n_mvm(conv, 8, 8, T)


def test_latency_examples():
    d = LayerDesc.dense("d", 128, 64)
    cfg = QuantConfig({"d": (8, 8)})
    assert total_latency([d], cfg, T) == Fraction(336, 5)  # 67.2 us
    assert total_latency([], QuantConfig(), T) == 0
    rep = LayerDesc("d", "MatMul", 64, 128, 1, 12)
    assert layer_latency(rep, 8, 8, T) == 12 * Fraction(336, 5)
    with pytest.raises(ConfigError):
        total_latency([d], QuantConfig({"other": (8, 8)}), T)


def test_lut():
    layers = resnet18_layers()
    lut = build_lut(layers, T)
    assert len(lut) == 49 * len(layers)
    assert sum(lut[l.id, 8, 8] for l in layers) == baseline_latency(layers, T)
    for l in layers:
        for w in T.bit_range:
            col = [lut[l.id, w, a] for a in T.bit_range]
            assert col == sorted(col)
    csv = lut.to_csv("note")
    assert csv.startswith("# note\nlayer_id,w_bit,a_bit,latency_us\n")
    assert len(csv.strip().splitlines()) == 2 + 49 * len(layers)


def test_speedup_and_score():
    s, score = speedup_and_score(2.37, 1, 80.0, 80.0 - 0.812)
    assert s == pytest.approx(2.37)
    assert score == pytest.approx(2.37 / 0.812)
    assert speedup_and_score(5, 5, 70, 71)[0] == 1.0
    assert speedup_and_score(3, 1, 70, 70)[1] == pytest.approx(3 / 0.001)


def test_layer_desc_validation():
    with pytest.raises(ValueError):
        LayerDesc("x", "Pool", 1, 1)
    with pytest.raises(ValueError):
        LayerDesc("x", "Dense", 0, 1)
    assert LayerDesc.dense("x", 768, 2304, seq_len=50).v_l == 50


def test_benchmark_layer_counts():
    assert sum(l.kind == "Conv2D" for l in resnet18_layers()) == 20
    assert len(vgg16_layers()) == 16
    vit = vit_b32_layers()
    assert sum(l.kind == "MatMul" for l in vit) == 24 and len(vit) == 74


@given(st.integers(1, 2000), st.integers(1, 2000), st.integers(1, 500), st.integers(2, 8), st.integers(2, 8),
       st.sampled_from([1, 2, 4]), st.sampled_from([1, 2]))
def test_monotone_in_bits(m, n, v, w_bit, a_bit, r_cell, r_dac):
    t = CimTarget(r_cell=r_cell, r_dac=r_dac)
    layer = LayerDesc("l", "Dense", m, n, v)
    base = layer_latency(layer, w_bit, a_bit, t)
    if a_bit < 8:
        assert layer_latency(layer, w_bit, a_bit + 1, t) >= base
    if w_bit < 8:
        assert layer_latency(layer, w_bit + 1, a_bit, t) >= base
    assert n_mvm(layer, w_bit, a_bit, t) == v * n_write(layer, w_bit, t) * -(-a_bit // r_dac)
