"""cimforge: mixed-precision quantization, compilation and simulation for RRAM crossbar CIM targets."""

__version__ = "0.1.0"

from cimforge.target import CimTarget, TargetError, load_target, save_target
from cimforge.quant import (
    QTensor,
    dequantize,
    fake_quant_backward,
    fake_quant_forward,
    quantize_symmetric,
    requantize,
)

__all__ = [
    "CimTarget",
    "TargetError",
    "load_target",
    "save_target",
    "QTensor",
    "quantize_symmetric",
    "dequantize",
    "requantize",
    "fake_quant_forward",
    "fake_quant_backward",
]
