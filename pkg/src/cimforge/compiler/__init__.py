from cimforge.compiler.graph import Graph, GraphError, Node, evaluate, load_model, save_model
from cimforge.compiler.lower import DeviceTrace, HostProgram, LoopNest, lower, schedule
from cimforge.compiler.passes import (
    PassError,
    config_update_pass,
    extract_layers,
    fq2i_pass,
    infer_config,
    layerwise_deviation,
    optimize,
    partition_pass,
    qnn_fuse_pass,
)
from cimforge.compiler.runtime import InferenceResult, run_inference


def compile_graph(g: Graph, target, manifest: dict | None = None):
    """Graph passes followed by scheduling and lowering: returns (trace, host program)."""
    return lower(optimize(g, target), target, manifest)


__all__ = [
    "Graph", "GraphError", "Node", "evaluate", "load_model", "save_model",
    "DeviceTrace", "HostProgram", "LoopNest", "lower", "schedule",
    "PassError", "config_update_pass", "extract_layers", "fq2i_pass", "infer_config", "layerwise_deviation",
    "optimize", "partition_pass", "qnn_fuse_pass",
    "InferenceResult", "run_inference", "compile_graph",
]
