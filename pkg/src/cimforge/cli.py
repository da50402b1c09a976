"""cimforge command line: compile, run, cost, search, plus model/target scaffolding."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from cimforge import __version__
from cimforge.aq import SyntheticOracle, ToyQatOracle, cached_optimum, search
from cimforge.aq.oracles import TOY_LAYER_IDS, TOY_SIZES, blob_dataset, pretrained_toy
from cimforge.compiler.graph import GraphError, decode_tensor, encode_tensor, load_model, save_model
from cimforge.compiler.lower import DeviceTrace, TraceError, lower
from cimforge.compiler.passes import PassError, extract_layers, optimize
from cimforge.compiler.runtime import run_inference
from cimforge.config import ConfigError, ConstraintMode, QuantConfig
from cimforge.cost import LatencyLut, baseline_latency, n_mvm, n_write
from cimforge.models import mlp_graph, resnet18_like, toy_cnn, toy_mlp, vit_like
from cimforge.target import CimTarget, TargetError, dumps_target, format_us, load_target
from cimforge.xbar import AccumulatorOverflow

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
VALIDATION_ERRORS = (TargetError, GraphError, PassError, TraceError, ConfigError, FileNotFoundError,
                     IsADirectoryError, json.JSONDecodeError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def manifest(args, inputs: dict, outputs: dict) -> dict:
    return {
        "command": args.command,
        "inputs": inputs,
        "target": getattr(args, "target", None),
        "seed": getattr(args, "seed", None),
        "constraint_mode": getattr(args, "constraints", None),
        "outputs": outputs,
        "version": __version__,
    }


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_target(path: str) -> CimTarget:
    if not Path(path).is_file():
        raise FileNotFoundError(f"target file not found: {path}")
    return load_target(path)


def _load_model(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    return load_model(path)


def _load_inputs(path: str, names: list[str]) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    if p.suffix == ".npy":
        if len(names) != 1:
            raise ValueError(f"model has {len(names)} inputs; use a JSON input file")
        return {names[0]: np.load(p)}
    data = json.loads(p.read_text())
    data = data.get("inputs", data)
    return {k: decode_tensor(v) if isinstance(v, dict) else np.asarray(v) for k, v in data.items()}


# ---------------------------------------------------------------- commands

def cmd_compile(args) -> int:
    target = _load_target(args.target)
    g = _load_model(args.model)
    report_path = args.report or f"{args.out}.report.json"
    man = manifest(args, {"model": args.model}, {"trace": args.out, "report": report_path})
    opt = optimize(g, target)
    trace, program = lower(opt, target, man)
    trace.save(args.out)
    layers = extract_layers(opt)
    rows = []
    for layer in layers:
        info = program.layers[layer.id]
        rows.append({"id": layer.id, "kind": layer.kind, "w_bit": info["w_bit"], "a_bit": info["a_bit"],
                     "n_write": n_write(layer, info["w_bit"], target),
                     "n_mvm": n_mvm(layer, info["w_bit"], info["a_bit"], target)})
    total = sum((r["n_write"] * target.t_write + r["n_mvm"] * target.t_mvm for r in rows), 0)
    report = {"manifest": man, "layers": rows, "predicted_latency_us": format_us(total)}
    Path(report_path).write_text(_dump(report))
    print(f"wrote {args.out} ({len(trace.records)} records); predicted latency {format_us(total)} us")
    return EXIT_OK


def cmd_run(args) -> int:
    if not Path(args.trace).is_file():
        raise FileNotFoundError(f"trace file not found: {args.trace}")
    trace = DeviceTrace.load(args.trace)
    graph_inputs = [spec["name"] for spec in trace.header["program"]["graph"]["inputs"]]
    feeds = _load_inputs(args.input, graph_inputs)
    res = run_inference(trace, feeds)
    man = manifest(args, {"trace": args.trace, "input": args.input}, {"output": args.out})
    man["target"] = trace.header.get("manifest", {}).get("target")
    out = {
        "manifest": man,
        "outputs": {k: {"dtype": str(v.dtype), "shape": list(v.shape), "data": v.tolist()}
                    for k, v in res.outputs.items()},
        "latency_us": format_us(res.latency_us),
        "layers": {k: {"n_write": s.writes, "n_mvm": s.mvms, "latency_us": format_us(s.latency_us)}
                   for k, s in res.layers.items()},
    }
    Path(args.out).write_text(_dump(out))
    print(f"wrote {args.out}; measured latency {format_us(res.latency_us)} us")
    return EXIT_OK


def cmd_cost(args) -> int:
    target = _load_target(args.target)
    layers = extract_layers(_load_model(args.model))
    t_8b = baseline_latency(layers, target)
    man = manifest(args, {"model": args.model}, {"lut": args.lut})
    if args.lut:
        lut = LatencyLut(layers, target)
        Path(args.lut).write_text(lut.to_csv("manifest " + json.dumps(man, sort_keys=True)))
    print(_dump({"manifest": man, "n_layers": len(layers), "latency_8bit_us": format_us(t_8b)}), end="")
    return EXIT_OK


def cmd_search(args) -> int:
    target = _load_target(args.target)
    layers = extract_layers(_load_model(args.model))
    if not layers:
        raise ValueError("model has no Conv2D/Dense/MatMul layers to quantize")
    ids = [l.id for l in layers]
    if args.oracle == "synthetic":
        oracle = SyntheticOracle(ids, seed=args.oracle_seed)
    else:
        if len(ids) != len(TOY_LAYER_IDS):
            raise ValueError(f"the toy QAT oracle trains a {len(TOY_LAYER_IDS)}-layer MLP; "
                             f"the model has {len(ids)} layers (see 'make-model --kind qat_mlp')")
        oracle = ToyQatOracle(seed=args.oracle_seed, layer_ids=ids)
    res = search(layers, oracle, target, args.constraints, args.episodes, args.seed)
    report = res.report()
    report["manifest"] = manifest(args, {"model": args.model}, {"report": args.out})
    report["manifest"]["oracle"] = {"kind": args.oracle, "seed": args.oracle_seed}
    report["violations"] = res.best_config.violations(target.b_min, target.b_max, target.r_cell)
    if args.reference:
        if args.oracle != "synthetic" or len(layers) > 5:
            raise ValueError("--reference needs the synthetic oracle and at most 5 layers")
        opt = cached_optimum(layers, oracle, target)
        report["reference"] = {"optimal_reward": opt.reward, "optimal_config": opt.config.to_dict(),
                               "ratio": res.best_reward / opt.reward}
    Path(args.out).write_text(_dump(report))
    print(f"wrote {args.out}; best reward {res.best_reward:.4f}, speedup {report['speedup']:.4f}, "
          f"S/AL {report['sal_score']:.4f}")
    return EXIT_OK


def _qat_mlp(bits):
    model = pretrained_toy(0)
    calib = blob_dataset(0).x_train[:64]
    return mlp_graph(model.weights, model.biases, bits, calib, "qat_mlp", list(TOY_LAYER_IDS))


MODEL_KINDS = {
    "toy_mlp": (4, lambda bits: toy_mlp(bits)),
    "toy_cnn": (6, lambda bits: toy_cnn(bits)),
    "qat_mlp": (len(TOY_SIZES) - 1, _qat_mlp),
    "resnet18_like": (None, lambda bits: resnet18_like()),
    "vit_like": (None, lambda bits: vit_like()),
}


def cmd_make_model(args) -> int:
    n, build = MODEL_KINDS[args.kind]
    save_model(build([(args.w_bit, args.a_bit)] * (n or 0)), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_make_target(args) -> int:
    t = CimTarget(rows_n=args.rows, cols_m=args.cols, r_cell=args.r_cell, r_dac=args.r_dac)
    Path(args.out).write_text(dumps_target(t))
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    env_seed = os.environ.get("CIMFORGE_SEED")
    default_seed = int(env_seed) if env_seed not in (None, "") else 0
    p = _Parser(prog="cimforge", description="Compile, simulate and search mixed precision for CIM crossbars.")
    p.add_argument("--version", action="version", version=f"cimforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compile", help="optimize, lower and write a device trace")
    c.add_argument("--model", required=True)
    c.add_argument("--target", required=True)
    c.add_argument("--out", required=True, help="trace file (JSON Lines)")
    c.add_argument("--report", help="compile report (default: <out>.report.json)")
    c.set_defaults(func=cmd_compile)

    r = sub.add_parser("run", help="execute a trace on the simulator")
    r.add_argument("--trace", required=True)
    r.add_argument("--input", required=True, help=".npy (single input) or JSON {name: tensor}")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    k = sub.add_parser("cost", help="8-bit latency and optional latency LUT")
    k.add_argument("--model", required=True)
    k.add_argument("--target", required=True)
    k.add_argument("--lut", help="write the per-layer latency table as CSV")
    k.set_defaults(func=cmd_cost)

    s = sub.add_parser("search", help="DDPG mixed-precision search")
    s.add_argument("--model", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--constraints", choices=[m.value for m in ConstraintMode], default="none")
    s.add_argument("--episodes", type=int, default=600)
    s.add_argument("--seed", type=int, default=default_seed)
    s.add_argument("--oracle", choices=["toy", "synthetic"], default="synthetic")
    s.add_argument("--oracle-seed", type=int, default=0)
    s.add_argument("--reference", action="store_true",
                   help="also enumerate the exact optimum (synthetic oracle, <= 5 layers)")
    s.set_defaults(func=cmd_search)

    m = sub.add_parser("make-model", help="write a bundled example model")
    m.add_argument("--kind", choices=sorted(MODEL_KINDS), required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--w-bit", type=int, default=8)
    m.add_argument("--a-bit", type=int, default=8)
    m.set_defaults(func=cmd_make_model)

    t = sub.add_parser("make-target", help="write a target description")
    t.add_argument("--out", required=True)
    t.add_argument("--rows", type=int, default=256)
    t.add_argument("--cols", type=int, default=256)
    t.add_argument("--r-cell", type=int, default=4)
    t.add_argument("--r-dac", type=int, default=1)
    t.set_defaults(func=cmd_make_target)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (AccumulatorOverflow, ArithmeticError, MemoryError) as exc:
        print(f"cimforge: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as exc:
        print(f"cimforge: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"cimforge: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
