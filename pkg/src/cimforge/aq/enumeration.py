"""Exhaustive optimum of the search reward under the synthetic oracle (chunked numpy enumeration)."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cimforge.aq.env import ALPHA, BETA, GAMMA, ACC_LOSS, accuracy_target
from cimforge.aq.oracles import SyntheticOracle
from cimforge.config import QuantConfig
from cimforge.cost import LatencyLut, LayerDesc
from cimforge.target import CimTarget


@dataclass(frozen=True)
class Optimum:
    reward: float
    config: QuantConfig
    n_evaluated: int


def _reward_array(pen, lat, acc_8b, acc_t, t_8b):
    acc_q = acc_8b - pen
    good = BETA * (t_8b / lat - 1.0) + GAMMA * (acc_q - acc_t)
    return np.where(acc_q < acc_t, -ALPHA * (acc_t - acc_q), good)


def enumerate_optimum(layers: Sequence[LayerDesc], oracle: SyntheticOracle, target: CimTarget,
                      acc_loss: float = ACC_LOSS) -> Optimum:
    """Maximum reward over every (w_bit, a_bit) in [b_min, b_max]^2 per layer, no constraints."""
    bits = np.array([(w, a) for w in target.bit_range for a in target.bit_range])
    lut = LatencyLut(layers, target)
    k = len(layers)
    # per-layer option tables: latency (float us) and accuracy penalty
    lat = np.array([[float(lut[l.id, w, a]) for w, a in bits] for l in layers])
    pen = np.stack([oracle.c_w[i] * np.maximum(0, 8 - bits[:, 0]) ** oracle.p
                    + oracle.c_a[i] * np.maximum(0, 8 - bits[:, 1]) ** oracle.p for i in range(k)])
    acc_8b = float(oracle.acc_8b)
    acc_t = accuracy_target(acc_8b, acc_loss)
    t_8b = float(sum(lut[l.id, 8, 8] for l in layers))
    n_opt = len(bits)

    # all combinations of the trailing layers, built once
    tail = min(k, 4)
    tail_lat = np.zeros(1)
    tail_pen = np.zeros(1)
    for i in range(k - tail, k):
        tail_lat = (tail_lat[:, None] + lat[i][None, :]).ravel()
        tail_pen = (tail_pen[:, None] + pen[i][None, :]).ravel()

    best, best_idx = -np.inf, None
    head = k - tail
    for head_idx in np.ndindex(*([n_opt] * head)):
        h_lat = sum(lat[i, j] for i, j in enumerate(head_idx))
        h_pen = sum(pen[i, j] for i, j in enumerate(head_idx))
        r = _reward_array(tail_pen + h_pen, tail_lat + h_lat, acc_8b, acc_t, t_8b)
        j = int(np.argmax(r))
        if r[j] > best:
            best, best_idx = float(r[j]), (head_idx, j)
    head_idx, flat = best_idx
    tail_idx = np.unravel_index(flat, [n_opt] * tail)
    choice = list(head_idx) + [int(t) for t in tail_idx]
    config = QuantConfig({l.id: tuple(int(v) for v in bits[c]) for l, c in zip(layers, choice)})
    return Optimum(best, config, n_opt ** k)


def _cache_key(layers, oracle: SyntheticOracle, target: CimTarget, acc_loss: float) -> str:
    blob = json.dumps({
        "layers": [repr(l) for l in layers], "c_w": oracle.c_w.tolist(), "c_a": oracle.c_a.tolist(),
        "p": oracle.p, "acc_8b": oracle.acc_8b, "target": target.to_dict(), "acc_loss": acc_loss,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_memo: dict[str, Optimum] = {}


def cached_optimum(layers, oracle: SyntheticOracle, target: CimTarget, acc_loss: float = ACC_LOSS,
                   cache_dir: str | Path | None = None) -> Optimum:
    """``enumerate_optimum`` memoized in-process and on disk (``CIMFORGE_CACHE`` or ~/.cache/cimforge)."""
    key = _cache_key(layers, oracle, target, acc_loss)
    if key in _memo:
        return _memo[key]
    root = Path(cache_dir or os.environ.get("CIMFORGE_CACHE") or Path.home() / ".cache" / "cimforge")
    path = root / f"optimum-{key}.json"
    if path.exists():
        d = json.loads(path.read_text())
        opt = Optimum(d["reward"], QuantConfig.from_dict(d["config"]), d["n_evaluated"])
    else:
        opt = enumerate_optimum(list(layers), oracle, target, acc_loss)
        try:
            root.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"reward": opt.reward, "config": opt.config.to_dict(),
                                        "n_evaluated": opt.n_evaluated}))
        except OSError:
            pass
    _memo[key] = opt
    return opt
