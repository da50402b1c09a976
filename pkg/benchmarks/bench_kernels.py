"""Compare the numba and numpy paths of the crossbar kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times a full sliced MVM on a 256x256 crossbar with both paths, selected the
same way the package does it (CIMFORGE_DISABLE_JIT), each in a fresh interpreter.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cimforge import kernels

SLICED = """
import time, numpy as np
from cimforge.target import CimTarget
from cimforge.xbar import sliced_mvm
rng = np.random.default_rng(0)
w = rng.integers(-127, 128, (512, 300)); x = rng.integers(-127, 128, (64, 512))
t = CimTarget()
sliced_mvm(w, x[:2], 8, 8, t)
t0 = time.perf_counter()
for _ in range({repeat}):
    sliced_mvm(w, x, 8, 8, t)
print((time.perf_counter() - t0) / {repeat})
"""


def bench(fn, args, repeat):
    fn(*args)  # warm-up (triggers compilation)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    opts = ap.parse_args()
    rng = np.random.default_rng(0)
    g_pos = rng.integers(0, 16, (256, 256))
    g_neg = rng.integers(0, 16, (256, 256))
    planes = rng.integers(0, 2, (512, 256))
    values = rng.integers(0, 256, (512, 256))

    rows = []
    for name, np_fn, nb_fn, args in [
        ("mvm_batch 512x256x256", kernels.mvm_batch_numpy, kernels.mvm_batch_numba, (g_pos, g_neg, planes)),
        ("digit_planes 512x256 8 planes", kernels.digit_planes_numpy, kernels.digit_planes_numba, (values, 1, 8)),
    ]:
        assert np.array_equal(np_fn(*args), nb_fn(*args))
        t_np, t_nb = bench(np_fn, args, opts.repeat), bench(nb_fn, args, opts.repeat)
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})

    for label, flag in (("sliced_mvm end-to-end (numba)", "0"), ("sliced_mvm end-to-end (numpy)", "1")):
        env = dict(os.environ, CIMFORGE_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", SLICED.format(repeat=5)], env=env,
                             capture_output=True, text=True, check=True)
        rows.append({"kernel": label, "seconds": float(out.stdout.strip())})

    for r in rows:
        print(json.dumps(r))


if __name__ == "__main__":
    main()
