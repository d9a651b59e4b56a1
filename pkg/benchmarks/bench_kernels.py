"""Numba vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5]

Times each kernel in-process on both backends, then one training epoch in
two subprocesses (GRIDFM_DISABLE_NUMBA=0 and =1), since the backend is
fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from gridfm import _kernels

EPOCH = """
import time
from gridfm import _kernels
from gridfm.ingest import load_case
from gridfm.powerflow import synthesize_samples
from gridfm.models import Model, ModelConfig
from gridfm.train import TrainSpec, fit
gs = list(synthesize_samples(load_case("case14"), 256, 0.1, seed=0))
m = Model(ModelConfig("pna", 64, 3))
fit(m, TrainSpec(epochs=1, datasets=(gs[:32],)))  # warm-up and JIT
t = time.perf_counter()
fit(m, TrainSpec(epochs=1, datasets=(gs,)))
print(_kernels.BACKEND, time.perf_counter() - t)
"""


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-epoch", action="store_true")
    a = ap.parse_args()
    if _kernels.numba_kernels is None:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    values = rng.standard_normal((200_000, 64))
    ids = rng.integers(0, 5_000, 200_000)
    blob = rng.integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    cases = [
        ("segment_sum 200k x 64", lambda k: k.segment_sum(values, ids, 5_000)),
        ("segment_argext 200k x 64", lambda k: k.segment_argext(values, ids, 5_000, True)),
        ("crc64 1 MiB", lambda k: k.crc64(blob)),
    ]
    print(f"{'kernel':<28}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for name, call in cases:
        r = a.repeat if "crc" not in name else 1
        tn = best_of(lambda: call(_kernels.numba_kernels), r)
        tp = best_of(lambda: call(_kernels.numpy_kernels), r)
        print(f"{name:<28}{tn:>12.4f}{tp:>12.4f}{tp / tn:>9.1f}x")

    if a.skip_epoch:
        return
    for flag in ("0", "1"):
        env = dict(os.environ, GRIDFM_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", EPOCH], env=env, capture_output=True, text=True, check=True).stdout.split()
        print(f"pna epoch, 256 case14 graphs, backend {out[0]:<6} {float(out[1]):.2f} s")


if __name__ == "__main__":
    main()
