#!/usr/bin/env python3
"""Numpy vs numba timings for the hot kernels, plus one end-to-end training step.

Usage:
    python3 benchmarks/bench_kernels.py [--repeat 20]

The end-to-end rows run a subprocess per backend because the backend is
chosen once at import time from POTLIFT_NUMBA.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from potlift._accel import numba_kernels, numpy_kernels
from potlift.model import default_skeleton

STEP_SNIPPET = """
import time, numpy as np
from potlift.data import SynthConfig, synth_generate, to_arrays
from potlift.model import ModelConfig, build_models
from potlift.training import TrainConfig, train_stage1
x, y = to_arrays(synth_generate(SynthConfig(count=64, seed=0))[0])
pot, _ = build_models(ModelConfig.desk(), 0)
cfg = TrainConfig(batch_size=32, max_steps_per_stage=2)
train_stage1(pot, x, y, cfg)  # warm-up / jit
t0 = time.perf_counter()
train_stage1(pot, x, y, TrainConfig(batch_size=32, max_steps_per_stage={steps}))
print((time.perf_counter() - t0) / {steps})
"""


def best_of(fn, repeat: int) -> float:
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng: np.random.Generator):
    # shapes seen in a batch-256, C=96, H=6, J=17 forward pass
    logits = rng.standard_normal((256 * 6 * 17, 17))
    feats = rng.standard_normal((256 * 17, 96))
    hidden = rng.standard_normal((256 * 17, 144))
    sk = default_skeleton(17)
    indptr, indices = sk.neighbors_csr()

    def softmax(k):
        return lambda: k.softmax_rows(logits)

    def softmax_bwd(k):
        y = numpy_kernels.softmax_rows(logits)
        return lambda: k.softmax_rows_backward(y, logits)

    def layernorm(k):
        return lambda: k.layernorm_rows(feats, 1e-5)

    def gelu(k):
        return lambda: k.gelu(hidden)

    def gelu_grad(k):
        return lambda: k.gelu_grad(hidden)

    def bfs(k):
        return lambda: k.bfs_all_pairs(sk.num_joints, indptr, indices)

    return [
        ("softmax_rows", softmax),
        ("softmax_rows_backward", softmax_bwd),
        ("layernorm_rows", layernorm),
        ("gelu", gelu),
        ("gelu_grad", gelu_grad),
        ("bfs_all_pairs", bfs),
    ]


def step_time(numba: bool, steps: int) -> float:
    env = dict(os.environ, POTLIFT_NUMBA="1" if numba else "0")
    out = subprocess.run(
        [sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env, capture_output=True, text=True, check=True
    )
    return float(out.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10, help="training steps for the end-to-end row")
    args = ap.parse_args()
    if numba_kernels is None:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'numpy (ms)':>11} {'numba (ms)':>11} {'speedup':>8}  max|diff|")
    print("-" * 70)
    for name, make in cases(rng):
        t_np = best_of(make(numpy_kernels), args.repeat)
        t_nb = best_of(make(numba_kernels), args.repeat)
        a, b = make(numpy_kernels)(), make(numba_kernels)()
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(np.asarray(u, float) - np.asarray(v, float)))) for u, v in zip(a, b))
        print(f"{name:<24} {t_np * 1e3:>11.3f} {t_nb * 1e3:>11.3f} {t_np / t_nb:>7.2f}x  {diff:.1e}")

    t_np = step_time(False, args.steps)
    t_nb = step_time(True, args.steps)
    print("-" * 70)
    print(f"{'desk train step':<24} {t_np * 1e3:>11.1f} {t_nb * 1e3:>11.1f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
