"""Compiled vs pure-numpy kernels: per-op timings and one full training step each.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dcdm import _pykernels as py

try:
    from dcdm import _ckernels as cy
except ImportError:
    cy = None

STEP_SNIPPET = """
import time, numpy as np
from dcdm import kernels
from dcdm.config import ModelConfig
from dcdm.corpus import synthetic_text
from dcdm.model import Denoiser
from dcdm.trainer import OptimizerState, train_step
cfg = ModelConfig(batch_size=8).validate()
corpus = np.frombuffer(synthetic_text(50_000).encode(), dtype=np.uint8).copy()
model = Denoiser(cfg, seed=0)
opt = OptimizerState.fresh(model.params)
train_step(model, opt, corpus, 0, 1)
t0 = time.perf_counter()
for s in range(2, {steps} + 2):
    train_step(model, opt, corpus, 0, s)
print(kernels.BACKEND, (time.perf_counter() - t0) / {steps})
"""


def op_cases(rng):
    B, H, L = 16, 4, 256
    scores = rng.normal(size=(B, H, L, L))
    allow = rng.random((B, L, L)) < 0.6
    probs = py.masked_softmax(scores, allow)
    grad = rng.normal(size=probs.shape)
    c = np.sort(rng.integers(1, 9, size=(B, 128)), axis=1)
    nu = (rng.random((B, 128)) < 0.5).astype(np.uint8)
    return {
        "masked_softmax": lambda k: k.masked_softmax(scores, allow),
        "masked_softmax_grad": lambda k: k.masked_softmax_grad(probs, grad),
        "training_masks": lambda k: k.training_masks(c, nu),
        "noise_masks": lambda k: k.noise_masks(nu),
    }


def time_op(fn, impl, repeat):
    return min(timeit.repeat(lambda: fn(impl), number=1, repeat=repeat))


def time_step(backend, steps):
    env = dict(os.environ, DCDM_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    name, seconds = out.stdout.split()
    return name, float(seconds)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--steps", type=int, default=3)
    args = parser.parse_args(argv)
    if cy is None:
        print("compiled kernels are not built; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'op':<22}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name, fn in op_cases(rng).items():
        tc, tp = time_op(fn, cy, args.repeat), time_op(fn, py, args.repeat)
        print(f"{name:<22}{tc * 1e3:>12.2f}{tp * 1e3:>12.2f}{tp / tc:>10.2f}")
    print()
    results = dict(time_step(b, args.steps) for b in ("cython", "python"))
    for name, seconds in results.items():
        print(f"train step ({name}): {seconds:.3f} s")
    print(f"train step speedup: {results['python'] / results['cython']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
