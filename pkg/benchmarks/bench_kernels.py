"""Compare the numba and numpy kernel backends.

Times each elementwise kernel at the shapes the toy model uses, then a full
training step under each backend (selected in a subprocess through the
DAPD_DISABLE_NUMBA flag, exactly as a user would).

    python benchmarks/bench_kernels.py [--dim 64] [--batch 128] [--repeat 50]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dapd import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from dapd._kernels import BACKEND
from dapd.toymdm import ModelConfig
from dapd.toymdm import model as M
from dapd.toymdm.data import gen_dataset
from dapd.toymdm.train import mdm_loss, sample_noise
cfg = ModelConfig(model_dim={dim}, num_heads=4)
rng = np.random.default_rng(0)
p = M.init_params(cfg, rng)
x0 = gen_dataset({batch}, 0)
t, mask = sample_noise({batch}, rng)
mdm_loss(p, cfg, x0, t=t, mask=mask, grad=True)
best = float("inf")
for _ in range({steps}):
    t0 = time.perf_counter()
    mdm_loss(p, cfg, x0, t=t, mask=mask, grad=True)
    best = min(best, time.perf_counter() - t0)
print(BACKEND, best * 1e3)
"""


def bench(fn, repeat):
    fn()  # warm-up / JIT
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e6


def kernel_table(dim, batch, repeat):
    rng = np.random.default_rng(0)
    rows = batch * 9
    x = rng.normal(size=(rows, dim)).astype(np.float32)
    g = np.ones(dim, np.float32)
    b = np.zeros(dim, np.float32)
    xh = rng.normal(size=(rows, 4 * dim)).astype(np.float32)
    att = rng.normal(size=(batch * 4 * 9, 9)).astype(np.float32)
    cases = {}
    for name, ks in (("numpy", K.numpy_kernels), ("numba", K.numba_kernels)):
        if ks is None:
            continue
        _, xhat, rstd = ks.layernorm_forward(x, g, b, 1e-5)
        _, th = ks.gelu_forward(xh)
        p = ks.softmax_forward(att)
        cases[name] = {
            "layernorm_forward": bench(lambda: ks.layernorm_forward(x, g, b, 1e-5), repeat),
            "layernorm_backward": bench(lambda: ks.layernorm_backward(x, xhat, rstd, g), repeat),
            "gelu_forward": bench(lambda: ks.gelu_forward(xh), repeat),
            "gelu_backward": bench(lambda: ks.gelu_backward(xh, th, xh), repeat),
            "softmax_forward": bench(lambda: ks.softmax_forward(att), repeat),
            "softmax_backward": bench(lambda: ks.softmax_backward(p, att), repeat),
        }
    return cases


def step_time(flag, dim, batch, steps):
    env = dict(os.environ, DAPD_DISABLE_NUMBA=flag)
    code = STEP_SNIPPET.format(dim=dim, batch=batch, steps=steps)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    backend, ms = out.stdout.split()
    return backend, float(ms)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()

    cases = kernel_table(args.dim, args.batch, args.repeat)
    print(f"kernel timings, best of {args.repeat} (microseconds)")
    print(f"{'kernel':<20}{'numpy':>10}{'numba':>10}{'speedup':>9}")
    for kernel in cases["numpy"]:
        a = cases["numpy"][kernel]
        bnum = cases.get("numba", {}).get(kernel, float("nan"))
        print(f"{kernel:<20}{a:>10.1f}{bnum:>10.1f}{a / bnum:>8.2f}x")

    print(f"\nfull training step (8 layers, dim {args.dim}, batch {args.batch}), best of {args.steps}")
    for flag in ("1", "0"):
        backend, ms = step_time(flag, args.dim, args.batch, args.steps)
        print(f"  {backend:<6} {ms:8.1f} ms")


if __name__ == "__main__":
    main()
