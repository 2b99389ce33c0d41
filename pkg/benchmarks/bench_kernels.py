"""Time the numba and pure-numpy kernel paths on denoiser-sized workloads.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import os
import time

import numpy as np

from tokenmark import numgrad as ng
from tokenmark.numgrad import _kernels as K


def _time(fn, repeat):
    fn()  # warm-up (numba compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads(rng):
    xp = rng.standard_normal((16, 48, 10, 10)).astype(np.float32)
    cols = K._im2col_numpy(xp, 3, 3, 1, 8, 8)
    img = rng.random((3, 32, 32)).astype(np.float32)
    ys, xs = np.meshgrid(np.linspace(-2, 33, 64), np.linspace(-2, 33, 64), indexing="ij")
    x = rng.standard_normal((16, 48, 8, 8)).astype(np.float32)
    w = rng.standard_normal((48, 48, 3, 3)).astype(np.float32)

    def conv_step():
        xt = ng.Tensor(x, requires_grad=True)
        wt = ng.Tensor(w, requires_grad=True)
        ng.conv2d(xt, wt, padding=1).sum().backward()

    return {
        "im2col 16x48x8x8 k3": lambda: K.im2col(xp, 3, 3, 1, 8, 8),
        "col2im 16x48x8x8 k3": lambda: K.col2im(cols, xp.shape, 3, 3, 1, 8, 8),
        "bilinear 3x32x32 -> 64x64": lambda: K.bilinear_sample(img, ys, xs),
        "conv2d fwd+bwd 48ch": conv_step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    jobs = workloads(rng)
    print(f"{'kernel':30s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fn in jobs.items():
        times = {}
        for flag in ("1", "0"):
            os.environ["TOKENMARK_NUMBA"] = flag
            times[flag] = _time(fn, args.repeat)
        print(f"{name:30s} {times['1'] * 1e3:10.3f} {times['0'] * 1e3:10.3f} {times['0'] / times['1']:8.2f}")
    os.environ.pop("TOKENMARK_NUMBA", None)


if __name__ == "__main__":
    main()
