"""Compare the compiled and numpy convolution kernels on desk-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from rtta import _kernels_py

try:
    from rtta import _ckernels
except ImportError:
    _ckernels = None

CASES = {
    # name -> (batch, channels, extent, kernel)
    "conv-layer-1": (64, 3, 8, 3),
    "conv-layer-2": (64, 8, 4, 3),
    "eval-batch": (256, 3, 8, 3),
}


def _bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def run(repeat=20):
    rng = np.random.default_rng(0)
    rows = []
    for name, (n, c, e, k) in CASES.items():
        xp = rng.normal(size=(n, c, e + k - 1, e + k - 1))
        cols = rng.normal(size=(n, e, e, c * k * k))
        for label, fn in (("im2col", lambda m: m.im2col(xp, k)),
                          ("col2im", lambda m: m.col2im(cols, c, k, e + k - 1, e + k - 1))):
            py = _bench(lambda: fn(_kernels_py), repeat)
            cy = _bench(lambda: fn(_ckernels), repeat) if _ckernels else float("nan")
            rows.append((f"{label}/{name}", py, cy))
    img = rng.uniform(size=(3, 12, 12))
    kern = np.exp(-0.5 * np.linspace(-2, 2, 5) ** 2)
    kern /= kern.sum()
    py = _bench(lambda: _kernels_py.blur_separable(img, kern), repeat * 10)
    cy = _bench(lambda: _ckernels.blur_separable(img, kern), repeat * 10) if _ckernels else float("nan")
    rows.append(("blur/8x8-k5", py, cy))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; showing numpy timings only")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, py, cy in run(args.repeat):
        print(f"{name:28s} {py:10.3f} {cy:10.3f} {py / cy:8.2f}x")


if __name__ == "__main__":
    main()
