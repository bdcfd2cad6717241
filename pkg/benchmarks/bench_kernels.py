"""Benchmark the numba kernel lane against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--pixels N] [--repeats R]

Times the colour kernels (CIEDE2000 values and squared-distance gradient,
sRGB->Lab with jacobian) and the conv/pool kernels backing the toy detector,
one row per kernel with the numpy/numba ratio. The ``auto`` backend picks the
faster lane per family based on exactly these numbers.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from camopatch._kernels import numpy_impl

try:
    from camopatch._kernels import numba_impl
except ImportError:
    numba_impl = None


def timeit(fn, repeats):
    fn()  # warm-up / JIT compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pixels", type=int, default=4096)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n = args.pixels
    rgb = rng.uniform(0, 255, size=(n, 3))
    lab1 = numpy_impl.srgb_to_lab(rgb)
    lab2 = numpy_impl.srgb_to_lab(rng.uniform(0, 255, size=(n, 3)))

    x = rng.normal(size=(8, 16, 64, 64))
    w = rng.normal(size=(32, 16, 3, 3))
    b = rng.normal(size=32)
    y = numpy_impl.conv2d(x, w, b, 1)
    dy = rng.normal(size=y.shape)
    pooled, idx = numpy_impl.maxpool2(x)
    dpool = rng.normal(size=pooled.shape)

    cases = [
        ("srgb_to_lab", lambda impl: impl.srgb_to_lab(rgb)),
        ("srgb_to_lab_jacobian", lambda impl: impl.srgb_to_lab_jacobian(rgb)),
        ("ciede2000", lambda impl: impl.ciede2000(lab1, lab2)),
        ("ciede2000_sq_grad", lambda impl: impl.ciede2000_sq_grad(lab1, lab2)),
        ("conv2d fwd 8x16x64x64", lambda impl: impl.conv2d(x, w, b, 1)),
        ("conv2d input grad", lambda impl: impl.conv2d_input_grad(dy, w, 1, 64, 64)),
        ("conv2d weight grad", lambda impl: impl.conv2d_weight_grad(dy, x, 3, 1)),
        ("maxpool2 fwd", lambda impl: impl.maxpool2(x)),
        ("maxpool2 grad", lambda impl: impl.maxpool2_grad(dpool, idx, 64, 64)),
    ]

    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'numpy/numba':>13}")
    for name, fn in cases:
        t_np = timeit(lambda: fn(numpy_impl), args.repeats) * 1e3
        if numba_impl is None:
            print(f"{name:<24}{t_np:>10.3f}{'n/a':>10}{'n/a':>13}")
            continue
        t_nb = timeit(lambda: fn(numba_impl), args.repeats) * 1e3
        print(f"{name:<24}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>13.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
