"""Time the numba and numpy kernel backends side by side.

    python benchmarks/bench_kernels.py --images 256 --size 64 --repeat 5

The active backend for library code is chosen at import time
(CFSTRESS_DISABLE_NUMBA=1 forces numpy); this script calls both directly.
"""

import argparse
import time

import numpy as np

from cfstress import _kernels as K
from cfstress.imaging import gaussian_kernel


def best_of(fn, repeat):
    fn()  # warm-up; triggers numba compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--images", type=int, default=256)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--pairs", type=int, default=2000, help="length of the Kendall input")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    stack = rng.random((args.images, args.size, args.size))
    w = gaussian_kernel(7, 1.5)
    x = rng.integers(0, 50, args.pairs).astype(float)
    y = x + rng.integers(0, 20, args.pairs)
    cases = {
        "convolve_rows (k=7)": lambda impl: impl.convolve_rows(stack, w),
        "smooth3x3_interior": lambda impl: impl.smooth3x3_interior(stack),
        f"pair_counts (n={args.pairs})": lambda impl: impl.pair_counts(x, y),
    }
    print(f"active backend: {K.BACKEND}")
    print(f"{'kernel':<28}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}")
    for name, call in cases.items():
        t_np = best_of(lambda: call(K.numpy_impl), args.repeat)
        t_nb = best_of(lambda: call(K.numba_impl), args.repeat)
        print(f"{name:<28}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
