"""Benchmark the compiled kernels against the numpy reference backend.

Usage: python3 benchmarks/bench_kernels.py [--points N] [--repeats R]
"""

import argparse
import time

import numpy as np

from inrreg.kernels import _ref

try:
    from inrreg.kernels import _fast
except ImportError:
    _fast = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_trilinear(backend, n_points, repeats, dims=(48, 48, 48)):
    rng = np.random.default_rng(0)
    nx, ny, nz = dims
    data = np.ascontiguousarray(rng.uniform(0, 1, nx * ny * nz))
    pts = np.ascontiguousarray(
        rng.uniform(0, np.array(dims) - 1.0, (n_points, 3)))
    return timeit(lambda: backend.trilinear(data, nx, ny, nz, pts), repeats)


def bench_adam(backend, n_params, repeats):
    rng = np.random.default_rng(1)
    p = rng.normal(size=n_params)
    g = rng.normal(size=n_params)
    m = np.zeros(n_params)
    v = np.zeros(n_params)
    return timeit(
        lambda: backend.adam_update(p, g, m, v, 5, 1e-4, 0.9, 0.999, 1e-8),
        repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=200000)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    backends = [("numpy", _ref)]
    if _fast is not None:
        backends.append(("cython", _fast))
    else:
        print("compiled backend unavailable; benchmarking numpy only")

    rows = []
    for label, size, fn in [
        ("trilinear", args.points,
         lambda b: bench_trilinear(b, args.points, args.repeats)),
        ("adam_update", args.points,
         lambda b: bench_adam(b, args.points, args.repeats)),
    ]:
        times = {name: fn(mod) for name, mod in backends}
        rows.append((label, size, times))

    print(f"{'kernel':<14}{'n':>10}" + "".join(
        f"{name + ' (ms)':>16}" for name, _ in backends)
        + ("   speedup" if _fast is not None else ""))
    for label, size, times in rows:
        line = f"{label:<14}{size:>10}"
        for name, _ in backends:
            line += f"{times[name] * 1e3:>16.3f}"
        if _fast is not None:
            line += f"{times['numpy'] / times['cython']:>10.1f}x"
        print(line)


if __name__ == "__main__":
    main()
