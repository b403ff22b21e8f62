#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback on the
volumetric hot loops: trilinear resampling at production scale and patch
gather/scatter at the canonical grid.

Run: python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from voxelbridge._kernels import engines


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5, help="best-of repeats")
    args = parser.parse_args()

    eng = engines()
    if "ext" not in eng:
        print("compiled core not built; benchmarking the fallback only")

    rng = np.random.default_rng(0)
    subject = rng.standard_normal((72, 96, 74)).astype(np.float32)
    canonical_dims = (83, 104, 81)
    canonical = rng.standard_normal((84, 112, 84)).astype(np.float32)  # padded
    grid = (6, 8, 6)
    retained = np.sort(rng.choice(288, size=120, replace=False)).astype(np.int64)
    rows = rng.standard_normal((120, 14**3)).astype(np.float32)

    cases = {
        "resize 72x96x74 -> 83x104x81": lambda k: k.resize_trilinear(subject, canonical_dims),
        "gather 120/288 patches r=14": lambda k: k.gather_patches(canonical, 14, grid, retained),
        "scatter 120/288 patches r=14": lambda k: k.scatter_patches(rows, 14, grid, retained),
    }

    width = max(len(c) for c in cases)
    header = f"{'case'.ljust(width)}  " + "".join(f"{name:>12}" for name in eng)
    if len(eng) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for case, fn in cases.items():
        times = {name: timeit(lambda k=kern: fn(k), args.repeats) for name, kern in eng.items()}
        row = f"{case.ljust(width)}  " + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in eng)
        if len(times) == 2:
            row += f"{times['py'] / times['ext']:>9.2f}x"
        print(row)

    # the two engines must agree bit-for-bit
    if len(eng) == 2:
        for case, fn in cases.items():
            a = fn(eng["py"]).tobytes()
            b = fn(eng["ext"]).tobytes()
            assert a == b, f"engines disagree on {case}"
        print("bit-identical outputs: yes")


if __name__ == "__main__":
    main()
