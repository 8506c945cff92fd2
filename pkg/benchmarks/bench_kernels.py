#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Both backends compute bitwise-identical results; this script reports the
speed ratio on representative workloads from dataset generation (z-buffer
scatter) and training (FPS, kNN, nearest-neighbor pairing).
"""

import argparse
import time

import numpy as np

from occlume._kernels import _numpy

try:
    from occlume._kernels import _core
except ImportError:
    _core = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads():
    rng = np.random.default_rng(0)
    big = rng.normal(size=(8192, 3))
    mid = rng.normal(size=(2048, 3))
    small = rng.normal(size=(256, 3))
    queries = rng.normal(size=(512, 3))
    cam = big + np.array([0.0, 0.0, 2.2])
    return [
        ("fps 8192->1024", lambda m: m.farthest_point_sample(big, 1024, 0)),
        ("fps 2048->256", lambda m: m.farthest_point_sample(mid, 256, 0)),
        ("knn 2048 q512 k24", lambda m: m.knn(mid, queries, 24)),
        ("knn 256 q128 k12", lambda m: m.knn(small, queries[:128], 12)),
        ("nn 2048x2048", lambda m: m.nearest_neighbor(mid, mid)),
        ("nn 256x8192", lambda m: m.nearest_neighbor(small, big)),
        ("zbuffer 8192 @256px", lambda m: m.zbuffer_scatter(
            cam, 280.0, 280.0, 128.0, 128.0, 256, 256)),
    ]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _core is None:
        print("compiled core unavailable; showing numpy fallback only")
    header = f"{'workload':22s} {'numpy':>10s} {'compiled':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, fn in workloads():
        t_np = timeit(lambda: fn(_numpy), args.repeats)
        if _core is not None:
            t_c = timeit(lambda: fn(_core), args.repeats)
            print(f"{name:22s} {t_np * 1e3:9.2f}ms {t_c * 1e3:9.2f}ms "
                  f"{t_np / t_c:7.1f}x")
        else:
            print(f"{name:22s} {t_np * 1e3:9.2f}ms {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
