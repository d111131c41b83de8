#!/usr/bin/env python3
"""Micro-benchmark of the compiled kernels against the numpy fallback.

Times the three hot kernels on sizes matching the default pipeline
(top-k scan over the passage index, per-batch late-interaction teacher
scoring, k-means assignment) and prints a per-backend table plus the
speedup of the compiled extension where available.

Usage: python benchmarks/bench_backends.py [--n-passages 100000] [--reps 30]
"""

import argparse
import time

import numpy as np

from tasdr._kernels import available_backends


def time_call(fn, reps):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - start) / reps * 1e3


def ragged(rng, count, length, dim):
    emb = np.ascontiguousarray(rng.standard_normal((count * length, dim)))
    offsets = np.arange(0, count * length + 1, length, dtype=np.int64)
    return emb, offsets


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-passages", type=int, default=100_000)
    parser.add_argument("--d-emb", type=int, default=64)
    parser.add_argument("--k", type=int, default=1000)
    parser.add_argument("--reps", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    matrix = np.ascontiguousarray(rng.standard_normal((args.n_passages, args.d_emb)))
    query = np.ascontiguousarray(rng.standard_normal(args.d_emb))
    centroids = np.ascontiguousarray(rng.standard_normal((16, args.d_emb)))
    # a training batch's teacher scoring: 32 queries x 64 passages
    q_emb, q_off = ragged(rng, 32, 15, 32)
    p_emb, p_off = ragged(rng, 64, 100, 32)

    backends = available_backends()
    results: dict[str, dict[str, float]] = {}
    for name, backend in sorted(backends.items()):
        results[name] = {
            "topk_dot": time_call(
                lambda b=backend: b.topk_dot(matrix, query, args.k), args.reps
            ),
            "late_interaction": time_call(
                lambda b=backend: b.late_interaction_scores(q_emb, q_off, p_emb, p_off),
                args.reps,
            ),
            "assign_nearest": time_call(
                lambda b=backend: b.assign_nearest(matrix, centroids), args.reps
            ),
        }

    kernels = ["topk_dot", "late_interaction", "assign_nearest"]
    print(f"{'kernel':<18}" + "".join(f"{name:>14}" for name in results))
    for kernel in kernels:
        row = f"{kernel:<18}"
        for name in results:
            row += f"{results[name][kernel]:>11.3f} ms"
        print(row)
    if "compiled" in results:
        print()
        for kernel in kernels:
            speedup = results["fallback"][kernel] / results["compiled"][kernel]
            print(f"compiled speedup on {kernel}: {speedup:.2f}x")


if __name__ == "__main__":
    main()
