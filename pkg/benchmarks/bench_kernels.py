"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time of each backend.
"""
import argparse
import time

import numpy as np

from prunefl import kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    m, k, n, nnz = 512, 512, 64, 512 * 512 // 50
    flat = np.sort(rng.choice(m * k, size=nnz, replace=False))
    r, c = np.divmod(flat, k)
    vals = rng.normal(size=nnz)
    dense = rng.normal(size=(k, n))
    yield "spmm_coo 512x512 d=2% x 64", lambda mod: mod.spmm_coo(r, c, vals, dense, m)

    size = 200_000
    gain = rng.exponential(size=size)
    cost = rng.uniform(0.5, 1.5, size=size)
    ratio = gain / cost
    order = np.argsort(-ratio)
    ro, go, co = ratio[order].copy(), gain[order].copy(), cost[order].copy()
    yield "greedy_prefix 200k", lambda mod: mod.greedy_prefix(ro, go, co, 0.0, 1.0)

    x = rng.normal(size=(32, 8, 28, 28))
    yield "im2col 32x8x28x28 k3", lambda mod: mod.im2col(x, 3, 1, 1)

    cols = rng.normal(size=(8 * 9, 32 * 28 * 28))
    yield "col2im 32x8x28x28 k3", lambda mod: mod.col2im(cols, 32, 8, 28, 28, 3, 1, 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = kernels.backends()
    if "cython" not in mods:
        print("compiled extension not available; only the fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} " + " ".join(f"{name:>10s}" for name in mods) + "   speedup")
    for name, fn in cases(rng):
        times = {b: best_of(lambda: fn(mod), args.repeat) for b, mod in mods.items()}
        cells = " ".join(f"{times[b] * 1e3:8.2f}ms" for b in mods)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:28s} {cells}   {speed:6.1f}x")


if __name__ == "__main__":
    main()
