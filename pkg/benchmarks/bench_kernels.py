"""Time the numba and numpy versions of each graph kernel on random graphs.

    python benchmarks/bench_kernels.py [--nodes 2000] [--degree 6] [--repeat 5]

Both versions are called directly, so the ``KGATTACK_DISABLE_NUMBA`` flag
does not matter here.  Outputs are compared before timing.
"""
import argparse
import time

import numpy as np

from kgattack import _accel, kernels


def random_graph(n, degree, seed=0):
    rng = np.random.default_rng(seed)
    m = n * degree // 2
    src = rng.integers(0, n, m)
    dst = rng.integers(0, n, m)
    return kernels.csr_from_edges(n, src, dst)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--degree", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if not _accel.NUMBA_AVAILABLE:
        print("numba is not installed; only numpy timings are meaningful")
    indptr, indices = random_graph(args.nodes, args.degree)
    n = args.nodes
    sources = np.arange(n, dtype=np.int64)
    rows = np.random.default_rng(1).integers(0, n, 20 * n)
    vals = np.random.default_rng(2).normal(size=(20 * n, 32))

    def scatter(impl):
        out = np.zeros((n, 32))
        impl(out, rows, vals)
        return out

    cases = {
        "bfs (all sources, depth 3)": (
            lambda: kernels._bfs_numba(indptr, indices, sources[:64], 3),
            lambda: kernels._bfs_numpy(indptr, indices, sources[:64], 3),
        ),
        "brandes (all sources)": (
            lambda: kernels._brandes_numba(indptr, indices, sources),
            lambda: kernels._brandes_numpy(indptr, indices, sources),
        ),
        "closeness": (
            lambda: kernels._closeness_numba(indptr, indices),
            lambda: kernels._closeness_numpy(indptr, indices),
        ),
        "pagerank": (
            lambda: kernels._pagerank_numba(indptr, indices, 0.85, 1e-10, 200)[0],
            lambda: kernels._pagerank_numpy(indptr, indices, 0.85, 1e-10, 200)[0],
        ),
        "scatter_add_rows": (
            lambda: scatter(kernels._scatter_add_rows_numba),
            lambda: scatter(kernels._scatter_add_rows_numpy),
        ),
    }

    print(f"graph: {n} nodes, {len(indices) // 2} edges; best of {args.repeat}")
    print(f"{'kernel':<28} {'numba s':>10} {'numpy s':>10} {'speedup':>8}")
    for name, (fast, slow) in cases.items():
        a, b = fast(), slow()  # also triggers compilation
        if not np.allclose(a, b, rtol=1e-9, atol=1e-9):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        tf = best_of(fast, args.repeat)
        ts = best_of(slow, args.repeat)
        print(f"{name:<28} {tf:>10.4f} {ts:>10.4f} {ts / tf:>7.1f}x")


if __name__ == "__main__":
    main()
