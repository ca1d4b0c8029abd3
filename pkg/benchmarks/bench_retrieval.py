#!/usr/bin/env python3
"""Benchmark the numba and numpy retrieval kernels against each other.

Times the row-wise top-k selection (the hot inner loop of memory-bank
queries) and the per-row augmentation kernel at training-shaped sizes, and
verifies both backends return identical rankings on the way.

Run: python benchmarks/bench_retrieval.py
"""

import time

import numpy as np

from relaug import kernels
from relaug.augment import AugmentConfig, _augment_rows_numba, _augment_rows_numpy
from relaug.core import PropensityTable


def timeit(fn, repeats=50):
    fn()  # numba warmup / cache load
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1000.0


def bench_topk():
    rng = np.random.default_rng(0)
    print(f"{'bank M':>8} {'B':>5} {'k':>4} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for m, b, k in [(1_000, 64, 6), (5_000, 64, 6), (5_000, 1000, 21),
                    (20_000, 256, 11), (100_000, 64, 6)]:
        keys = kernels.unit_rows(rng.normal(size=(m, 64)))
        queries = kernels.unit_rows(rng.normal(size=(b, 64)))
        sims = queries @ keys.T
        i_np, s_np = kernels.topk_rows_numpy(sims, k)
        i_nb, s_nb = kernels.topk_rows_numba(sims, k)
        assert np.array_equal(i_np, i_nb), "backends disagree on ranking"
        t_np = timeit(lambda: kernels.topk_rows_numpy(sims, k))
        t_nb = timeit(lambda: kernels.topk_rows_numba(sims, k))
        print(f"{m:>8} {b:>5} {k:>4} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


def bench_augment_rows():
    rng = np.random.default_rng(1)
    cfg = AugmentConfig()
    prop = PropensityTable(rng.dirichlet(np.ones(24)))
    print(f"\n{'B':>5} {'k':>4} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for b, k in [(64, 5), (256, 5), (1024, 20)]:
        vals = rng.integers(0, 24, size=(b, k)).astype(np.int64)
        gt = rng.integers(0, 24, size=b).astype(np.int64)
        uni = rng.random(size=b)
        lam = rng.beta(2.0, 2.0, size=b)
        args = (vals, gt, prop.inverse, uni, lam, cfg, False, True)
        out_np = _augment_rows_numpy(*args)
        out_nb = _augment_rows_numba(*args)
        for a, c in zip(out_np, out_nb):
            assert np.array_equal(np.asarray(a), np.asarray(c)), "backends disagree"
        t_np = timeit(lambda: _augment_rows_numpy(*args))
        t_nb = timeit(lambda: _augment_rows_numba(*args))
        print(f"{b:>5} {k:>4} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"active backend: {kernels.BACKEND}\n")
    bench_topk()
    bench_augment_rows()
