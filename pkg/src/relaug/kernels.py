"""Exact top-k cosine scan, the hot kernel of memory-bank retrieval.

Similarities come from one BLAS matmul; the top-k selection over each row is
the part with two interchangeable implementations: a numba @njit insertion
scan and a pure-numpy stable argsort.  Selection order:

  * RELAUG_DISABLE_NUMBA=1 in the environment forces the numpy path;
  * otherwise numba is used when importable, numpy when not.

Both return identical rankings: scores descending, ties broken by ascending
key index.  benchmarks/bench_retrieval.py compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("RELAUG_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


def topk_rows_numpy(sims: np.ndarray, k_eff: int):
    """Row-wise top-k via stable argsort (ties keep ascending column index)."""
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k_eff]
    scores = np.take_along_axis(sims, order, axis=1)
    return order.astype(np.int64), scores


@njit(cache=True)
def _topk_rows_scan(sims, k_eff, out_idx, out_score):
    b, m = sims.shape
    for qi in range(b):
        count = 0
        for mi in range(m):
            s = sims[qi, mi]
            if count < k_eff:
                # insert keeping scores descending; equal scores stay in
                # arrival (= ascending index) order
                pos = count
                while pos > 0 and out_score[qi, pos - 1] < s:
                    out_score[qi, pos] = out_score[qi, pos - 1]
                    out_idx[qi, pos] = out_idx[qi, pos - 1]
                    pos -= 1
                out_score[qi, pos] = s
                out_idx[qi, pos] = mi
                count += 1
            elif s > out_score[qi, k_eff - 1]:
                pos = k_eff - 1
                while pos > 0 and out_score[qi, pos - 1] < s:
                    out_score[qi, pos] = out_score[qi, pos - 1]
                    out_idx[qi, pos] = out_idx[qi, pos - 1]
                    pos -= 1
                out_score[qi, pos] = s
                out_idx[qi, pos] = mi


def topk_rows_numba(sims: np.ndarray, k_eff: int):
    """Row-wise top-k with the njit insertion scan; same contract as numpy."""
    b = sims.shape[0]
    out_idx = np.zeros((b, k_eff), dtype=np.int64)
    out_score = np.zeros((b, k_eff), dtype=np.float64)
    if k_eff:
        _topk_rows_scan(np.ascontiguousarray(sims), k_eff, out_idx, out_score)
    return out_idx, out_score


NUMBA_ENABLED = HAS_NUMBA and not _DISABLED

if NUMBA_ENABLED:
    BACKEND = "numba"
    topk_rows = topk_rows_numba
else:
    BACKEND = "numpy"
    topk_rows = topk_rows_numpy


def cosine_topk(unit_keys: np.ndarray, unit_queries: np.ndarray, k: int,
                unit_keys_t: np.ndarray = None):
    """Exact top-k cosine neighbors of each query row.

    unit_keys: (M, d) unit-normalized float64; unit_queries: (B, d) likewise.
    unit_keys_t may pass a precomputed contiguous transpose to skip the GEMM
    copy.  Returns (idx, scores), both (B, min(k, M)), scores descending with
    ties broken by ascending key index.
    """
    k_eff = min(int(k), unit_keys.shape[0])
    sims = unit_queries @ (unit_keys.T if unit_keys_t is None else unit_keys_t)
    return topk_rows(sims, k_eff)


def cosine_topk_numpy(unit_keys, unit_queries, k: int):
    k_eff = min(int(k), unit_keys.shape[0])
    return topk_rows_numpy(unit_queries @ unit_keys.T, k_eff)


def cosine_topk_numba(unit_keys, unit_queries, k: int):
    k_eff = min(int(k), unit_keys.shape[0])
    return topk_rows_numba(unit_queries @ unit_keys.T, k_eff)


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Rows normalized to unit L2 norm, in float64."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    return x / norms
