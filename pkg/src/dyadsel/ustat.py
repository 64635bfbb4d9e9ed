"""Dyadic U-statistic building blocks shared by the variance estimators.

Per-row score contributions are first collapsed onto unordered dyads
{i, j}.  The node-overlap term averages S_ij S_ik' over all triples of
distinct nodes; the fast path gets the same sum from per-node aggregates
U_m = sum_j S_mj and Q_m = sum_j S_mj S_mj'.
"""

from __future__ import annotations

from itertools import combinations
from math import comb

import numpy as np


def outer_sum(a: np.ndarray, b: np.ndarray, wts: np.ndarray | None = None) -> np.ndarray:
    """sum_r wts_r a_r b_r' with numpy pairwise summation (no threaded BLAS)."""
    if wts is not None:
        a = a * wts[:, None]
    return (a[:, :, None] * b[:, None, :]).sum(axis=0)


def aggregate_by_dyad(i, j, contrib, n: int):
    """Sum row contributions over each unordered dyad.

    Returns ``(pi, pj, A)`` with pi < pj and A of shape (n_pairs, q).
    """
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    contrib = np.asarray(contrib, dtype=float).reshape(i.size, -1)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    keys, inv = np.unique(lo * n + hi, return_inverse=True)
    q = contrib.shape[1]
    A = np.empty((keys.size, q))
    for c in range(q):
        A[:, c] = np.bincount(inv, weights=contrib[:, c], minlength=keys.size)
    return keys // n, keys % n, A


def overlap_fast(pi, pj, S, n: int) -> np.ndarray:
    """C(n,3)^-1 sum_{i<j<k} (S_ij S_ik' + S_ij S_jk' + S_ik S_jk')/3, symmetrised, in O(n^2)."""
    if n < 3:
        raise ValueError("node-overlap variance needs at least three nodes")
    S = np.asarray(S, dtype=float)
    q = S.shape[1]
    U = np.zeros((n, q))
    for c in range(q):
        U[:, c] = np.bincount(pi, weights=S[:, c], minlength=n) + np.bincount(
            pj, weights=S[:, c], minlength=n
        )
    # sum_m (U_m U_m' - Q_m) counts every node-sharing pair of dyads in both orders
    total = outer_sum(U, U) - 2.0 * outer_sum(S, S)
    out = total / (6.0 * comb(n, 3))
    return 0.5 * (out + out.T)


def overlap_bruteforce(pi, pj, S, n: int) -> np.ndarray:
    """Literal O(n^3) triple sum (oracle for :func:`overlap_fast`)."""
    if n < 3:
        raise ValueError("node-overlap variance needs at least three nodes")
    S = np.asarray(S, dtype=float)
    q = S.shape[1]
    dense = np.zeros((n, n, q))
    dense[pi, pj] = S
    dense[pj, pi] = S
    tri = np.array(list(combinations(range(n), 3)), dtype=np.int64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    s_ab, s_ac, s_bc = dense[a, b], dense[a, c], dense[b, c]
    total = outer_sum(s_ab, s_ac) + outer_sum(s_ab, s_bc) + outer_sum(s_ac, s_bc)
    out = total / (3.0 * comb(n, 3))
    return 0.5 * (out + out.T)


def dyadic_variance(s_ww, sigma1, sigma2, n: int, n_dyads: int, h: float) -> np.ndarray:
    """S^-1 [ (n-2)/(n(n-1)) sigma1 + sigma2/(N h) ] S^-1, symmetrised."""
    inv = np.linalg.inv(s_ww)
    middle = (n - 2) / (n * (n - 1)) * sigma1 + sigma2 / (n_dyads * h)
    out = inv @ middle @ inv
    return 0.5 * (out + out.T)
