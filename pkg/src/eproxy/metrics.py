"""Rank-quality metrics. Both arguments follow the same convention: larger is
better. Callers negate proxy scores (lower-is-better) before passing them."""

from __future__ import annotations

import math

import numpy as np


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} vs {a.size}")
    if p.size < 2:
        raise ValueError("need at least two values")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a))):
        raise ValueError("values must be finite")
    return p, a


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def spearman_rho(pred, actual) -> float:
    p, a = _pair(pred, actual)
    if np.all(p == p[0]) or np.all(a == a[0]):
        raise ValueError("undefined correlation: constant vector")
    rp = average_ranks(p) - (p.size + 1) / 2.0
    ra = average_ranks(a) - (a.size + 1) / 2.0
    rho = float(rp @ ra / math.sqrt((rp @ rp) * (ra @ ra)))
    return max(-1.0, min(1.0, rho))


def kendall_tau(pred, actual) -> float:
    """Kendall tau-b (tie-corrected). Quadratic in n."""
    p, a = _pair(pred, actual)
    if np.all(p == p[0]) or np.all(a == a[0]):
        raise ValueError("undefined correlation: constant vector")
    iu = np.triu_indices(p.size, k=1)
    sp = np.sign(p[:, None] - p[None, :])[iu]
    sa = np.sign(a[:, None] - a[None, :])[iu]
    s = float(np.sum(sp * sa))
    n_p = float(np.count_nonzero(sp))
    n_a = float(np.count_nonzero(sa))
    return max(-1.0, min(1.0, s / math.sqrt(n_p * n_a)))


def _top_m(x: np.ndarray, m: int) -> set[int]:
    # descending value, ascending index on ties
    order = np.lexsort((np.arange(x.size), -x))
    return set(order[:m].tolist())


def topk_count(n: int, k_frac: float) -> int:
    # tolerate float noise such as 30 * 0.1 = 3.0000000000000004
    m = math.ceil(round(n * k_frac, 9))
    if m < 1:
        raise ValueError(f"n * k_frac must be >= 1 (n={n}, k_frac={k_frac})")
    return min(m, n)


def topk_retrieve_rate(pred, actual, k_frac: float = 0.10) -> float:
    """Fraction of the true top-m that the prediction's top-m recovers."""
    p, a = _pair(pred, actual)
    m = topk_count(p.size, k_frac)
    return len(_top_m(p, m) & _top_m(a, m)) / m
