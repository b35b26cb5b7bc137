"""Definitional (quadratic) rank-metric oracles used by ``eproxy selfcheck``."""

from __future__ import annotations

import math

from .metrics import kendall_tau, spearman_rho
from .rng import Rng

TOLERANCE = 1e-12


def oracle_ranks(x) -> list[float]:
    """Rank = 1 + #smaller + half the number of other equal values."""
    return [1 + sum(v < xi for v in x) + 0.5 * (sum(v == xi for v in x) - 1) for xi in x]


def oracle_pearson(a, b) -> float:
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def oracle_spearman(a, b) -> float:
    return oracle_pearson(oracle_ranks(a), oracle_ranks(b))


def oracle_kendall_b(a, b) -> float:
    n = len(a)
    conc = disc = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0 and db == 0:
                continue
            if da == 0:
                ties_a += 1
            elif db == 0:
                ties_b += 1
            elif (da > 0) == (db > 0):
                conc += 1
            else:
                disc += 1
    return (conc - disc) / math.sqrt((conc + disc + ties_a) * (conc + disc + ties_b))


def random_tied_pairs(seed: int, count: int = 1000):
    """Integer-valued vectors (so ties are common), never constant."""
    rng = Rng.from_key(seed, "metric-oracle")
    out = []
    while len(out) < count:
        n = 2 + rng.integers(39)
        levels = 2 + rng.integers(8)
        a = [float(v) for v in rng.integers(levels, size=n)]
        b = [float(v) for v in rng.integers(levels, size=n)]
        if len(set(a)) > 1 and len(set(b)) > 1:
            out.append((a, b))
    return out


def metric_oracle_checks(seed: int, count: int = 1000) -> dict:
    worst_rho = worst_tau = 0.0
    for a, b in random_tied_pairs(seed, count):
        worst_rho = max(worst_rho, abs(spearman_rho(a, b) - oracle_spearman(a, b)))
        worst_tau = max(worst_tau, abs(kendall_tau(a, b) - oracle_kendall_b(a, b)))
    worked = spearman_rho([1, 2, 3, 4], [1, 3, 2, 4])
    ok = worst_rho <= TOLERANCE and worst_tau <= TOLERANCE and worked == 0.8
    return {"pairs": count, "max_abs_err_spearman": worst_rho, "max_abs_err_kendall": worst_tau,
            "worked_example_rho": worked, "ok": bool(ok)}


