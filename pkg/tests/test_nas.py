import json
import math

import numpy as np
import pytest

from eproxy.arch import MINI_SPACE
from eproxy.bench import CountingOracle
from eproxy.evolution import ReaParams
from eproxy.nas import (CSV_COLUMNS, NAS_PARAMS, nas_search, proxy_order, queries_to_optimum, random_order,
                        random_search_baseline, rea_direct_baseline, summary_csv, top_fraction_rank, true_rank)
from eproxy.proxy import ProxyConfig
from eproxy.rng import Rng

FAST = ReaParams(cycles=100, population=20, sample=5)


def perfect(bench):
    return lambda spec: -bench.accuracy(spec)


def noisy(bench, seed=0):
    return lambda spec: -bench.accuracy(spec) + 0.2 * Rng.from_key(seed, spec.encode()).random()


def optimum(bench):
    return max(e["acc"] for e in bench.entries.values())


def test_rank_helpers(bench):
    assert true_rank(bench, optimum(bench)) == 1
    assert true_rank(bench, 0.0) == 65
    assert top_fraction_rank(64) == 4 and top_fraction_rank(10) == 1


def test_exhaustive_budget_finds_optimum(bench):
    for seed in range(3):
        run = nas_search(MINI_SPACE, ProxyConfig(), bench, 64, Rng(seed), FAST, scorer=noisy(bench, seed))
        assert run.queries_used == 64 and run.best_acc == optimum(bench) and run.rank_of_best == 1
    assert random_search_baseline(MINI_SPACE, bench, 64, Rng(1)) == optimum(bench)


def test_perfect_proxy_needs_one_query(bench):
    oracle = CountingOracle(bench)
    run = nas_search(MINI_SPACE, ProxyConfig(), bench, 1, Rng(2), scorer=perfect(bench), oracle=oracle)
    assert run.best_acc == optimum(bench) and oracle.count == 1 == run.queries_used


def test_budget_validation(bench):
    with pytest.raises(ValueError):
        nas_search(MINI_SPACE, ProxyConfig(), bench, 0, Rng(0), scorer=perfect(bench))
    with pytest.raises(ValueError):
        nas_search(MINI_SPACE, ProxyConfig(), bench, 5, Rng(0), scorer=perfect(bench), neighbor_budget=5)
    with pytest.raises(ValueError):
        random_search_baseline(MINI_SPACE, bench, 0, Rng(0))


def test_query_accounting_with_neighbours(bench):
    for seed in range(5):
        oracle = CountingOracle(bench)
        run = nas_search(MINI_SPACE, ProxyConfig(), bench, 10, Rng(seed), FAST, scorer=noisy(bench, seed),
                         oracle=oracle, neighbor_budget=4)
        assert oracle.count == run.queries_used <= 10
        assert len({a for a, _ in run.queried}) == run.queries_used


def test_run_is_deterministic_and_serialises(bench):
    a = nas_search(MINI_SPACE, ProxyConfig(), bench, 5, Rng(3), FAST, scorer=noisy(bench), seed=3)
    b = nas_search(MINI_SPACE, ProxyConfig(), bench, 5, Rng(3), FAST, scorer=noisy(bench), seed=3)
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert len(d["history"]) == FAST.population + FAST.cycles
    assert d["queries_used"] == 5
    lines = summary_csv([a, b]).splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 3


def test_infinite_scores_serialise_as_null(bench):
    run = nas_search(MINI_SPACE, ProxyConfig(), bench, 2, Rng(4), FAST, scorer=lambda s: math.inf)
    assert all(h["score"] is None for h in json.loads(run.to_json())["history"])


def test_random_baseline_budget_one_matches_mean(bench):
    mean = np.mean([e["acc"] for e in bench.entries.values()])
    rng = Rng(5)
    est = np.mean([random_search_baseline(MINI_SPACE, bench, 1, rng) for _ in range(10_000)])
    assert abs(est - mean) <= 0.02


def test_random_baseline_is_monotone_in_budget(bench):
    rng = Rng(6)
    means = [np.mean([random_search_baseline(MINI_SPACE, bench, k, rng) for _ in range(1000)])
             for k in (1, 2, 5, 10, 20)]
    assert all(a <= b + 1e-3 for a, b in zip(means, means[1:]))


def test_rea_direct_baseline_respects_budget(bench):
    for seed in range(5):
        acc = rea_direct_baseline(MINI_SPACE, bench, 10, Rng(seed))
        assert acc in {e["acc"] for e in bench.entries.values()}
    assert rea_direct_baseline(MINI_SPACE, bench, 64, Rng(0)) == optimum(bench)


def test_queries_to_optimum(bench):
    scores = {a: -bench.accuracy(a) for a in bench.archs()}
    assert queries_to_optimum(proxy_order(scores), bench, Rng(0)).queries == 1
    rng = Rng(7)
    counts = [queries_to_optimum(random_order(bench), bench, rng).queries for _ in range(10_000)]
    assert abs(np.mean(counts) - 32.5) < 0.6
    worst = {a: bench.accuracy(a) for a in bench.archs()}
    capped = queries_to_optimum(proxy_order(worst), bench, Rng(0), cap=10)
    assert capped.capped and capped.queries == 10


@pytest.mark.slow
def test_perfect_proxy_dominates_random_search(bench):
    for budget in (1, 4, 16):
        nas = np.mean([nas_search(MINI_SPACE, ProxyConfig(), bench, budget, Rng.from_key(s, "nas"), FAST,
                                  scorer=perfect(bench)).best_acc for s in range(1000)])
        rng = Rng.from_key(budget, "baseline")
        base = np.mean([random_search_baseline(MINI_SPACE, bench, budget, rng) for _ in range(1000)])
        assert nas > base
