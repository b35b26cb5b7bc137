"""Proxy-guided architecture search with a small ground-truth query budget,
plus the baselines it is compared against."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .arch import ArchSpec, SearchSpace
from .bench import CountingOracle, TabularBench
from .evolution import ReaParams, rea_search
from .proxy import ProxyConfig, eproxy_evaluate, proxy_task
from .rng import Rng

NAS_PARAMS = ReaParams(cycles=500, population=40, sample=10)
CSV_COLUMNS = ("seed", "queries_used", "best_true_acc", "rank_of_best")


class ArchGenomeSpace:
    """Architecture genomes; mutation changes exactly one edge (``rate`` unused)."""

    def __init__(self, space: SearchSpace):
        self.space = space

    def random(self, rng: Rng) -> ArchSpec:
        return self.space.random(rng)

    def mutate(self, spec: ArchSpec, rng: Rng, rate: float) -> ArchSpec:
        return self.space.mutate(spec, rng, rate)


def true_rank(bench: TabularBench, acc: float) -> int:
    """1 + number of bench entries strictly more accurate."""
    return 1 + sum(1 for e in bench.entries.values() if e["acc"] > acc)


def top_fraction_rank(n: int, frac: float = 0.05) -> int:
    return max(1, math.ceil(round(n * frac, 9)))


@dataclass
class NasRun:
    seed: int
    params: ReaParams
    proxy_cfg: ProxyConfig
    query_budget: int
    history: list[tuple[str, float]]
    queried: list[tuple[str, float]]
    best_arch: str
    best_acc: float
    rank_of_best: int
    proxy_evals: int
    neighbor_budget: int = 0

    @property
    def queries_used(self) -> int:
        return len(self.queried)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "params": self.params.__dict__,
            "proxy_cfg": self.proxy_cfg.to_dict(),
            "query_budget": self.query_budget,
            "neighbor_budget": self.neighbor_budget,
            "proxy_evals": self.proxy_evals,
            "history": [{"arch": a, "score": _json_float(s)} for a, s in self.history],
            "queried": [{"arch": a, "acc": acc} for a, acc in self.queried],
            "best_arch": self.best_arch,
            "best_acc": self.best_acc,
            "rank_of_best": self.rank_of_best,
            "queries_used": self.queries_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def csv_row(self) -> dict:
        return {"seed": self.seed, "queries_used": self.queries_used,
                "best_true_acc": self.best_acc, "rank_of_best": self.rank_of_best}


def _json_float(x: float):
    # JSON has no infinity; diverged scores are written as null
    return x if math.isfinite(x) else None


def summary_csv(runs: Iterable[NasRun]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in runs:
        w.writerow(r.csv_row())
    return buf.getvalue()


def eproxy_scorer(cfg: ProxyConfig, space: SearchSpace, x=None) -> Callable[[ArchSpec], float]:
    xb, y = proxy_task(cfg, space, x)
    return lambda spec: eproxy_evaluate(spec, cfg, xb, y, space).adjusted_score


def nas_search(space: SearchSpace, proxy_cfg: ProxyConfig, bench: TabularBench, budget: int, rng: Rng,
               params: ReaParams = NAS_PARAMS, scorer: Callable[[ArchSpec], float] | None = None,
               oracle=None, neighbor_budget: int = 0, x=None, seed: int = 0) -> NasRun:
    """REA with the proxy as fitness, then spend ``budget`` ground-truth queries.

    The distinct architectures seen by the search are ranked by proxy score
    (ties by arch string) and the top ones are queried. With
    ``neighbor_budget > 0`` that many of the queries are held back and spent
    on unqueried one-edge neighbours of the best queried architecture, in
    proxy order.
    """
    if budget < 1:
        raise ValueError(f"query budget must be >= 1, got {budget}")
    if not 0 <= neighbor_budget < budget:
        raise ValueError("neighbor_budget must be in [0, budget)")
    scorer = scorer or eproxy_scorer(proxy_cfg, space, x)
    oracle = oracle or CountingOracle(bench)
    memo: dict[str, float] = {}

    def score(spec: ArchSpec) -> float:
        key = spec.encode()
        if key not in memo:
            memo[key] = float(scorer(spec))
        return memo[key]

    hist = rea_search(ArchGenomeSpace(space), lambda s: -score(s), params, rng)
    n_top = budget - neighbor_budget
    if n_top > len(memo):
        # the budget outgrew the search: proxy-score unvisited architectures too
        for spec in space.enumerate():
            if len(memo) >= n_top:
                break
            score(spec)
    seen = sorted(memo.items(), key=lambda kv: (kv[1], kv[0]))

    queried: dict[str, float] = {}
    for arch, _ in seen[:n_top]:
        queried[arch] = oracle.query(arch)["acc"]

    if neighbor_budget:
        best = max(queried, key=lambda a: (queried[a], _neg(a)))
        base = space.decode(best)
        neigh = []
        for e in range(space.num_edges):
            for op in space.ops:
                if op != base.cell.ops[e]:
                    ops = list(base.cell.ops)
                    ops[e] = op
                    cand = space.make(ops)
                    if cand.encode() not in queried:
                        neigh.append((score(cand), cand.encode()))
        for _, arch in sorted(neigh)[:neighbor_budget]:
            queried[arch] = oracle.query(arch)["acc"]

    best_arch = max(queried, key=lambda a: (queried[a], _neg(a)))
    history = [(g.encode(), -f) for g, f in zip(hist.genomes, hist.fitness)]
    return NasRun(seed, params, proxy_cfg, budget, history, list(queried.items()), best_arch,
                  queried[best_arch], true_rank(bench, queried[best_arch]), len(memo), neighbor_budget)


def _neg(arch: str):
    # max() helper: prefer the lexicographically smallest arch on accuracy ties
    return tuple(-ord(c) for c in arch)


def random_search_baseline(space: SearchSpace, bench: TabularBench, budget: int, rng: Rng) -> float:
    """Best true accuracy among ``budget`` distinct uniformly drawn architectures."""
    if budget < 1:
        raise ValueError(f"query budget must be >= 1, got {budget}")
    archs = sorted(bench.archs())
    picks = rng.sample_indices(len(archs), min(budget, len(archs)))
    return max(bench.accuracy(archs[i]) for i in picks)


class _BudgetExhausted(Exception):
    pass


def rea_direct_baseline(space: SearchSpace, bench: TabularBench, budget: int, rng: Rng,
                        params: ReaParams = ReaParams(cycles=100_000, population=10, sample=3)) -> float:
    """REA whose fitness is the true accuracy; each distinct architecture costs a query."""
    if budget < 1:
        raise ValueError(f"query budget must be >= 1, got {budget}")
    seen: dict[str, float] = {}
    budget = min(budget, len(bench.entries))

    def fitness(spec: ArchSpec) -> float:
        key = spec.encode()
        if key not in seen:
            if len(seen) >= budget:
                raise _BudgetExhausted
            seen[key] = bench.accuracy(key)
        return seen[key]

    try:
        rea_search(ArchGenomeSpace(space), fitness, params, rng)
    except _BudgetExhausted:
        pass
    return max(seen.values())


# --------------------------------------------------------------------------- queries to optimum


def random_order(bench: TabularBench) -> Callable[[Rng], list[str]]:
    archs = sorted(bench.archs())
    return lambda rng: [archs[i] for i in rng.permutation(len(archs))]


def proxy_order(scores: dict[str, float]) -> Callable[[Rng], list[str]]:
    """Ascending proxy score, ties by arch string; ignores the rng."""
    order = sorted(scores, key=lambda a: (scores[a], a))
    return lambda rng: list(order)


@dataclass
class QueryCount:
    queries: int
    capped: bool = field(default=False)


def queries_to_optimum(strategy: Callable[[Rng], Iterable[str]], bench: TabularBench, rng: Rng,
                       cap: int | None = None) -> QueryCount:
    """Queries until a globally optimal architecture is first queried."""
    best = max(e["acc"] for e in bench.entries.values())
    cap = cap if cap is not None else len(bench.entries)
    n = 0
    for arch in strategy(rng):
        if n >= cap:
            break
        n += 1
        if bench.accuracy(arch) == best:
            return QueryCount(n)
    return QueryCount(cap, True)
