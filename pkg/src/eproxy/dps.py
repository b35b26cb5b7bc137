"""Discrete Proxy Search: evolve ProxyConfig so that proxy scores on a small
anchor set rank the anchors like their ground-truth accuracies."""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .arch import TAPS, ArchSpec, SearchSpace
from .evolution import ReaParams, SearchHistory, rea_search
from .metrics import spearman_rho
from .proxy import ALPHA_GRID, CMID_GRID, KERNEL_GRID, LR_GRID, ProxyConfig, evaluate_many, proxy_task
from .rng import Rng
from .targets import COEFF_GRID, FEATURES, FeatureCombo
from .tensor import INIT_SCHEMES

# non-empty subsets of the target features, as (use_fcn, use_sine, use_dot)
FEATURE_SETS = tuple(s for s in itertools.product((True, False), repeat=3) if any(s))

GRIDS: dict[str, tuple] = {
    "transform_kernel": KERNEL_GRID,
    "barrier_kernel": KERNEL_GRID,
    "c_mid": CMID_GRID,
    "features": FEATURE_SETS,
    "coeff_fcn": COEFF_GRID,
    "coeff_sine": COEFF_GRID,
    "coeff_dot": COEFF_GRID,
    "lr": LR_GRID,
    "init": INIT_SCHEMES,
    "tap": TAPS,
    "alpha": ALPHA_GRID,
}


def space_size() -> int:
    """Number of distinct searchable configurations."""
    return math.prod(len(g) for g in GRIDS.values())


def genome_of(cfg: ProxyConfig) -> dict:
    c = cfg.combo
    return {
        "transform_kernel": cfg.transform_kernel,
        "barrier_kernel": cfg.barrier_kernel,
        "c_mid": cfg.c_mid,
        "features": (c.use_fcn, c.use_sine, c.use_dot),
        "coeff_fcn": c.coeff_fcn,
        "coeff_sine": c.coeff_sine,
        "coeff_dot": c.coeff_dot,
        "lr": cfg.lr,
        "init": cfg.init,
        "tap": cfg.tap,
        "alpha": cfg.alpha,
    }


def config_from_genome(genome: dict, base: ProxyConfig = ProxyConfig()) -> ProxyConfig:
    use = dict(zip(FEATURES, genome["features"]))
    combo = FeatureCombo(**{f"use_{n}": use[n] for n in FEATURES},
                         **{f"coeff_{n}": genome[f"coeff_{n}"] for n in FEATURES})
    return dataclasses.replace(
        base, transform_kernel=genome["transform_kernel"], barrier_kernel=genome["barrier_kernel"],
        c_mid=genome["c_mid"], combo=combo, lr=genome["lr"], init=genome["init"], tap=genome["tap"],
        alpha=genome["alpha"])


def proxy_config_random(rng: Rng, base: ProxyConfig = ProxyConfig()) -> ProxyConfig:
    """Uniform draw over every searchable grid; non-searchable fields come from ``base``."""
    return config_from_genome({k: rng.choice(g) for k, g in GRIDS.items()}, base)


def proxy_config_mutate(cfg: ProxyConfig, rng: Rng, rate: float = 0.2) -> ProxyConfig:
    """Re-roll each field to a different grid value with probability ``rate``;
    if nothing was picked, re-roll one uniformly chosen field."""
    genome = genome_of(cfg)
    names = list(GRIDS)
    picked = [n for n in names if rng.random() < rate]
    if not picked:
        picked = [rng.choice(names)]
    for n in picked:
        genome[n] = rng.choice([v for v in GRIDS[n] if v != genome[n]])
    return config_from_genome(genome, cfg)


class ProxyConfigSpace:
    """Genome-space adapter so the generic engine can evolve configs."""

    def __init__(self, base: ProxyConfig = ProxyConfig()):
        self.base = base

    def random(self, rng: Rng) -> ProxyConfig:
        return proxy_config_random(rng, self.base)

    def mutate(self, cfg: ProxyConfig, rng: Rng, rate: float) -> ProxyConfig:
        return proxy_config_mutate(cfg, rng, rate)


# --------------------------------------------------------------------------- anchors and fitness


@dataclass(frozen=True)
class AnchorSet:
    specs: tuple[ArchSpec, ...]
    metrics: tuple[float, ...]

    def __post_init__(self):
        if len(self.specs) != len(self.metrics):
            raise ValueError("specs and metrics differ in length")
        if len(self.specs) < 3:
            raise ValueError("need at least 3 anchors")
        if len({s.encode() for s in self.specs}) != len(self.specs):
            raise ValueError("anchor specs must be distinct")
        if not all(math.isfinite(m) for m in self.metrics):
            raise ValueError("anchor metrics must be finite")

    def __len__(self) -> int:
        return len(self.specs)

    @classmethod
    def from_bench(cls, bench, rng: Rng, size: int = 20) -> "AnchorSet":
        """``size`` distinct architectures drawn uniformly from a tabular bench."""
        archs = sorted(bench.archs())
        picks = sorted(rng.sample_indices(len(archs), size))
        space = bench.space
        specs = tuple(space.decode(archs[i]) for i in picks)
        return cls(specs, tuple(bench.accuracy(archs[i]) for i in picks))

    def held_out(self, bench) -> "AnchorSet":
        """Every bench architecture not used as an anchor."""
        used = {s.encode() for s in self.specs}
        rest = [a for a in sorted(bench.archs()) if a not in used]
        return AnchorSet(tuple(bench.space.decode(a) for a in rest), tuple(bench.accuracy(a) for a in rest))


Scorer = Callable[[ArchSpec, ProxyConfig], float]


def rank_fitness(scores, metrics) -> float:
    """Spearman rho between negated scores and metrics.

    Non-finite (diverged) scores tie for last place. All-diverged or constant
    scores give -1.
    """
    s = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(s)
    if not finite.any():
        return -1.0
    neg = np.where(finite, -s, np.min(-s[finite]) - 1.0)
    if np.all(neg == neg[0]):
        return -1.0
    return spearman_rho(neg, metrics)


def anchor_scores(cfg: ProxyConfig, anchors: AnchorSet, x=None, scorer: Scorer | None = None,
                  space: SearchSpace | None = None, jobs: int = 1) -> list[float]:
    if scorer is not None:
        return [float(scorer(s, cfg)) for s in anchors.specs]
    xb, y = proxy_task(cfg, space, x)
    return [r.adjusted_score for r in evaluate_many(anchors.specs, cfg, xb, y, space, jobs)]


def dps_fitness(cfg: ProxyConfig, anchors: AnchorSet, x=None, scorer: Scorer | None = None,
                space: SearchSpace | None = None, jobs: int = 1) -> float:
    if scorer is None and space is None:
        from .arch import MINI_SPACE
        space = MINI_SPACE
    return rank_fitness(anchor_scores(cfg, anchors, x, scorer, space, jobs), anchors.metrics)


def run_dps(anchors: AnchorSet, params: ReaParams, rng: Rng, x=None, scorer: Scorer | None = None,
            base: ProxyConfig = ProxyConfig(), space: SearchSpace | None = None, jobs: int = 1,
            callback=None) -> tuple[ProxyConfig, SearchHistory]:
    """Evolve proxy configs; return the fittest (earliest on ties) and the history.

    Repeated configs reuse their memoised fitness, which is deterministic.
    """
    memo: dict[str, float] = {}

    def fitness(cfg: ProxyConfig) -> float:
        key = cfg.to_json()
        if key not in memo:
            memo[key] = dps_fitness(cfg, anchors, x, scorer, space, jobs)
        return memo[key]

    hist = rea_search(ProxyConfigSpace(base), fitness, params, rng, callback)
    return hist.best()[0], hist


def history_lines(hist: SearchHistory, population: int) -> list[str]:
    """One JSON object per evaluation; initial-population entries carry cycle -1."""
    return [json.dumps({"cycle": i - population if i >= population else -1,
                        "config": g.to_dict(), "fitness": f}, sort_keys=True)
            for i, (g, f) in enumerate(zip(hist.genomes, hist.fitness))]


def write_history(hist: SearchHistory, population: int, path) -> None:
    Path(path).write_text("".join(line + "\n" for line in history_lines(hist, population)))


def read_history(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{lineno}: {e.msg}") from None
        rec["config"] = ProxyConfig.from_dict(rec["config"])
        out.append(rec)
    return out
