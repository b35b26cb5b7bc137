"""Regularized (aging) evolution over any genome type."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Generic, Protocol, TypeVar

from .rng import Rng

G = TypeVar("G")


@dataclass(frozen=True)
class ReaParams:
    cycles: int = 200
    population: int = 40
    sample: int = 10
    mutation_rate: float = 0.2

    def __post_init__(self):
        if self.population < 1 or self.cycles < 0:
            raise ValueError("population must be >= 1 and cycles >= 0")
        if not 1 <= self.sample <= self.population:
            raise ValueError(f"sample must be in [1, population], got {self.sample}")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must be in [0, 1]")


class GenomeSpace(Protocol[G]):
    def random(self, rng: Rng) -> G: ...

    def mutate(self, genome: G, rng: Rng, rate: float) -> G: ...


@dataclass
class SearchHistory(Generic[G]):
    """Append-only record of every evaluated genome, in evaluation order."""

    genomes: list = field(default_factory=list)
    fitness: list = field(default_factory=list)
    population: deque = field(default_factory=deque)  # indices into the history

    def __len__(self) -> int:
        return len(self.genomes)

    def append(self, genome, fit: float) -> int:
        self.genomes.append(genome)
        self.fitness.append(fit)
        return len(self.genomes) - 1

    def best_index(self) -> int:
        """Highest fitness; earliest on ties."""
        if not self.genomes:
            raise ValueError("empty history")
        return max(range(len(self.fitness)), key=lambda i: (self.fitness[i], -i))

    def best(self) -> tuple[Any, float]:
        i = self.best_index()
        return self.genomes[i], self.fitness[i]


def _checked(fit) -> float:
    fit = float(fit)
    if math.isnan(fit) or fit == math.inf:
        raise ValueError(f"fitness must be finite or -inf, got {fit}")
    return fit


def rea_search(space: GenomeSpace, fitness_fn: Callable[[Any], float], params: ReaParams, rng: Rng,
               callback: Callable[[int, Any, float], None] | None = None) -> SearchHistory:
    """Seed ``population`` random genomes, then run ``cycles`` of tournament,
    mutation and eviction of the oldest member.

    ``callback(cycle, genome, fitness)`` sees every evaluation; cycle is -1
    for the initial population.
    """
    hist = SearchHistory()
    for _ in range(params.population):
        g = space.random(rng)
        f = _checked(fitness_fn(g))
        hist.population.append(hist.append(g, f))
        if callback:
            callback(-1, g, f)
    for cycle in range(params.cycles):
        members = list(hist.population)
        picks = sorted(members[j] for j in rng.sample_indices(len(members), params.sample))
        # sorted history indices, so max() keeps the earliest on ties
        parent = max(picks, key=lambda i: (hist.fitness[i], -i))
        child = space.mutate(hist.genomes[parent], rng, params.mutation_rate)
        f = _checked(fitness_fn(child))
        hist.population.append(hist.append(child, f))
        hist.population.popleft()
        if callback:
            callback(cycle, child, f)
    return hist


class BitGenome:
    """Fixed-length binary genome; handy for exercising the engine."""

    def __init__(self, length: int = 10):
        self.length = length

    def random(self, rng: Rng) -> tuple[int, ...]:
        return tuple(int(b) for b in rng.integers(2, size=self.length))

    def mutate(self, genome, rng: Rng, rate: float):
        flips = rng.random(size=self.length) < rate
        if not flips.any():
            flips[rng.integers(self.length)] = True
        return tuple(b ^ int(f) for b, f in zip(genome, flips))
