"""Genetic search over the SCL and LDAM loss weights."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import GAConfig

log = logging.getLogger(__name__)

FitnessFn = Callable[[float, float], float]


@dataclass
class Individual:
    alpha: float
    lambda_: float
    fitness: float | None = None

    def genes(self) -> tuple[float, float]:
        return (self.alpha, self.lambda_)


def quadratic_surrogate(optimum: tuple[float, float] = (3.0, 1.0)) -> FitnessFn:
    """Planted fitness ``-(alpha - a*)^2 - (lambda - l*)^2`` for checking the search itself."""
    a0, l0 = optimum

    def fitness(alpha: float, lambda_: float) -> float:
        return -((alpha - a0) ** 2) - (lambda_ - l0) ** 2

    return fitness


def initial_population(cfg: GAConfig, rng: np.random.Generator) -> list[Individual]:
    lo, hi = cfg.bounds
    genes = rng.uniform(lo, hi, size=(cfg.population_size, 2))
    return [Individual(float(a), float(l)) for a, l in genes]


def _tournament(pop: list[Individual], rng: np.random.Generator) -> Individual:
    i, j = rng.integers(len(pop), size=2)
    return pop[i] if pop[i].fitness >= pop[j].fitness else pop[j]


def evolve(population: list[Individual], cfg: GAConfig, rng: np.random.Generator) -> list[Individual]:
    """Next generation: elites verbatim, the rest bred by tournament, crossover and mutation.

    Elites keep their fitness so they are not re-evaluated; children start unset.
    """
    if any(ind.fitness is None for ind in population):
        raise ValueError("every individual needs a fitness before evolving")
    lo, hi = cfg.bounds
    ranked = sorted(population, key=lambda ind: ind.fitness, reverse=True)
    nxt = [Individual(ind.alpha, ind.lambda_, ind.fitness) for ind in ranked[: cfg.elitism_count]]
    while len(nxt) < cfg.population_size:
        p1 = _tournament(population, rng)
        p2 = _tournament(population, rng)
        g = np.array(p1.genes())
        if rng.random() < cfg.crossover_rate:
            take = rng.random(2) < 0.5
            g = np.where(take, p2.genes(), g)
        g = g + rng.normal(0.0, cfg.mutation_std, size=2) if cfg.mutation_std > 0 else g
        g = np.clip(g, lo, hi)
        nxt.append(Individual(float(g[0]), float(g[1])))
    return nxt


@dataclass
class SearchResult:
    ranked: list[Individual]
    best_per_generation: list[float]
    records: list[dict]

    @property
    def best(self) -> Individual:
        return self.ranked[0]

    def top(self, k: int = 10) -> list[Individual]:
        return self.ranked[:k]


def search(cfg: GAConfig, fitness_fn: FitnessFn, log_path: str | Path | None = None) -> SearchResult:
    """Run ``cfg.generations`` rounds of evolution after scoring an initial population.

    Every evaluation is logged (one JSON line each when ``log_path`` is set).
    The returned ranking covers every individual evaluated, best first.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    pop = initial_population(cfg, rng)
    records: list[dict] = []
    evaluated: list[Individual] = []
    best_per_gen: list[float] = []
    sink = open(log_path, "w") if log_path else None
    try:
        for gen in range(cfg.generations + 1):
            for ind in pop:
                if ind.fitness is not None:
                    continue
                ind.fitness = float(fitness_fn(ind.alpha, ind.lambda_))
                rec = {"generation": gen, "alpha": ind.alpha, "lambda": ind.lambda_, "fitness": ind.fitness}
                records.append(rec)
                evaluated.append(Individual(ind.alpha, ind.lambda_, ind.fitness))
                if sink:
                    sink.write(json.dumps(rec, sort_keys=True) + "\n")
            best_per_gen.append(max(ind.fitness for ind in pop))
            log.info("generation %d best fitness %.6f", gen, best_per_gen[-1])
            if gen < cfg.generations:
                pop = evolve(pop, cfg, rng)
    finally:
        if sink:
            sink.close()
    ranked = sorted(evaluated, key=lambda ind: ind.fitness, reverse=True)
    return SearchResult(ranked, best_per_gen, records)


def write_top_csv(result: SearchResult, path: str | Path, k: int = 10) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "alpha", "lambda", "fitness"])
        for i, ind in enumerate(result.top(k), 1):
            w.writerow([i, ind.alpha, ind.lambda_, ind.fitness])


def training_fitness(checkpoint: str | Path, data, eval_epochs: int, lr: float) -> FitnessFn:
    """Fitness = validation top-1 after fine-tuning the checkpoint with the given weights.

    Each call restores the checkpoint afresh, so evaluations are independent
    and repeatable; CESC and MV weights stay at their defaults.
    """
    from .losses import LossWeights
    from .trainer import fine_tune, load_checkpoint, restore_state

    ckpt = load_checkpoint(checkpoint)

    def fitness(alpha: float, lambda_: float) -> float:
        state = restore_state(ckpt, data.counts)
        return fine_tune(state, data, LossWeights(alpha, lambda_), eval_epochs, lr)

    return fitness
