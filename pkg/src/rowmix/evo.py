"""Hardware-constrained evolution search over subnet configurations."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .hw import (CostTable, FpsEstimate, HardwareProfile, check_constraints, estimate_layers,
                 expand_layers, select_compute_strategy)
from .space import ModelGeometry, SearchSpace, SubnetConfig, sample_subnet

log = logging.getLogger(__name__)

INIT_BUDGET = 100_000


class ConstraintTooTight(RuntimeError):
    pass


@dataclass(frozen=True)
class EvoParams:
    population_size: int = 50
    generations: int = 20
    top_k: int = 10
    p_d: float = 0.2
    p_m: float = 0.4
    target_fps: float = 0.0
    seed: int = 0
    child_budget: int = 10_000  # attempts per generation before giving up on a full refill

    def __post_init__(self):
        if not (0.0 <= self.p_d <= 1.0 and 0.0 <= self.p_m <= 1.0):
            raise ValueError("mutation probabilities must lie in [0, 1]")
        if not 1 <= self.top_k <= self.population_size:
            raise ValueError("top_k must be in [1, population_size]")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")


@dataclass
class Candidate:
    config: SubnetConfig
    fitness: float | None
    fps: float
    feasible: bool

    def sort_key(self):
        return (-(self.fitness if self.fitness is not None else -np.inf), self.config.key())


class HwConstraint:
    """FPS and resource feasibility, memoised per config."""

    def __init__(self, profile: HardwareProfile, costs: CostTable, target_fps: float,
                 geo: ModelGeometry | None = None, tiles=None, mode: str = "W4A6", rule: str = "verbatim"):
        self.profile, self.costs, self.target_fps = profile, costs, float(target_fps)
        self.geo = geo or ModelGeometry()
        self.tiles = tiles
        self.plan = select_compute_strategy(profile, costs, mode, rule)
        self.resources_ok = all(check_constraints(self.plan, profile, costs))
        self._cache: dict[tuple, FpsEstimate] = {}

    def estimate(self, config: SubnetConfig) -> FpsEstimate:
        est = self._cache.get(config.key())
        if est is None:
            est = estimate_layers(expand_layers(config, self.geo), self.profile, self.plan, self.tiles)
            self._cache[config.key()] = est
        return est

    def check(self, config: SubnetConfig) -> tuple[float, bool]:
        fps = self.estimate(config).fps
        return fps, bool(self.resources_ok and fps >= self.target_fps)


FitnessFn = Callable[[SubnetConfig], float]
FeasibilityFn = Callable[[SubnetConfig], tuple[float, bool]]


def _always_feasible(config: SubnetConfig) -> tuple[float, bool]:
    return float("inf"), True


class _Evaluator:
    def __init__(self, fitness: FitnessFn, jobs: int = 1):
        self.fitness = fitness
        self.jobs = max(1, int(jobs))
        self.cache: dict[tuple, float] = {}
        self.calls = 0

    def __call__(self, configs: list[SubnetConfig]) -> list[float]:
        todo = []
        for c in configs:
            if c.key() not in self.cache and c.key() not in {t.key() for t in todo}:
                todo.append(c)
        if todo:
            if self.jobs > 1 and len(todo) > 1:
                with ThreadPoolExecutor(self.jobs) as pool:
                    vals = list(pool.map(self.fitness, todo))
            else:
                vals = [self.fitness(c) for c in todo]
            self.calls += len(todo)
            for c, v in zip(todo, vals):
                self.cache[c.key()] = float(v)
        return [self.cache[c.key()] for c in configs]


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def init_population(space: SearchSpace, params: EvoParams, fitness: FitnessFn,
                    feasible: FeasibilityFn = _always_feasible, rng: np.random.Generator | None = None,
                    evaluator: _Evaluator | None = None, budget: int = INIT_BUDGET) -> list[Candidate]:
    """Rejection-sample ``population_size`` feasible configs (duplicates allowed)."""
    rng = rng or np.random.default_rng(params.seed)
    evaluator = evaluator or _Evaluator(fitness)
    accepted: list[tuple[SubnetConfig, float]] = []
    for _ in range(budget):
        c = sample_subnet(space, rng)
        fps, ok = feasible(c)
        if ok:
            accepted.append((c, fps))
            if len(accepted) == params.population_size:
                break
    else:
        raise ConstraintTooTight(
            f"constraint too tight: {len(accepted)} of {params.population_size} feasible configs "
            f"in {budget} samples (target {params.target_fps} FPS)")
    fits = evaluator([c for c, _ in accepted])
    return [Candidate(c, f, fps, True) for (c, fps), f in zip(accepted, fits)]


def crossover(p1: Candidate | SubnetConfig, p2: Candidate | SubnetConfig, rng: np.random.Generator) -> SubnetConfig:
    a = p1.config if isinstance(p1, Candidate) else p1
    b = p2.config if isinstance(p2, Candidate) else p2
    depth = a.depth if rng.random() < 0.5 else b.depth
    embed = a.embed_dim if rng.random() < 0.5 else b.embed_dim
    genes = []
    for i in range(depth):
        have = [p for p in (a, b) if i < p.depth]
        src = have[0] if len(have) == 1 else (a if rng.random() < 0.5 else b)
        genes.append(src.layer_genes(i))
    h, e, r = zip(*genes)
    return SubnetConfig(embed, depth, h, e, r)


def mutate(c: Candidate | SubnetConfig, space: SearchSpace, params: EvoParams,
           rng: np.random.Generator) -> SubnetConfig:
    """Depth first (prob p_d), then each layer and the embedding width (prob p_m each)."""
    cfg = c.config if isinstance(c, Candidate) else c
    choices = space.layer_choices()
    genes = [cfg.layer_genes(i) for i in range(cfg.depth)]
    depth = cfg.depth
    if rng.random() < params.p_d:
        depth = _pick(rng, space.depths)
        while len(genes) < depth:
            genes.append(_pick(rng, choices))
        genes = genes[:depth]
    for i in range(depth):
        if rng.random() < params.p_m:
            genes[i] = _pick(rng, choices)
    embed = cfg.embed_dim
    if rng.random() < params.p_m:
        embed = _pick(rng, space.embed_dims)
    h, e, r = zip(*genes)
    return SubnetConfig(embed, depth, h, e, r)


@dataclass
class SearchResult:
    population: list[Candidate]
    best_per_generation: list[float] = field(default_factory=list)
    evaluations: int = 0
    rejected_infeasible: int = 0

    @property
    def best(self) -> Candidate:
        return self.population[0]


def evolve(space: SearchSpace, params: EvoParams, fitness: FitnessFn,
           feasible: FeasibilityFn = _always_feasible, jobs: int = 1) -> SearchResult:
    """Elitist evolution: top_k survive unchanged, the rest is refilled by
    alternating crossover and mutation of parents from the top_k pool.
    Infeasible children are dropped before their fitness is computed."""
    rng = np.random.default_rng(params.seed)
    evaluator = _Evaluator(fitness, jobs)
    pop = sorted(init_population(space, params, fitness, feasible, rng, evaluator), key=Candidate.sort_key)
    result = SearchResult(pop, [pop[0].fitness])
    for gen in range(params.generations):
        parents = pop[:params.top_k]
        seen = {p.config.key() for p in parents}
        children: list[tuple[SubnetConfig, float]] = []
        need = params.population_size - params.top_k
        attempts = 0
        while len(children) < need and attempts < params.child_budget:
            attempts += 1
            if attempts % 2:
                p1, p2 = _pick(rng, parents), _pick(rng, parents)
                child = crossover(p1, p2, rng)
            else:
                child = mutate(_pick(rng, parents), space, params, rng)
            if child.key() in seen:
                continue
            seen.add(child.key())
            fps, ok = feasible(child)
            if not ok:
                result.rejected_infeasible += 1
                continue
            children.append((child, fps))
        if len(children) < need:
            log.debug("generation %d: only %d new children after %d attempts", gen, len(children), attempts)
        fits = evaluator([c for c, _ in children])
        pop = sorted(parents + [Candidate(c, f, fps, True) for (c, fps), f in zip(children, fits)],
                     key=Candidate.sort_key)
        result.best_per_generation.append(pop[0].fitness)
        log.info("generation %d best fitness %.4f", gen + 1, pop[0].fitness)
    result.population = pop
    result.evaluations = evaluator.calls
    return result
