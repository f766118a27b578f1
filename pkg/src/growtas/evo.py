"""Constrained evolutionary search over the full space.

One generation evaluates the population, keeps the top ``parent_count`` as
parents, and builds the next population from ``population_size // 2``
mutants plus crossovers for the rest. Children that fail the parameter
constraint are redrawn (at most ``retries`` times per slot); children that
were already evaluated are discarded and the slot is refilled by uniform
feasible sampling. Parents do not carry over; the best record ever seen is
tracked separately.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .rng import SeededRng
from .space import Architecture, SearchSpace, param_count, sample_uniform
from .supernet import evaluate

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("generation", "arch", "accuracy", "loss", "params")


@dataclass
class EvoConfig:
    population_size: int = 50
    generations: int = 20
    parent_count: int = 10
    mutation_prob: float = 0.2
    constraint: int | None = None
    seed: int = 0
    retries: int = 100

    def __post_init__(self):
        if self.population_size < 1 or self.generations < 1:
            raise ConfigurationError("population_size and generations must be >= 1")
        if not 1 <= self.parent_count <= self.population_size:
            raise ConfigurationError("parent_count must lie in [1, population_size]")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigurationError("mutation_prob must lie in [0, 1]")


@dataclass(frozen=True)
class EvalRecord:
    arch: Architecture
    accuracy: float
    loss: float
    params: int
    generation: int

    def rank_key(self):
        """Sort key: accuracy desc, then loss asc, then params asc."""
        return (-self.accuracy, self.loss, self.params, self.arch.encode())


@dataclass
class SearchResult:
    best: EvalRecord
    history: list = field(default_factory=list)  # (generation, EvalRecord) per population member
    best_per_generation: list = field(default_factory=list)
    evaluations: int = 0

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for gen, rec in self.history:
            w.writerow((gen, rec.arch.encode(), repr(rec.accuracy), repr(rec.loss), rec.params))
        return buf.getvalue()


def mutate(parent: Architecture, space: SearchSpace, mutation_prob: float, rng: SeededRng) -> Architecture:
    """Resample each attribute from its grid with probability ``mutation_prob``.

    Order of draws: embed dim, depth, then (ratio, heads) for every block of
    the new depth. Blocks gained by a depth increase are sampled uniformly;
    a depth decrease truncates.
    """
    e = rng.choice(space.embed_dim.values) if rng.uniform() < mutation_prob else parent.embed_dim
    d = rng.choice(space.depth.values) if rng.uniform() < mutation_prob else parent.depth
    rs, hs = [], []
    for i in range(d):
        if i < parent.depth:
            rs.append(rng.choice(space.mlp_ratio.values) if rng.uniform() < mutation_prob else parent.mlp_ratios[i])
            hs.append(rng.choice(space.head_num.values) if rng.uniform() < mutation_prob else parent.head_nums[i])
        else:
            rs.append(rng.choice(space.mlp_ratio.values))
            hs.append(rng.choice(space.head_num.values))
    return Architecture(e, d, tuple(rs), tuple(hs))


def crossover(a: Architecture, b: Architecture, rng: SeededRng) -> Architecture:
    """Child takes embed dim, depth and each block attribute from a fair coin.

    Positions past the shallower parent's depth come from the deeper parent.
    """
    e = a.embed_dim if rng.uniform() < 0.5 else b.embed_dim
    d = a.depth if rng.uniform() < 0.5 else b.depth
    deeper = a if a.depth >= b.depth else b
    shared = min(a.depth, b.depth)
    rs, hs = [], []
    for i in range(d):
        if i < shared:
            rs.append(a.mlp_ratios[i] if rng.uniform() < 0.5 else b.mlp_ratios[i])
            hs.append(a.head_nums[i] if rng.uniform() < 0.5 else b.head_nums[i])
        else:
            rs.append(deeper.mlp_ratios[i])
            hs.append(deeper.head_nums[i])
    return Architecture(e, d, tuple(rs), tuple(hs))


def search(space: SearchSpace, evaluator, config: EvoConfig) -> SearchResult:
    """Evolutionary search; ``evaluator(arch) -> (accuracy, loss)`` must be deterministic."""
    limit = config.constraint
    if limit is not None and param_count(space.min_arch, space) > limit:
        raise ConfigurationError(f"constraint {limit} is below the smallest architecture "
                                 f"({param_count(space.min_arch, space)} params)")
    rng = SeededRng(config.seed)
    memo: dict = {}
    records: dict = {}
    result = SearchResult(best=None)

    def feasible(arch):
        return limit is None or param_count(arch, space) <= limit

    def fresh(seen):
        for _ in range(config.retries):
            arch = sample_uniform(space, None, None, rng)
            if feasible(arch) and arch.encode() not in seen:
                return arch
        return None

    def score(arch, gen):
        key = arch.encode()
        if key not in memo:
            memo[key] = evaluator(arch)
            result.evaluations += 1
            acc, loss = memo[key]
            records[key] = EvalRecord(arch, float(acc), float(loss), param_count(arch, space), gen)
        return records[key]

    population = []
    seen = set()
    for _ in range(config.population_size):
        arch = fresh(seen)
        if arch is not None:
            population.append(arch)
            seen.add(arch.encode())
    if not population:
        raise ConfigurationError(f"no feasible architecture found after {config.retries} draws")

    for gen in range(config.generations):
        scored = sorted((score(a, gen) for a in population), key=EvalRecord.rank_key)
        result.history.extend((gen, r) for r in scored)
        if result.best is None or scored[0].rank_key() < result.best.rank_key():
            result.best = scored[0]
        result.best_per_generation.append(result.best)
        log.info("generation %d: %d evaluated, best %s acc=%.4f", gen, len(scored),
                 result.best.arch, result.best.accuracy)
        if gen == config.generations - 1:
            break
        parents = [r.arch for r in scored[:config.parent_count]]
        n_mut = config.population_size // 2
        children = []
        for slot in range(config.population_size):
            child = None
            for _ in range(config.retries):
                if slot < n_mut:
                    cand = mutate(rng.choice(parents), space, config.mutation_prob, rng)
                else:
                    cand = crossover(rng.choice(parents), rng.choice(parents), rng)
                if feasible(cand):
                    child = cand
                    break
            children.append(child)
        population = []
        for child in children:
            if child is None or child.encode() in seen:
                child = fresh(seen)
            if child is not None:
                population.append(child)
                seen.add(child.encode())
        if not population:
            log.info("feasible space exhausted after %d generations", gen + 1)
            break
    return result


def supernet_evaluator(weights, valset, batch_size: int = 256):
    def run(arch):
        return evaluate(weights, arch, valset, batch_size)
    return run


def search_supernet(weights, space: SearchSpace, valset, config: EvoConfig) -> SearchResult:
    """Search with the trained supernet as a zero-retraining evaluator."""
    return search(space, supernet_evaluator(weights, valset), config)
