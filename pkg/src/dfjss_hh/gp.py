"""Multitask evolutionary engine shared by GP, TGP and the guided variant.

Every individual carries a task; fitness is the task's objective on one
instance per task per generation, so fitness values are only ever compared
between individuals of the same task. Variation operators are plain
callables ``op(parent, rng) -> Individual``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptySubpopulation, InvalidConfig
from .expr import (
    DEFAULT_MAX_DEPTH,
    RULE_KINDS,
    ExprTree,
    Heuristic,
    node_depths,
    ramped_half_and_half,
    random_tree,
    subtree_end,
)
from .seeding import task_instance_seed
from .sim import ScenarioConfig, TaskSpec, generate_instance, run_simulation

log = logging.getLogger(__name__)


@dataclass
class Individual:
    heuristic: Heuristic
    task: TaskSpec
    fitness: float | None = None

    @property
    def size(self) -> int:
        return self.heuristic.size


@dataclass
class EvoConfig:
    pop_size: int = 600
    generations: int = 50
    tournament_size: int = 5
    elites_per_task: int = 4
    max_depth: int = DEFAULT_MAX_DEPTH
    task_switch_prob: float = 0.1
    test_seed_count: int = 30
    init_depth: tuple[int, int] = (2, 6)
    mutation_depth: int = 4
    num_jobs: int = 124
    workers: int = 1

    def validate(self, n_tasks: int) -> None:
        if n_tasks < 1:
            raise InvalidConfig("need at least one task")
        if self.pop_size < n_tasks:
            raise InvalidConfig(f"pop_size {self.pop_size} smaller than the {n_tasks} tasks")
        if self.tournament_size < 1:
            raise InvalidConfig("tournament_size must be >= 1")
        if self.elites_per_task * n_tasks > self.pop_size:
            raise InvalidConfig("elites do not fit in the population")
        if not 0.0 <= self.task_switch_prob <= 1.0:
            raise InvalidConfig("task_switch_prob must be in [0, 1]")


def check_same_task(a: Individual, b: Individual) -> None:
    """Guard for every fitness comparison: objectives of different tasks are incomparable."""
    if a.task != b.task:
        raise InvalidConfig(f"fitness comparison across tasks {a.task} vs {b.task}")


def init_population(cfg: EvoConfig, tasks: Sequence[TaskSpec], rng: np.random.Generator) -> list[Individual]:
    cfg.validate(len(tasks))
    lo, hi = cfg.init_depth
    hi = min(hi, cfg.max_depth)
    return [
        Individual(Heuristic(ramped_half_and_half(rng, lo, hi), ramped_half_and_half(rng, lo, hi)), tasks[i % len(tasks)])
        for i in range(cfg.pop_size)
    ]


# --- evaluation -------------------------------------------------------------


def task_instance(task: TaskSpec, generation_seed: int, task_index: int, num_jobs: int):
    cfg = ScenarioConfig(task, num_jobs=num_jobs)
    return generate_instance(cfg, task_instance_seed(generation_seed, task_index))


def _simulate_batch(inst, heuristics: list[Heuristic]) -> list[float]:
    return [run_simulation(inst, h, record=False).objective_value for h in heuristics]


def _simulate_batch_remote(task: TaskSpec, seed: int, task_index: int, num_jobs: int, heuristics):
    return _simulate_batch(task_instance(task, seed, task_index, num_jobs), heuristics)


def evaluate_population(
    pop: list[Individual],
    generation_seed: int,
    tasks: Sequence[TaskSpec],
    num_jobs: int = 124,
    workers: int = 1,
) -> list[Individual]:
    """Simulate every individual on its task's shared instance for this generation.

    Identical heuristics on the same task are simulated once. With
    ``workers > 1`` the simulations fan out to processes; results are
    identical to the serial path because simulation is deterministic.
    """
    index = {t: k for k, t in enumerate(tasks)}
    jobs: dict[TaskSpec, dict[Heuristic, list[int]]] = {}
    for n, ind in enumerate(pop):
        jobs.setdefault(ind.task, {}).setdefault(ind.heuristic, []).append(n)
    results: dict[TaskSpec, list[float]] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = {}
            for task, uniq in jobs.items():
                hs = list(uniq)
                chunk = max(1, math.ceil(len(hs) / workers))
                futures[task] = [
                    ex.submit(_simulate_batch_remote, task, generation_seed, index[task], num_jobs, hs[c:c + chunk])
                    for c in range(0, len(hs), chunk)
                ]
            for task, fs in futures.items():
                results[task] = [v for f in fs for v in f.result()]
    else:
        for task, uniq in jobs.items():
            inst = task_instance(task, generation_seed, index[task], num_jobs)
            results[task] = _simulate_batch(inst, list(uniq))
    for task, uniq in jobs.items():
        for value, members in zip(results[task], uniq.values()):
            for n in members:
                pop[n].fitness = value
    return pop


def test_heuristic(h, task: TaskSpec, test_seeds: Sequence[int], num_jobs: int = 124) -> float:
    """Mean objective of ``h`` over fresh instances, one per seed."""
    return float(np.mean(test_values(h, task, test_seeds, num_jobs)))


def test_values(h, task: TaskSpec, test_seeds: Sequence[int], num_jobs: int = 124) -> list[float]:
    cfg = ScenarioConfig(task, num_jobs=num_jobs)
    return [run_simulation(generate_instance(cfg, s), h, record=False).objective_value for s in test_seeds]


# --- selection and variation ------------------------------------------------


def tournament_select(
    pop: Sequence[Individual], task: TaskSpec, k: int, rng: np.random.Generator
) -> Individual:
    """Best of ``k`` uniform draws (with replacement) from the task's subpopulation."""
    members = [n for n, ind in enumerate(pop) if ind.task == task]
    if not members:
        raise EmptySubpopulation(f"no individuals for task {task}")
    picks = rng.integers(len(members), size=k)
    best = None
    for p in picks:
        n = members[int(p)]
        cand = pop[n]
        if cand.fitness is None:
            raise InvalidConfig("selection before evaluation")
        if best is None:
            best = n
            continue
        check_same_task(pop[best], cand)
        if (cand.fitness, n) < (pop[best].fitness, best):
            best = n
    return pop[best]


def subtree_mutation(tree: ExprTree, rng: np.random.Generator, max_depth: int, mutation_depth: int = 4) -> ExprTree:
    """Replace the subtree at a uniform node with a grow tree, keeping total depth <= max_depth."""
    k = int(rng.integers(tree.size))
    depth_k = node_depths(tree.nodes)[k]
    limit = max(0, min(mutation_depth, max_depth - depth_k))
    new = random_tree(0, limit, "grow", rng)
    nodes = tree.nodes
    return ExprTree(nodes[:k] + new.nodes + nodes[subtree_end(nodes, k):])


def standard_mutation(parent: Individual, cfg: EvoConfig, rng: np.random.Generator) -> Individual:
    kind = RULE_KINDS[int(rng.integers(2))]
    tree = subtree_mutation(parent.heuristic.rule(kind), rng, cfg.max_depth, cfg.mutation_depth)
    return Individual(parent.heuristic.replace(kind, tree), parent.task)


def switch_task(task: TaskSpec, tasks: Sequence[TaskSpec], p: float, rng: np.random.Generator) -> TaskSpec:
    """With probability ``p``, a uniformly chosen different task; otherwise ``task``."""
    others = [t for t in tasks if t != task]
    if not others or p <= 0.0:
        return task
    if rng.random() < p:
        return others[int(rng.integers(len(others)))]
    return task


def tgp_mutation(
    parent: Individual, cfg: EvoConfig, tasks: Sequence[TaskSpec], rng: np.random.Generator
) -> Individual:
    child = standard_mutation(parent, cfg, rng)
    child.task = switch_task(child.task, tasks, cfg.task_switch_prob, rng)
    return child


class StandardMutation:
    name = "GP"

    def __init__(self, cfg: EvoConfig):
        self.cfg = cfg

    def __call__(self, parent: Individual, rng: np.random.Generator) -> Individual:
        return standard_mutation(parent, self.cfg, rng)


class TaskTagMutation:
    name = "TGP"

    def __init__(self, cfg: EvoConfig, tasks: Sequence[TaskSpec]):
        self.cfg = cfg
        self.tasks = list(tasks)

    def __call__(self, parent: Individual, rng: np.random.Generator) -> Individual:
        return tgp_mutation(parent, self.cfg, self.tasks, rng)


# --- the generation loop ----------------------------------------------------


@dataclass
class LogRow:
    generation: int
    task_id: str
    best_fitness: float
    mean_fitness: float
    best_size: int
    mean_size: float
    wall_ms: float


LOG_FIELDS = ["generation", "task_id", "best_fitness", "mean_fitness", "best_size", "mean_size", "wall_ms"]


@dataclass
class EvolutionLog:
    rows: list[LogRow] = field(default_factory=list)
    best: dict[str, Individual] = field(default_factory=dict)
    # archive[g][task_id] = individuals of that task ranked by fitness (best first)
    archive: list[dict[str, list[Individual]]] = field(default_factory=list)

    def write_csv(self, path: str | Path, timing: bool = True) -> None:
        """One row per generation and task; ``timing=False`` drops the wall_ms column."""
        fields = LOG_FIELDS if timing else LOG_FIELDS[:-1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            for r in self.rows:
                row = [r.generation, r.task_id, repr(r.best_fitness), repr(r.mean_fitness),
                       r.best_size, repr(r.mean_size), f"{r.wall_ms:.1f}"]
                w.writerow(row[: len(fields)])


def rank_by_task(pop: Sequence[Individual], tasks: Sequence[TaskSpec]) -> dict[TaskSpec, list[Individual]]:
    out: dict[TaskSpec, list[Individual]] = {t: [] for t in tasks}
    order = sorted(range(len(pop)), key=lambda n: (pop[n].fitness, n))
    for n in order:
        out.setdefault(pop[n].task, []).append(pop[n])
    return out


def next_generation(
    pop: list[Individual],
    tasks: Sequence[TaskSpec],
    cfg: EvoConfig,
    variation: Callable[[Individual, np.random.Generator], Individual],
    rng: np.random.Generator,
) -> list[Individual]:
    """Per-task elites copied unchanged, remaining slots filled task round-robin."""
    ranked = rank_by_task(pop, tasks)
    out: list[Individual] = []
    for task in tasks:
        for ind in ranked[task][: cfg.elites_per_task]:
            out.append(Individual(ind.heuristic, task))
    slot = 0
    while len(out) < cfg.pop_size:
        task = tasks[slot % len(tasks)]
        slot += 1
        parent = tournament_select(pop, task, cfg.tournament_size, rng)
        child = variation(parent, rng)
        child.fitness = None
        out.append(child)
    return out


def run_evolution(
    cfg: EvoConfig,
    tasks: Sequence[TaskSpec],
    variation: Callable[[Individual, np.random.Generator], Individual],
    rng: np.random.Generator,
    generation_seeds: Sequence[int],
    keep_archive: bool = True,
    progress: Callable[[int, EvolutionLog], None] | None = None,
) -> EvolutionLog:
    """Evaluate, log, keep elites, vary; ``len(generation_seeds)`` must cover every generation."""
    tasks = list(tasks)
    cfg.validate(len(tasks))
    if len(generation_seeds) < cfg.generations:
        raise InvalidConfig("need one generation seed per generation")
    result = EvolutionLog()
    pop = init_population(cfg, tasks, rng)
    for g in range(cfg.generations):
        t0 = time.perf_counter()
        evaluate_population(pop, generation_seeds[g], tasks, cfg.num_jobs, cfg.workers)
        ranked = rank_by_task(pop, tasks)
        wall = (time.perf_counter() - t0) * 1000.0
        for task in tasks:
            members = ranked[task]
            fits = [m.fitness for m in members]
            sizes = [m.size for m in members]
            result.rows.append(LogRow(
                g, task.id, float(fits[0]), float(np.mean(fits)), int(sizes[0]), float(np.mean(sizes)), wall,
            ))
        if keep_archive:
            result.archive.append({t.id: list(ranked[t]) for t in tasks})
        if progress is not None:
            progress(g, result)
        log.debug("generation %d done in %.0f ms", g, wall)
        if g + 1 < cfg.generations:
            pop = next_generation(pop, tasks, cfg, variation, rng)
    ranked = rank_by_task(pop, tasks)
    result.best = {t.id: ranked[t][0] for t in tasks}
    return result
