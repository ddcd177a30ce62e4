"""Counter-based seed derivation.

Every random stream is ``derive_seed(master, purpose, *counters)``: numpy's
``SeedSequence`` hashes the master seed together with the key, so streams
are independent, order-free, and reproducible from the master seed alone.
"""

from __future__ import annotations

import numpy as np

INIT = 0  # evolution RNG of one run (initialisation, selection, variation)
GENERATION = 1  # per-generation training instances
TEST = 2  # held-out test instances, shared by every method and run
SAMPLE = 3  # sampling streams outside evolution (pure generation baselines)
TRAIN = 4  # model training
TASK = 5  # task index folded into a generation seed


def derive_seed(master: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(master: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *key))


def generation_seeds(master: int, run: int, generations: int) -> list[int]:
    return [derive_seed(master, GENERATION, run, g) for g in range(generations)]


def test_seeds(master: int, count: int) -> list[int]:
    return [derive_seed(master, TEST, k) for k in range(count)]


def task_instance_seed(generation_seed: int, task_index: int) -> int:
    return derive_seed(generation_seed, TASK, task_index)
