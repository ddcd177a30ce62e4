"""Elite-heuristic corpus for training the rule generators.

Elites are harvested per run, task and generation from the ranked
populations in an evolution archive. Sequencing and routing rules become
separate records so each rule kind trains its own model.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatVersionMismatch, InsufficientGenerations
from .expr import RULE_KINDS, VOCAB_SIZE, from_prefix_tokens, to_prefix_tokens
from .sim import OBJECTIVES, TaskSpec

D_TASK = 5
HEADER_RE = re.compile(r"^TGPDATA v1 R=(\d+) maxlen=(\d+)$")


def task_embedding(task: TaskSpec) -> np.ndarray:
    """Objective one-hot, then utilisation level and machine count / 10."""
    onehot = [1.0 if task.objective == o else 0.0 for o in OBJECTIVES]
    return np.array(onehot + [float(task.util_level), task.mach_num / 10.0])


@dataclass(frozen=True)
class EliteRecord:
    rule_kind: str
    tokens: tuple[int, ...]
    task_id: str
    embedding: tuple[float, ...]
    fitness: float
    generation: int
    run: int

    def __post_init__(self) -> None:
        if self.rule_kind not in RULE_KINDS:
            raise ValueError(f"bad rule kind {self.rule_kind!r}")
        from_prefix_tokens(self.tokens)
        if not all(math.isfinite(v) for v in self.embedding):
            raise ValueError("task embedding must be finite")


@dataclass
class EliteDataset:
    records: list[EliteRecord] = field(default_factory=list)
    vocab_size: int = VOCAB_SIZE

    @property
    def max_len(self) -> int:
        return max((len(r.tokens) for r in self.records), default=0)

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, kind: str) -> "EliteDataset":
        return EliteDataset([r for r in self.records if r.rule_kind == kind], self.vocab_size)

    def counts(self) -> dict[str, int]:
        return {k: sum(r.rule_kind == k for r in self.records) for k in RULE_KINDS}


def collect_elites(run_archives: Sequence[Sequence[dict]], top_k: int = 20, last_gens: int = 20) -> EliteDataset:
    """Top-``top_k`` individuals per (run, task, generation) over the last ``last_gens`` generations.

    ``run_archives[r][g][task_id]`` is the fitness-ranked list of individuals
    (anything with ``.heuristic`` and ``.fitness``, or dicts as written by
    the experiment runner). Each individual yields one sequencing and one
    routing record; no deduplication happens here.
    """
    records: list[EliteRecord] = []
    for run, archive in enumerate(run_archives):
        if len(archive) < last_gens:
            raise InsufficientGenerations(
                f"run {run} has {len(archive)} generations, need {last_gens}"
            )
        first = len(archive) - last_gens
        for g in range(first, len(archive)):
            for task_id, ranked in archive[g].items():
                emb = tuple(float(x) for x in task_embedding(TaskSpec.parse(task_id)))
                for ind in list(ranked)[:top_k]:
                    heur, fit = _unpack(ind)
                    for kind in RULE_KINDS:
                        records.append(EliteRecord(
                            kind, tuple(to_prefix_tokens(heur.rule(kind))), task_id, emb, float(fit), g, run,
                        ))
    return EliteDataset(records)


def _unpack(ind):
    if isinstance(ind, dict):
        from .expr import Heuristic

        return Heuristic.from_json(ind), ind["fitness"]
    return ind.heuristic, ind.fitness


def dedup(ds: EliteDataset) -> EliteDataset:
    seen: set[tuple[str, tuple[int, ...]]] = set()
    out = []
    for r in ds.records:
        key = (r.rule_kind, r.tokens)
        if key not in seen:
            seen.add(key)
            out.append(r)
    return EliteDataset(out, ds.vocab_size)


def save(ds: EliteDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"TGPDATA v1 R={ds.vocab_size} maxlen={ds.max_len}\n")
        for r in ds.records:
            fields = [r.rule_kind, r.task_id, repr(r.fitness), str(r.run), str(r.generation)]
            fields += [repr(float(v)) for v in r.embedding]
            fields += [str(t) for t in r.tokens]
            fh.write(",".join(fields) + "\n")


def load(path: str | Path) -> EliteDataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        m = HEADER_RE.match(header)
        if not m:
            raise FormatVersionMismatch(f"{path}: unrecognised header {header!r}")
        vocab = int(m.group(1))
        if vocab != VOCAB_SIZE:
            raise FormatVersionMismatch(f"{path}: vocabulary size {vocab}, expected {VOCAB_SIZE}")
        records = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                kind, task_id, fit, run, gen = parts[:5]
                emb = tuple(float(x) for x in parts[5:5 + D_TASK])
                toks = tuple(int(x) for x in parts[5 + D_TASK:])
                records.append(EliteRecord(kind, toks, task_id, emb, float(fit), int(gen), int(run)))
            except (ValueError, IndexError) as exc:
                raise FormatVersionMismatch(f"{path}:{lineno}: {exc}") from None
    ds = EliteDataset(records, vocab)
    if ds.max_len > int(m.group(2)):
        raise FormatVersionMismatch(f"{path}: record longer than header maxlen")
    return ds


def sequences_and_embeddings(ds: EliteDataset) -> tuple[list[list[int]], np.ndarray]:
    return [list(r.tokens) for r in ds.records], np.array([r.embedding for r in ds.records], dtype=float).reshape(-1, D_TASK)


def from_rules(items: Iterable[tuple[str, object, TaskSpec]], fitness: float = 0.0) -> EliteDataset:
    """Build a dataset directly from ``(rule_kind, ExprTree, task)`` triples."""
    recs = []
    for kind, tree, task in items:
        emb = tuple(float(x) for x in task_embedding(task))
        recs.append(EliteRecord(kind, tuple(to_prefix_tokens(tree)), task.id, emb, fitness, 0, 0))
    return EliteDataset(recs)
