"""Heuristic interpretability measures and the rank-sum significance test."""

from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateSample, InvalidSize
from .expr import PRIMITIVES, ExprTree, Token, infix_string, subtree_keys

ALPHA = 0.05
EXACT_LIMIT = 12


def jaccard(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def size_similarity(s1: int, s2: int) -> float:
    if s1 < 1 or s2 < 1:
        raise InvalidSize(f"sizes must be >= 1, got {s1} and {s2}")
    return 1.0 - abs(s1 - s2) / max(s1, s2)


def usage_counts(tree: ExprTree) -> Counter:
    return Counter(tree.nodes)


def terminal_set(tree: ExprTree) -> frozenset[Token]:
    return frozenset(t for t in tree.nodes if t.is_terminal)


# -- subtree patterns -------------------------------------------------------

@dataclass(frozen=True)
class PatternRow:
    pattern: ExprTree
    frequency: int
    coverage: float  # percent of all subtrees in the corpus

    def display(self, depth: int | None = 2) -> str:
        return infix_string(self.pattern, depth)


@dataclass(frozen=True)
class PatternTable:
    rows: tuple[PatternRow, ...]
    total_subtrees: int
    distinct: frozenset  # canonical keys of every pattern, before truncation

    def __iter__(self):
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def total_coverage(self) -> float:
        return sum(r.coverage for r in self.rows)


def mine_patterns(corpus: Sequence[ExprTree], top_n: int | None = 10) -> PatternTable:
    """Count every rooted subtree of every tree; most frequent first.

    Ties are ordered by first appearance in the corpus. The canonical key
    of a pattern is its prefix token tuple.
    """
    if not corpus:
        raise ValueError("corpus must be nonempty")
    counts: Counter = Counter()
    for tree in corpus:
        counts.update(subtree_keys(tree.nodes))
    total = sum(counts.values())
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])  # stable: insertion order breaks ties
    if top_n is not None:
        ranked = ranked[:top_n]
    rows = tuple(PatternRow(ExprTree(k), n, 100.0 * n / total) for k, n in ranked)
    return PatternTable(rows, total, frozenset(counts))


def pattern_similarity(offspring: ExprTree, corpus_patterns) -> float:
    """Percent of the offspring's distinct subtrees that occur in the corpus."""
    known = corpus_patterns.distinct if isinstance(corpus_patterns, PatternTable) else corpus_patterns
    known = {tuple(int(t) for t in (k.nodes if isinstance(k, ExprTree) else k)) for k in known}
    mine = set(subtree_keys(offspring.nodes))
    return 100.0 * len(mine & known) / len(mine)


# -- rank-sum test ------------------------------------------------------------

@dataclass(frozen=True)
class RankSumResult:
    statistic: float  # Mann-Whitney U of the first sample
    p_value: float  # two-sided
    method: str  # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def midranks(values: Sequence[float]) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_rank_sum(a: Sequence[float], b: Sequence[float], strict: bool = False) -> RankSumResult:
    """Two-sided Wilcoxon rank-sum / Mann-Whitney test.

    Pooled samples of at most 12 values are enumerated exactly over every
    split of the midranks; larger ones use the tie-corrected normal
    approximation with continuity correction. If every pooled value is
    equal the result is p = 1 with method "degenerate" (or DegenerateSample
    when ``strict``).
    """
    n, m = len(a), len(b)
    if n < 1 or m < 1:
        raise ValueError("both samples need at least one value")
    pooled = np.concatenate([np.asarray(a, float), np.asarray(b, float)])
    ranks = midranks(pooled)
    r_a = float(ranks[:n].sum())
    u = r_a - n * (n + 1) / 2.0
    if np.all(pooled == pooled[0]):
        if strict:
            raise DegenerateSample("all pooled values are identical")
        return RankSumResult(u, 1.0, "degenerate")
    N = n + m
    mean_r = n * (N + 1) / 2.0
    if N <= EXACT_LIMIT:
        return RankSumResult(u, _exact_p(ranks, n, abs(r_a - mean_r)), "exact")
    _, ties = np.unique(pooled, return_counts=True)
    tie_term = float((ties**3 - ties).sum()) / (N * (N - 1))
    var = n * m / 12.0 * ((N + 1) - tie_term)
    z = (abs(u - n * m / 2.0) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return RankSumResult(u, min(1.0, p), "normal")


def _exact_p(ranks: np.ndarray, n: int, observed_dev: float) -> float:
    mean_r = n * (len(ranks) + 1) / 2.0
    hits = total = 0
    for combo in itertools.combinations(range(len(ranks)), n):
        total += 1
        if abs(float(ranks[list(combo)].sum()) - mean_r) >= observed_dev - 1e-9:
            hits += 1
    return hits / total


def verdict(a: Sequence[float], b: Sequence[float], alpha: float = ALPHA) -> str:
    """"↑" if ``a`` is significantly lower (better) than ``b``, "↓" if higher, else "="."""
    res = wilcoxon_rank_sum(a, b)
    if res.p_value >= alpha:
        return "="
    ma, mb = float(np.mean(a)), float(np.mean(b))
    if ma < mb:
        return "↑"
    if ma > mb:
        return "↓"
    return "="


# -- CSV reports ----------------------------------------------------------------

def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh)


def write_size_report(sizes: Mapping[str, Mapping[str, Sequence[float]]], path: str | Path) -> None:
    """``sizes[method][task_id]`` -> list of heuristic sizes."""
    fh, w = _writer(path)
    with fh:
        w.writerow(["method", "task_id", "mean", "std", "n"])
        for method, by_task in sizes.items():
            for task_id, vals in by_task.items():
                arr = np.asarray(vals, dtype=float)
                w.writerow([method, task_id, f"{arr.mean():.4f}", f"{arr.std():.4f}", len(arr)])


def usage_matrix(groups: Mapping[str, Sequence[ExprTree]]) -> dict[str, dict[str, int]]:
    out = {}
    for label, trees in groups.items():
        c: Counter = Counter()
        for t in trees:
            c.update(usage_counts(t))
        out[label] = {p.symbol: c.get(p, 0) for p in PRIMITIVES}
    return out


def write_usage_report(groups: Mapping[str, Sequence[ExprTree]], path: str | Path) -> None:
    mat = usage_matrix(groups)
    fh, w = _writer(path)
    with fh:
        w.writerow(["group", *[p.symbol for p in PRIMITIVES]])
        for label, row in mat.items():
            w.writerow([label, *row.values()])


def similarity_rows(best: Mapping[str, object]) -> list[tuple[str, str, float, float]]:
    """One row per task pair per rule kind; ``best[task_id]`` is a Heuristic."""
    rows = []
    for (t1, h1), (t2, h2) in itertools.combinations(best.items(), 2):
        for kind in ("sequencing", "routing"):
            r1, r2 = h1.rule(kind), h2.rule(kind)
            rows.append((f"{t1} vs {t2}", kind, jaccard(terminal_set(r1), terminal_set(r2)),
                         size_similarity(r1.size, r2.size)))
    return rows


def write_similarity_report(best: Mapping[str, object], path: str | Path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["pair", "rule_kind", "jaccard", "size_similarity"])
        for pair, kind, j, s in similarity_rows(best):
            w.writerow([pair, kind, f"{j:.4f}", f"{s:.4f}"])


def write_pattern_report(table: PatternTable, path: str | Path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["rank", "pattern", "frequency", "coverage"])
        for i, r in enumerate(table.rows, start=1):
            w.writerow([i, r.display(), r.frequency, f"{r.coverage:.2f}"])


def write_significance_report(
    results: Mapping[str, Mapping[str, Sequence[float]]], path: str | Path, alpha: float = ALPHA
) -> list[tuple]:
    """``results[method][task_id]`` -> per-run test values; every method pair, every shared task."""
    rows = []
    for m1, m2 in itertools.combinations(results, 2):
        for task in results[m1]:
            if task not in results[m2]:
                continue
            a, b = results[m1][task], results[m2][task]
            res = wilcoxon_rank_sum(a, b)
            rows.append((f"{m1} vs {m2}", task, res.statistic, res.p_value, verdict(a, b, alpha)))
    fh, w = _writer(path)
    with fh:
        w.writerow(["pair", "task_id", "statistic", "p_value", "verdict"])
        for pair, task, u, p, v in rows:
            w.writerow([pair, task, f"{u:.1f}", f"{p:.6f}", v])
    return rows
