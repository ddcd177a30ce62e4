"""Model-guided variation.

A mutation keeps the prefix of one rule up to a random point and lets the
rule's decoder write the rest token by token. Each step masks tokens that
would break the prefix grammar or the depth cap, then samples from a
temperature-scaled softmax.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

import numpy as np

from .dataset import task_embedding
from .errors import InvalidConfig, RegenerationOverflow
from .expr import DEFAULT_MAX_DEPTH, RULE_KINDS, ExprTree, PrefixStack, Token, valid_next_tokens
from .gp import EvoConfig, Individual, standard_mutation, subtree_mutation, switch_task, test_values
from .sim import TaskSpec

log = logging.getLogger(__name__)


class NextTokenModel(Protocol):
    def next_token_logits(self, prefix: Sequence[int], e_task) -> np.ndarray: ...


@dataclass(frozen=True)
class GuidedConfig:
    temperature: float = 1.0
    task_switch_prob: float = 0.1
    max_regen_tokens: int = 511
    max_retries: int = 5
    max_depth: int = DEFAULT_MAX_DEPTH

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise InvalidConfig("temperature must be > 0")
        if not 0.0 <= self.task_switch_prob <= 1.0:
            raise InvalidConfig("task_switch_prob must be in [0, 1]")
        if self.max_regen_tokens < 1 or self.max_retries < 1:
            raise InvalidConfig("max_regen_tokens and max_retries must be >= 1")


class ParamsModel:
    """Adapter giving TransformerParams the ``next_token_logits`` method."""

    def __init__(self, params):
        from . import neural

        self.params = params
        self._decoder = neural.IncrementalDecoder(params)

    def next_token_logits(self, prefix, e_task):
        return self._decoder.logits_for(prefix, e_task)


def as_model(obj) -> NextTokenModel:
    return obj if hasattr(obj, "next_token_logits") else ParamsModel(obj)


def masked_distribution(logits: np.ndarray, valid, temperature: float) -> np.ndarray:
    """softmax(logits / temperature) restricted to ``valid``; invalid entries are exactly 0."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    keep = np.zeros(z.shape[0], dtype=bool)
    keep[[int(t) for t in valid]] = True
    if not keep.any():
        raise ValueError("valid token set is empty")
    z = np.where(keep, z, -np.inf)
    z = z - z[keep].max()
    p = np.exp(z)
    p[~keep] = 0.0
    return p / p.sum()


def masked_sample(logits: np.ndarray, valid, temperature: float, rng: np.random.Generator) -> Token:
    p = masked_distribution(logits, valid, temperature)
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    i = min(i, len(p) - 1)
    while p[i] == 0.0:  # float round-off at the tail of the CDF
        i -= 1
    tok = Token(i)
    assert tok in valid, f"sampled invalid token {tok!r}"
    return tok


@dataclass(frozen=True)
class TraceStep:
    step: int
    token: Token
    prob: float
    alternatives: tuple[tuple[Token, float], ...]  # the two most likely other tokens

    def row(self) -> list:
        alts = [f"{t.symbol} ({p:.4f})" for t, p in self.alternatives]
        alts += [""] * (2 - len(alts))
        return [self.step, self.token.symbol, f"{self.prob:.4f}", *alts]


@dataclass
class MutationTrace:
    kept: list[Token] = field(default_factory=list)
    steps: list[TraceStep] = field(default_factory=list)
    attempts: int = 0


def _regenerate_once(model, kept, stack, e_task, gcfg, rng, trace):
    seq = [int(t) for t in kept]
    out: list[int] = []
    steps: list[TraceStep] = []
    while not stack.complete:
        if len(out) >= gcfg.max_regen_tokens:
            return None, steps
        logits = model.next_token_logits(seq, e_task)
        valid = valid_next_tokens(stack)
        tok = masked_sample(logits, valid, gcfg.temperature, rng)
        if trace is not None:
            p = masked_distribution(logits, valid, gcfg.temperature)
            order = [int(i) for i in np.argsort(-p, kind="stable") if i != tok and p[i] > 0][:2]
            steps.append(TraceStep(len(steps) + 1, tok, float(p[tok]), tuple((Token(i), float(p[i])) for i in order)))
        stack.push(tok)
        seq.append(int(tok))
        out.append(int(tok))
    return out, steps


def regenerate_suffix(
    model,
    tree: ExprTree | None,
    k: int,
    e_task,
    gcfg: GuidedConfig,
    rng: np.random.Generator,
    trace: MutationTrace | None = None,
) -> ExprTree:
    """Keep the first ``k`` nodes of ``tree`` and sample the remainder.

    ``k`` counts nodes after START, so k=0 regenerates the whole rule;
    ``tree=None`` with k=0 samples a rule from scratch. Raises
    RegenerationOverflow when every attempt exceeds ``max_regen_tokens``.
    """
    model = as_model(model)
    nodes = () if tree is None else tree.nodes
    if not 0 <= k <= max(len(nodes) - 1, 0):
        raise IndexError(f"mutation point {k} outside [0, {len(nodes)})")
    prefix = list(nodes[:k])
    base = PrefixStack.from_prefix(prefix, gcfg.max_depth)
    kept = [Token.START, *prefix]
    if trace is not None:
        trace.kept = list(kept)
    for attempt in range(1, gcfg.max_retries + 1):
        suffix, steps = _regenerate_once(model, kept, base.copy(), e_task, gcfg, rng, trace)
        if trace is not None:
            trace.attempts = attempt
            trace.steps = steps
        if suffix is not None:
            return ExprTree(tuple(prefix) + tuple(Token(t) for t in suffix))
    raise RegenerationOverflow(
        f"suffix exceeded {gcfg.max_regen_tokens} tokens in {gcfg.max_retries} attempts"
    )


def generate_full_rule(model, e_task, temperature: float, rng: np.random.Generator,
                       gcfg: GuidedConfig | None = None) -> ExprTree:
    gcfg = GuidedConfig(temperature=temperature) if gcfg is None else replace(gcfg, temperature=temperature)
    return regenerate_suffix(model, None, 0, e_task, gcfg, rng)


def guided_mutation(
    parent: Individual,
    models: Mapping[str, object],
    tasks: Sequence[TaskSpec],
    gcfg: GuidedConfig,
    rng: np.random.Generator,
    trace: MutationTrace | None = None,
) -> Individual:
    """Optionally switch task, then regenerate a suffix of one rule with that rule's model.

    On overflow the offspring comes from standard subtree mutation of the
    same rule instead.
    """
    task = switch_task(parent.task, tasks, gcfg.task_switch_prob, rng)
    kind = RULE_KINDS[int(rng.integers(2))]
    tree = parent.heuristic.rule(kind)
    k = int(rng.integers(tree.size))
    try:
        new = regenerate_suffix(models[kind], tree, k, task_embedding(task), gcfg, rng, trace)
    except RegenerationOverflow as exc:
        log.warning("guided mutation fell back to subtree mutation: %s", exc)
        new = subtree_mutation(tree, rng, gcfg.max_depth)
    return Individual(parent.heuristic.replace(kind, new), task)


class GuidedMutation:
    """Variation operator for model-guided evolution.

    ``mix_ratio`` is the share of offspring produced by guided mutation; the
    rest use standard subtree mutation. The default is 1.0 (always guided).
    """

    name = "TransGP"

    def __init__(self, cfg: EvoConfig, tasks: Sequence[TaskSpec], models: Mapping[str, object],
                 gcfg: GuidedConfig | None = None, mix_ratio: float = 1.0):
        if not 0.0 <= mix_ratio <= 1.0:
            raise InvalidConfig("mix_ratio must be in [0, 1]")
        missing = [k for k in RULE_KINDS if k not in models]
        if missing:
            raise InvalidConfig(f"missing models for {missing}")
        self.cfg = cfg
        self.tasks = list(tasks)
        self.models = {k: as_model(models[k]) for k in RULE_KINDS}
        self.gcfg = gcfg or GuidedConfig(task_switch_prob=cfg.task_switch_prob, max_depth=cfg.max_depth)
        self.mix_ratio = mix_ratio

    def __call__(self, parent: Individual, rng: np.random.Generator) -> Individual:
        if self.mix_ratio < 1.0 and rng.random() >= self.mix_ratio:
            return standard_mutation(parent, self.cfg, rng)
        return guided_mutation(parent, self.models, self.tasks, self.gcfg, rng)


@dataclass
class PureTransSummary:
    min: float
    mean: float
    std: float
    max: float
    values: list[float]
    heuristics: list = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {"min": self.min, "mean": self.mean, "std": self.std, "max": self.max}


def pure_trans_baseline(
    models: Mapping[str, object],
    task: TaskSpec,
    n: int,
    test_seeds: Sequence[int],
    rng: np.random.Generator,
    temperature: float = 1.0,
    num_jobs: int = 124,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> PureTransSummary:
    """Sample ``n`` complete heuristics from the models and test each one.

    Each value is the heuristic's mean objective over ``test_seeds``; std is
    the population standard deviation across the ``n`` samples.
    """
    from .expr import Heuristic

    if n < 1:
        raise InvalidConfig("n must be >= 1")
    gcfg = GuidedConfig(temperature=temperature, max_depth=max_depth)
    emb = task_embedding(task)
    values, heurs = [], []
    for _ in range(n):
        seq = regenerate_suffix(models["sequencing"], None, 0, emb, gcfg, rng)
        rou = regenerate_suffix(models["routing"], None, 0, emb, gcfg, rng)
        h = Heuristic(seq, rou)
        heurs.append(h)
        values.append(float(np.mean(test_values(h, task, test_seeds, num_jobs))))
    arr = np.array(values)
    return PureTransSummary(float(arr.min()), float(arr.mean()), float(arr.std()), float(arr.max()), values, heurs)
