import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfjss_hh import seeding
from dfjss_hh.dataset import task_embedding
from dfjss_hh.errors import InvalidConfig, RegenerationOverflow
from dfjss_hh.expr import (
    FUNCTIONS,
    PRIMITIVES,
    TERMINALS,
    ExprTree,
    Heuristic,
    PrefixStack,
    Token,
    from_prefix_tokens,
    ramped_half_and_half,
    to_prefix_tokens,
    valid_next_tokens,
)
from dfjss_hh.gp import EvoConfig, Individual, run_evolution
from dfjss_hh.guided import (
    GuidedConfig,
    GuidedMutation,
    MutationTrace,
    generate_full_rule,
    guided_mutation,
    masked_distribution,
    masked_sample,
    pure_trans_baseline,
    regenerate_suffix,
)
from dfjss_hh.neural import TransformerConfig, init_params
from dfjss_hh.sim import SCENARIOS

TASKS = list(SCENARIOS[2])
E = task_embedding(TASKS[1])


class ScriptedModel:
    """Puts a huge logit on the next scripted token; records every prefix it is shown."""

    def __init__(self, script):
        self.script = list(script)
        self.seen = []

    def next_token_logits(self, prefix, e_task):
        self.seen.append(list(prefix))
        z = np.zeros(18)
        z[int(self.script[len(self.seen) - 1])] = 50.0
        return z


class ConstantModel:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def next_token_logits(self, prefix, e_task):
        return self.logits


def entropy(counts, n):
    return -sum(c / n * math.log(c / n) for c in counts.values())


@pytest.fixture(scope="module")
def random_model():
    cfg = TransformerConfig(d_model=32, n_heads=4, n_layers=2, max_len=513)
    return init_params(cfg, np.random.default_rng(0), std=0.5)


class TestMaskedSample:
    def test_single_valid(self):
        rng = np.random.default_rng(0)
        logits = np.random.default_rng(1).normal(size=18) * 10
        assert all(masked_sample(logits, {Token.END}, 1.0, rng) == Token.END for _ in range(200))

    def test_fair_coin(self):
        rng = np.random.default_rng(0)
        valid = {Token.PT, Token.NIQ}
        draws = Counter(masked_sample(np.zeros(18), valid, 1.0, rng) for _ in range(10_000))
        assert abs(draws[Token.PT] / 10_000 - 0.5) <= 0.02

    def test_cold_is_argmax(self):
        rng = np.random.default_rng(0)
        logits = np.random.default_rng(2).normal(size=18)
        valid = frozenset(TERMINALS)
        best = max(valid, key=lambda t: logits[t])
        hits = sum(masked_sample(logits, valid, 1e-6, rng) == best for _ in range(10_000))
        assert hits / 10_000 > 0.999

    def test_invalid_mass_is_zero(self):
        p = masked_distribution(np.arange(18.0), frozenset(FUNCTIONS), 1.0)
        assert all(p[t] == 0.0 for t in TERMINALS) and p[0] == p[1] == 0.0
        assert p.sum() == pytest.approx(1.0)

    def test_entropy_grows_with_temperature(self):
        logits = np.random.default_rng(3).normal(size=18) * 2
        valid = frozenset(PRIMITIVES)
        ents = []
        for g in (0.5, 1.0, 1.5):
            rng = np.random.default_rng(4)
            c = Counter(masked_sample(logits, valid, g, rng) for _ in range(10_000))
            ents.append(entropy(c, 10_000))
        assert ents[0] <= ents[1] <= ents[2]

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1), st.lists(st.sampled_from(list(Token)), min_size=1, unique=True),
           st.floats(0.05, 5.0))
    def test_never_emits_invalid(self, seed, valid, gamma):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=18) * 20
        for _ in range(20):
            assert masked_sample(logits, frozenset(valid), gamma, rng) in valid

    def test_empty_valid(self):
        with pytest.raises(ValueError):
            masked_distribution(np.zeros(18), set(), 1.0)


class TestRegenerate:
    PARENT = ("*(min(+(*(WIQ, MWT), MWT), -(min(+(*(WIQ, MWT), MWT), WKR), NIQ)), "
              "min(*(WKR, MWT), max(/(*(WIQ, WIQ), NIQ), PT)))")

    def test_replayed_trace(self):
        parent = ExprTree.parse(self.PARENT)
        script = [Token.PDIV, Token.WKR, Token.MWT, Token.MWT]
        model = ScriptedModel(script)
        trace = MutationTrace()
        child = regenerate_suffix(model, parent, 7, E, GuidedConfig(temperature=1e-6),
                                  np.random.default_rng(0), trace)
        assert child == ExprTree.parse("*(min(+(*(WIQ, MWT), MWT), /(WKR, MWT)), MWT)")
        assert model.seen[0] == [0, *(int(t) for t in parent.nodes[:7])]
        assert [s.token for s in trace.steps] == script
        assert trace.kept[0] == Token.START and len(trace.kept) == 8
        row = trace.steps[0].row()
        assert row[:3] == [1, "/", "1.0000"] and len(row) == 5

    def test_k0_regenerates_everything(self):
        model = ScriptedModel([Token.SUB, Token.TIS, Token.PT])
        child = regenerate_suffix(model, ExprTree.parse("+(NIQ, WIQ)"), 0, E, GuidedConfig(1e-6),
                                  np.random.default_rng(0))
        assert child == ExprTree.parse("-(TIS, PT)")
        assert model.seen[0] == [0]

    def test_bad_point(self):
        with pytest.raises(IndexError):
            regenerate_suffix(ConstantModel(np.zeros(18)), ExprTree.parse("+(NIQ, WIQ)"), 3, E,
                              GuidedConfig(), np.random.default_rng(0))

    def test_overflow(self):
        greedy = np.zeros(18)
        greedy[Token.ADD] = 30.0
        with pytest.raises(RegenerationOverflow):
            regenerate_suffix(ConstantModel(greedy), None, 0, E, GuidedConfig(max_regen_tokens=5),
                              np.random.default_rng(0))

    def test_depth_cap_forces_termination(self):
        greedy = np.zeros(18)
        greedy[Token.MUL] = 30.0
        tree = regenerate_suffix(ConstantModel(greedy), None, 0, E, GuidedConfig(max_depth=4),
                                 np.random.default_rng(0))
        assert tree.depth == 4 and tree.size == 31

    def test_random_model_sweep(self, random_model):
        rng = np.random.default_rng(0)
        gcfg = GuidedConfig()
        for _ in range(300):
            parent = ramped_half_and_half(rng, 2, 8)
            k = int(rng.integers(parent.size))
            child = regenerate_suffix(random_model, parent, k, E, gcfg, rng)
            assert child.nodes[:k] == parent.nodes[:k]
            assert child.depth <= 8
            assert from_prefix_tokens(to_prefix_tokens(child)) == child

    def test_deterministic(self, random_model):
        parent = ExprTree.parse(self.PARENT)
        a = regenerate_suffix(random_model, parent, 5, E, GuidedConfig(), np.random.default_rng(9))
        b = regenerate_suffix(random_model, parent, 5, E, GuidedConfig(), np.random.default_rng(9))
        assert a == b

    def test_config_validation(self):
        with pytest.raises(InvalidConfig):
            GuidedConfig(temperature=0.0)
        with pytest.raises(InvalidConfig):
            GuidedConfig(task_switch_prob=-0.1)


class TestGuidedMutation:
    def _parent(self, rng):
        return Individual(Heuristic(ramped_half_and_half(rng), ramped_half_and_half(rng)), TASKS[0], 3.0)

    def test_no_switch_keeps_task_and_one_rule(self, random_model):
        rng = np.random.default_rng(1)
        models = {"sequencing": random_model, "routing": random_model}
        gcfg = GuidedConfig(task_switch_prob=0.0)
        for _ in range(200):
            parent = self._parent(rng)
            child = guided_mutation(parent, models, TASKS, gcfg, rng)
            assert child.task == parent.task and child.fitness is None
            assert (child.heuristic.sequencing == parent.heuristic.sequencing
                    or child.heuristic.routing == parent.heuristic.routing)

    def test_switch_uses_new_task_embedding(self):
        rng = np.random.default_rng(2)
        seen = []

        class Spy:
            def next_token_logits(self, prefix, e_task):
                seen.append(tuple(e_task))
                return np.zeros(18)

        parent = self._parent(rng)
        child = guided_mutation(parent, {"sequencing": Spy(), "routing": Spy()}, TASKS,
                                GuidedConfig(task_switch_prob=1.0), rng)
        assert child.task != parent.task
        assert set(seen) == {tuple(task_embedding(child.task))}

    def test_overflow_falls_back(self):
        greedy = np.zeros(18)
        greedy[Token.ADD] = 30.0
        models = {"sequencing": ConstantModel(greedy), "routing": ConstantModel(greedy)}
        rng = np.random.default_rng(3)
        parent = self._parent(rng)
        child = guided_mutation(parent, models, TASKS, GuidedConfig(max_regen_tokens=1, task_switch_prob=0.0), rng)
        assert child.heuristic.sequencing.depth <= 8 and child.heuristic.routing.depth <= 8

    def test_operator_and_mix(self, random_model):
        models = {"sequencing": random_model, "routing": random_model}
        with pytest.raises(InvalidConfig):
            GuidedMutation(EvoConfig(), TASKS, {"sequencing": random_model})
        with pytest.raises(InvalidConfig):
            GuidedMutation(EvoConfig(), TASKS, models, mix_ratio=2.0)
        op = GuidedMutation(EvoConfig(), TASKS, models)
        assert op.name == "TransGP"
        rng = np.random.default_rng(4)
        child = op(self._parent(rng), rng)
        assert isinstance(child, Individual)

    @pytest.mark.parametrize("gamma", [0.5, 1.0, 1.5])
    def test_evolution_runs_at_each_temperature(self, random_model, gamma):
        cfg = EvoConfig(pop_size=9, generations=2, elites_per_task=1, num_jobs=10)
        op = GuidedMutation(cfg, TASKS, {"sequencing": random_model, "routing": random_model},
                            GuidedConfig(temperature=gamma))
        log = run_evolution(cfg, TASKS, op, np.random.default_rng(0), seeding.generation_seeds(0, 0, 2))
        assert len(log.rows) == 6


class TestPureGeneration:
    def test_full_rule_valid(self, random_model):
        rng = np.random.default_rng(0)
        for _ in range(100):
            t = generate_full_rule(random_model, E, 1.0, rng)
            assert t.depth <= 8
            stack = PrefixStack.from_prefix(t.nodes)
            assert stack.complete and valid_next_tokens(stack) == {Token.END}

    def test_single_sample_summary(self, random_model):
        models = {"sequencing": random_model, "routing": random_model}
        s = pure_trans_baseline(models, TASKS[0], 1, seeding.test_seeds(0, 2), np.random.default_rng(0), num_jobs=10)
        assert s.min == s.mean == s.max and s.std == 0.0
        assert len(s.heuristics) == 1

    def test_summary_statistics(self, random_model):
        models = {"sequencing": random_model, "routing": random_model}
        s = pure_trans_baseline(models, TASKS[0], 5, seeding.test_seeds(0, 2), np.random.default_rng(1), num_jobs=10)
        assert s.min <= s.mean <= s.max
        assert s.std == pytest.approx(float(np.std(s.values)))
        with pytest.raises(InvalidConfig):
            pure_trans_baseline(models, TASKS[0], 0, [1], np.random.default_rng(0))
