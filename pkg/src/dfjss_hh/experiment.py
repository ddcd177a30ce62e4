"""Experiment pipelines behind the command line.

Output layout::

    out/<method>/<scenario>/run<k>/log.csv
                                  /best_task<j>.json
                                  /archive.jsonl
                                  /manifest.json
    out/<method>/<scenario>/test.csv        one row per run and task
    out/<method>/<scenario>/summary.csv     mean and std over runs per task

Seeds for run k: evolution stream ``derive_seed(seed, INIT, k)``,
generation instances ``derive_seed(seed, GENERATION, k, g)`` and test
instances ``derive_seed(seed, TEST, i)``. Test seeds do not depend on the
run or method, so every method is tested on the same instances.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import dataset as ds_mod
from . import neural, seeding
from .analysis import (
    mine_patterns,
    pattern_similarity,
    write_pattern_report,
    write_significance_report,
    write_similarity_report,
    write_size_report,
    write_usage_report,
)
from .errors import ConfigError, EmptyDataset, ParseError
from .expr import RULE_KINDS, ExprTree, Heuristic, from_prefix_tokens, to_prefix_tokens
from .gp import EvoConfig, EvolutionLog, StandardMutation, TaskTagMutation, run_evolution, test_values
from .guided import GuidedConfig, GuidedMutation, pure_trans_baseline
from .sim import SCENARIOS, HandcraftedPolicy, TaskSpec, handcrafted_grid

log = logging.getLogger(__name__)

METHODS = ("GP", "TGP", "TransGP", "PureTrans", "handcrafted")
MODEL_METHODS = ("TransGP", "PureTrans")


@dataclass
class ExperimentConfig:
    method: str = "GP"
    scenario: int | None = 2
    tasks: tuple[TaskSpec, ...] = ()  # overrides scenario when nonempty
    runs: int = 1
    first_run: int = 0
    seed: int = 0
    out_dir: str = "out"
    evo: EvoConfig = field(default_factory=EvoConfig)
    guided: GuidedConfig = field(default_factory=GuidedConfig)
    model: neural.TransformerConfig = field(default_factory=neural.TransformerConfig)
    train: neural.TrainConfig = field(default_factory=neural.TrainConfig)
    sequencing_model: str | None = None
    routing_model: str | None = None
    mix_ratio: float = 1.0
    pure_trans_samples: int = 30
    archive_top: int = 20

    def __post_init__(self) -> None:
        self.tasks = tuple(self.tasks)

    @property
    def task_list(self) -> tuple[TaskSpec, ...]:
        if self.tasks:
            return self.tasks
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {sorted(SCENARIOS)} or list tasks")
        return SCENARIOS[self.scenario]

    @property
    def scenario_label(self) -> str:
        return f"scenario{self.scenario}" if not self.tasks else "custom"

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        self.evo.validate(len(self.task_list))
        if self.method in MODEL_METHODS:
            for kind, path in (("sequencing", self.sequencing_model), ("routing", self.routing_model)):
                if not path:
                    raise ConfigError(f"method {self.method} needs a {kind} model path")
                if not Path(path).is_file():
                    raise ConfigError(f"{kind} model file not found: {path}")

    def method_dir(self) -> Path:
        return Path(self.out_dir) / self.method / self.scenario_label

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "scenario": self.scenario,
            "tasks": [t.id for t in self.tasks],
            "runs": self.runs,
            "first_run": self.first_run,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "evo": dataclasses.asdict(self.evo),
            "guided": dataclasses.asdict(self.guided),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "sequencing_model": self.sequencing_model,
            "routing_model": self.routing_model,
            "mix_ratio": self.mix_ratio,
            "pure_trans_samples": self.pure_trans_samples,
            "archive_top": self.archive_top,
        }
        d["evo"]["init_depth"] = list(self.evo.init_depth)
        return d


def _sub(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    if "init_depth" in raw:
        raw["init_depth"] = tuple(raw["init_depth"])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{name}' block: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    if "experiment" in raw:  # a run manifest
        raw = dict(raw["experiment"])
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    tasks = tuple(TaskSpec.parse(t) for t in raw.pop("tasks", ()) or ())
    subs = {
        "evo": _sub(EvoConfig, raw.pop("evo", None), "evo"),
        "guided": _sub(GuidedConfig, raw.pop("guided", None), "guided"),
        "model": _sub(neural.TransformerConfig, raw.pop("model", None), "model"),
        "train": _sub(neural.TrainConfig, raw.pop("train", None), "train"),
    }
    try:
        return ExperimentConfig(tasks=tasks, **subs, **raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw or {})


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- evolution --------------------------------------------------------------------

@dataclass
class RunResult:
    run: int
    log: EvolutionLog
    best: dict[str, Heuristic]
    test: dict[str, list[float]]  # task id -> per-seed objective values

    def test_mean(self, task_id: str) -> float:
        return float(np.mean(self.test[task_id]))


def load_models(cfg: ExperimentConfig) -> dict[str, neural.TransformerParams]:
    return {
        "sequencing": neural.load_params(cfg.sequencing_model),
        "routing": neural.load_params(cfg.routing_model),
    }


def make_variation(cfg: ExperimentConfig, models=None):
    tasks = cfg.task_list
    if cfg.method == "GP":
        return StandardMutation(cfg.evo)
    if cfg.method == "TGP":
        return TaskTagMutation(cfg.evo, tasks)
    if cfg.method == "TransGP":
        if models is None:
            models = load_models(cfg)
        gcfg = dataclasses.replace(cfg.guided, max_depth=cfg.evo.max_depth)
        return GuidedMutation(cfg.evo, tasks, models, gcfg, cfg.mix_ratio)
    raise ConfigError(f"method {cfg.method} does not evolve")


def run_one(cfg: ExperimentConfig, run: int, models=None) -> RunResult:
    tasks = cfg.task_list
    variation = make_variation(cfg, models)
    rng = seeding.derive_rng(cfg.seed, seeding.INIT, run)
    gseeds = seeding.generation_seeds(cfg.seed, run, cfg.evo.generations)
    evo_log = run_evolution(cfg.evo, tasks, variation, rng, gseeds)
    tseeds = seeding.test_seeds(cfg.seed, cfg.evo.test_seed_count)
    best = {t.id: evo_log.best[t.id].heuristic for t in tasks}
    test = {t.id: test_values(best[t.id], t, tseeds, cfg.evo.num_jobs) for t in tasks}
    return RunResult(run, evo_log, best, test)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_run(cfg: ExperimentConfig, res: RunResult) -> Path:
    d = cfg.method_dir() / f"run{res.run}"
    d.mkdir(parents=True, exist_ok=True)
    res.log.write_csv(d / "log.csv")
    for j, task in enumerate(cfg.task_list):
        h = res.best[task.id]
        body = {
            "method": cfg.method,
            "task_id": task.id,
            "run": res.run,
            **h.to_json(),
            "size": h.size,
            "train_fitness": res.log.best[task.id].fitness,
            "test_values": res.test[task.id],
            "test_mean": res.test_mean(task.id),
        }
        (d / f"best_task{j}.json").write_text(json.dumps(body, indent=1) + "\n", encoding="utf-8")
    with open(d / "archive.jsonl", "w", encoding="utf-8") as fh:
        for g, by_task in enumerate(res.log.archive):
            top = {
                tid: [
                    {"fitness": ind.fitness, **{k: to_prefix_tokens(ind.heuristic.rule(k)) for k in RULE_KINDS}}
                    for ind in ranked[: cfg.archive_top]
                ]
                for tid, ranked in by_task.items()
            }
            fh.write(json.dumps({"generation": g, "tasks": top}, separators=(",", ":")) + "\n")
    one = dataclasses.replace(cfg, runs=1, first_run=res.run)
    manifest = {
        "experiment": one.to_dict(),
        "seeds": {
            "master": cfg.seed,
            "evolution": seeding.derive_seed(cfg.seed, seeding.INIT, res.run),
            "generations": seeding.generation_seeds(cfg.seed, res.run, cfg.evo.generations),
            "test": seeding.test_seeds(cfg.seed, cfg.evo.test_seed_count),
        },
        "model_sha256": {
            k: file_sha256(p) for k, p in (("sequencing", cfg.sequencing_model), ("routing", cfg.routing_model)) if p
        },
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return d


def write_test_tables(cfg: ExperimentConfig, results: Sequence[RunResult]) -> None:
    d = cfg.method_dir()
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "test.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "task_id", "test_mean", "size"])
        for r in results:
            for t in cfg.task_list:
                w.writerow([r.run, t.id, _fmt(r.test_mean(t.id)), r.best[t.id].size])
    with open(d / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "mean", "std", "runs", "mean_size"])
        for t in cfg.task_list:
            vals = np.array([r.test_mean(t.id) for r in results])
            sizes = [r.best[t.id].size for r in results]
            w.writerow([t.id, f"{vals.mean():.4f}", f"{vals.std():.4f}", len(vals), f"{np.mean(sizes):.2f}"])


def cmd_evolve(cfg: ExperimentConfig, write: bool = True) -> list[RunResult]:
    cfg.validate()
    if cfg.method not in ("GP", "TGP", "TransGP"):
        raise ConfigError(f"evolve supports GP, TGP and TransGP, not {cfg.method}")
    models = load_models(cfg) if cfg.method == "TransGP" else None
    results = []
    for run in range(cfg.first_run, cfg.first_run + cfg.runs):
        log.info("%s run %d", cfg.method, run)
        res = run_one(cfg, run, models)
        results.append(res)
        if write:
            write_run(cfg, res)
    if write:
        write_test_tables(cfg, results)
    return results


# -- corpus and models ---------------------------------------------------------------

def read_archive(run_dir: str | Path) -> list[dict[str, list[dict]]]:
    path = Path(run_dir) / "archive.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no archive.jsonl in {run_dir}")
    archive = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                try:
                    archive.append(json.loads(line)["tasks"])
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ParseError(f"{path}: {exc}") from None
    return archive


@dataclass
class CollectReport:
    pre: dict[str, int]
    post: dict[str, int]
    paths: dict[str, Path]

    def lines(self) -> list[str]:
        return [f"{k}: {self.pre[k]} records before dedup, {self.post[k]} after" for k in RULE_KINDS]


def cmd_collect(run_dirs: Sequence[str | Path], top_k: int, last_gens: int, out: str | Path) -> CollectReport:
    if not run_dirs:
        raise FileNotFoundError("no run directories given")
    archives = [read_archive(d) for d in run_dirs]
    full = ds_mod.collect_elites(archives, top_k, last_gens)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pre, post, paths = {}, {}, {}
    for kind in RULE_KINDS:
        part = full.of_kind(kind)
        uniq = ds_mod.dedup(part)
        pre[kind], post[kind] = len(part), len(uniq)
        paths[kind] = out / f"{kind}.tgpdata"
        ds_mod.save(uniq, paths[kind])
    report = CollectReport(pre, post, paths)
    (out / "collect_report.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    return report


def _dataset_for(path: str | Path, kind: str) -> ds_mod.EliteDataset:
    p = Path(path)
    if p.is_dir():
        p = p / f"{kind}.tgpdata"
    return ds_mod.load(p).of_kind(kind)


@dataclass
class TrainOutput:
    model_paths: dict[str, Path]
    loss_paths: dict[str, Path]
    histories: dict[str, list[float]]


def cmd_train(dataset_path: str | Path, mcfg: neural.TransformerConfig, tcfg: neural.TrainConfig,
              out: str | Path, kinds: Sequence[str] = RULE_KINDS) -> TrainOutput:
    """One model per rule kind from ``dataset_path`` (a collect directory or a single file)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    res = TrainOutput({}, {}, {})
    for kind in kinds:
        data = _dataset_for(dataset_path, kind)
        if len(data) == 0:
            raise EmptyDataset(f"no {kind} records in {dataset_path}")
        if data.max_len > mcfg.max_len:
            mcfg = dataclasses.replace(mcfg, max_len=max(mcfg.max_len, data.max_len))
        log.info("training %s model on %d records", kind, len(data))
        tr = neural.train(data, mcfg, tcfg, progress=lambda e, v: log.info("%s epoch %d loss %.4f", kind, e, v))
        res.model_paths[kind] = out / f"{kind}.tgpm"
        res.loss_paths[kind] = out / f"{kind}_loss.csv"
        neural.save_params(tr.params, res.model_paths[kind])
        neural.write_loss_csv(tr.history, res.loss_paths[kind])
        res.histories[kind] = tr.history
    return res


# -- baselines --------------------------------------------------------------------------

def cmd_baseline(tasks: Sequence[TaskSpec], test_seeds: Sequence[int], num_jobs: int = 124,
                 out: str | Path | None = None) -> list[tuple[str, str, float, float]]:
    """Handcrafted grid on every task: rows of (rule pair, task id, mean, std)."""
    rows = []
    for pol in handcrafted_grid():
        for t in tasks:
            vals = np.array(test_values(pol, t, test_seeds, num_jobs))
            rows.append((pol.name, t.id, float(vals.mean()), float(vals.std())))
    if out is not None:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["rule", "task_id", "mean", "std"])
            for name, tid, m, s in rows:
                w.writerow([name, tid, f"{m:.4f}", f"{s:.4f}"])
    return rows


def cmd_pure_trans(cfg: ExperimentConfig, write: bool = True) -> dict[str, dict]:
    cfg.validate()
    models = load_models(cfg)
    tseeds = seeding.test_seeds(cfg.seed, cfg.evo.test_seed_count)
    out = {}
    for j, task in enumerate(cfg.task_list):
        rng = seeding.derive_rng(cfg.seed, seeding.SAMPLE, j)
        out[task.id] = pure_trans_baseline(
            models, task, cfg.pure_trans_samples, tseeds, rng,
            temperature=cfg.guided.temperature, num_jobs=cfg.evo.num_jobs, max_depth=cfg.evo.max_depth,
        )
    if write:
        d = cfg.method_dir()
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "puretrans.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "min", "mean", "std", "max"])
            for tid, s in out.items():
                w.writerow([tid, *(f"{v:.4f}" for v in s.as_dict().values())])
        with open(d / "samples.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "sample", "test_mean", "sequencing", "routing"])
            for tid, s in out.items():
                for i, (v, h) in enumerate(zip(s.values, s.heuristics)):
                    w.writerow([tid, i, _fmt(v), h.sequencing.infix(), h.routing.infix()])
    return out


# -- analysis -------------------------------------------------------------------------------

def read_heuristic_file(path: str | Path) -> dict:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
        body["heuristic"] = Heuristic.from_json(body)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    return body


def _heuristic_files(inputs: Sequence[str | Path]) -> list[Path]:
    files: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files += sorted(p.rglob("best_task*.json"))
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {item}")
    if not files:
        raise FileNotFoundError("no heuristic files found")
    return files


def cmd_analyze(inputs: Sequence[str | Path], out: str | Path, dataset_path: str | Path | None = None,
                top_n: int = 10) -> dict[str, Path]:
    bodies = [read_heuristic_file(f) for f in _heuristic_files(inputs)]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sizes: dict[str, dict[str, list[int]]] = {}
    usage: dict[str, list[ExprTree]] = {}
    best: dict[str, dict[str, dict]] = {}
    for b in bodies:
        method = b.get("method", "unknown")
        tid = b.get("task_id", "unknown")
        h = b["heuristic"]
        sizes.setdefault(method, {}).setdefault(tid, []).append(h.size)
        for kind in RULE_KINDS:
            usage.setdefault(f"{method}/{tid}/{kind}", []).append(h.rule(kind))
        score = b.get("test_mean", math.inf)
        cur = best.setdefault(method, {}).get(tid)
        if cur is None or score < cur.get("test_mean", math.inf):
            best[method][tid] = b
    paths = {"size": out / "size.csv", "usage": out / "usage.csv"}
    write_size_report(sizes, paths["size"])
    write_usage_report(usage, paths["usage"])
    for method, by_task in best.items():
        p = out / f"similarity_{method}.csv"
        write_similarity_report({tid: b["heuristic"] for tid, b in by_task.items()}, p)
        paths[f"similarity_{method}"] = p
    if dataset_path is not None:
        for kind in RULE_KINDS:
            corpus = [from_prefix_tokens(r.tokens) for r in _dataset_for(dataset_path, kind).records]
            if not corpus:
                continue
            table = mine_patterns(corpus, top_n)
            paths[f"patterns_{kind}"] = out / f"patterns_{kind}.csv"
            write_pattern_report(table, paths[f"patterns_{kind}"])
            p = out / f"pattern_similarity_{kind}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["method", "task_id", "run", "similarity"])
                for b in bodies:
                    w.writerow([b.get("method"), b.get("task_id"), b.get("run"),
                                f"{pattern_similarity(b['heuristic'].rule(kind), table):.2f}"])
            paths[f"pattern_similarity_{kind}"] = p
    else:
        for kind in RULE_KINDS:
            corpus = [b["heuristic"].rule(kind) for b in bodies]
            paths[f"patterns_{kind}"] = out / f"patterns_{kind}.csv"
            write_pattern_report(mine_patterns(corpus, top_n), paths[f"patterns_{kind}"])
    return paths


def read_test_table(path: str | Path) -> tuple[str, dict[str, list[float]]]:
    """Per-task run values from a method directory or its test.csv; also returns a label."""
    p = Path(path)
    if p.is_dir():
        p = p / "test.csv"
    if not p.is_file():
        raise FileNotFoundError(f"no test table at {path}")
    vals: dict[str, list[float]] = {}
    with open(p, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                vals.setdefault(row["task_id"], []).append(float(row["test_mean"]))
            except (KeyError, ValueError) as exc:
                raise ParseError(f"{p}: {exc}") from None
    return p.parent.parent.name or str(path), vals


def cmd_stats(inputs: Sequence[str | Path], out: str | Path) -> list[tuple]:
    """Pairwise rank-sum verdicts between methods; the first of each pair gets the arrow."""
    results: dict[str, dict[str, list[float]]] = {}
    for i, item in enumerate(inputs):
        label, vals = read_test_table(item)
        if label in results:
            label = f"{label}#{i}"
        results[label] = vals
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    return write_significance_report(results, out)


def simulate_one(task: TaskSpec, heuristic, seed: int, num_jobs: int = 124, out: str | Path | None = None):
    from .sim import ScenarioConfig, generate_instance, run_simulation, write_result_csv

    inst = generate_instance(ScenarioConfig(task, num_jobs=num_jobs), seed)
    res = run_simulation(inst, heuristic)
    if out is not None:
        write_result_csv(res, out)
    return res


def parse_policy(text: str):
    """A handcrafted pair like "SPT+NIQ", or a heuristic JSON file path."""
    if "+" in text and not Path(text).exists():
        try:
            return HandcraftedPolicy.from_names(*text.split("+", 1))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"unknown rule pair {text!r}: {exc}") from None
    return read_heuristic_file(text)["heuristic"]
