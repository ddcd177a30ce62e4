"""Command line entry point: ``dfjss-hh <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 input/output error,
4 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import experiment as ex
from . import seeding
from .errors import ConfigError, DfjssError, FormatVersionMismatch, ParseError, ShapeMismatch
from .sim import SCENARIOS, TaskSpec

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4
log = logging.getLogger("dfjss_hh")


def _global_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="YAML experiment config (a run manifest.json also works)")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--out", help="output directory")
    g.add_argument("--threads", type=int, help="worker processes for simulation")
    g.add_argument("--temperature", type=float, help="sampling temperature for guided mutation")
    g.add_argument("--task-switch-prob", type=float, help="probability of switching task in mutation")
    g.add_argument("-v", "--verbose", action="store_true")


def _task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", type=int, choices=sorted(SCENARIOS))
    p.add_argument("--task", action="append", dest="tasks", metavar="ID",
                   help="task id such as Fmean-0.85-8 (repeatable, overrides --scenario)")


def _evo_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pop-size", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--num-jobs", type=int)
    p.add_argument("--test-seeds", type=int, dest="test_seed_count", help="number of test instances")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seq-model", help="sequencing model file (.tgpm)")
    p.add_argument("--route-model", help="routing model file (.tgpm)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfjss-hh", description="Evolve and analyse DFJSS scheduling heuristics.")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    parents = [argparse.ArgumentParser(add_help=False)]
    _global_flags(parents[0])
    for a in parents[0]._actions:
        a.default = argparse.SUPPRESS

    p = sub.add_parser("simulate", parents=parents, help="simulate one instance with one policy")
    p.add_argument("policy", help='handcrafted pair such as "SPT+NIQ" or a heuristic JSON file')
    p.add_argument("--task", default="Fmean-0.85-8")
    p.add_argument("--num-jobs", type=int, default=124)
    p.add_argument("--csv", help="write per-job results here")

    p = sub.add_parser("evolve", parents=parents, help="run GP, TGP or TransGP")
    p.add_argument("--method", choices=["GP", "TGP", "TransGP"])
    p.add_argument("--runs", type=int)
    p.add_argument("--first-run", type=int)
    p.add_argument("--mix-ratio", type=float, help="share of guided offspring (TransGP)")
    _task_flags(p)
    _evo_flags(p)
    _model_flags(p)

    p = sub.add_parser("collect", parents=parents, help="harvest elites from run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--last-gens", type=int, default=20)

    p = sub.add_parser("train", parents=parents, help="train the sequencing and routing models")
    p.add_argument("dataset", help="collect output directory or a dataset file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--d-model", type=int)
    p.add_argument("--heads", type=int, dest="n_heads")
    p.add_argument("--layers", type=int, dest="n_layers")
    p.add_argument("--check-gradients", action="store_true", default=None)

    p = sub.add_parser("baseline", parents=parents, help="evaluate the handcrafted rule grid")
    _task_flags(p)
    _evo_flags(p)

    p = sub.add_parser("pure-trans", parents=parents, help="test rules sampled straight from the models")
    p.add_argument("--samples", type=int, dest="pure_trans_samples")
    _task_flags(p)
    _evo_flags(p)
    _model_flags(p)

    p = sub.add_parser("analyze", parents=parents, help="size, usage, similarity and pattern reports")
    p.add_argument("inputs", nargs="+", help="run directories or heuristic JSON files")
    p.add_argument("--dataset", help="elite corpus for pattern mining and similarity")
    p.add_argument("--top", type=int, default=10)

    p = sub.add_parser("stats", parents=parents, help="pairwise rank-sum tests between methods")
    p.add_argument("inputs", nargs="+", help="method directories (containing test.csv) or test.csv files")
    return parser


def experiment_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if getattr(args, "config", None) else ex.ExperimentConfig()
    top = {}
    for name, key in (("seed", "seed"), ("out", "out_dir"), ("method", "method"), ("runs", "runs"),
                      ("first_run", "first_run"), ("scenario", "scenario"), ("mix_ratio", "mix_ratio"),
                      ("seq_model", "sequencing_model"), ("route_model", "routing_model"),
                      ("pure_trans_samples", "pure_trans_samples")):
        v = getattr(args, name, None)
        if v is not None:
            top[key] = v
    if getattr(args, "tasks", None) and args.command != "simulate":
        top["tasks"] = tuple(TaskSpec.parse(t) for t in args.tasks)
    evo = {k: getattr(args, k) for k in ("pop_size", "generations", "num_jobs", "test_seed_count")
           if getattr(args, k, None) is not None}
    guided = {}
    if getattr(args, "threads", None) is not None:
        evo["workers"] = args.threads
    if getattr(args, "task_switch_prob", None) is not None:
        evo["task_switch_prob"] = args.task_switch_prob
        guided["task_switch_prob"] = args.task_switch_prob
    if getattr(args, "temperature", None) is not None:
        guided["temperature"] = args.temperature
    model = {k: getattr(args, k) for k in ("d_model", "n_heads", "n_layers") if getattr(args, k, None) is not None}
    train = {k: getattr(args, k) for k in ("epochs", "batch_size", "learning_rate", "check_gradients")
             if getattr(args, k, None) is not None}
    try:
        return dataclasses.replace(
            cfg,
            **top,
            evo=dataclasses.replace(cfg.evo, **evo),
            guided=dataclasses.replace(cfg.guided, **guided),
            model=dataclasses.replace(cfg.model, **model),
            train=dataclasses.replace(cfg.train, **train),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run(args: argparse.Namespace) -> int:
    cfg = experiment_config(args)
    out = Path(cfg.out_dir)
    if args.command == "simulate":
        policy = ex.parse_policy(args.policy)
        res = ex.simulate_one(TaskSpec.parse(args.task), policy, cfg.seed, args.num_jobs, args.csv)
        print(f"{res.objective_kind} = {res.objective_value:.4f} over {len(res.completions)} jobs")
    elif args.command == "evolve":
        results = ex.cmd_evolve(cfg)
        for r in results:
            print(f"run {r.run}: " + ", ".join(f"{t}={r.test_mean(t):.2f}" for t in r.test))
        print(f"wrote {cfg.method_dir()}")
    elif args.command == "collect":
        rep = ex.cmd_collect(args.run_dirs, args.top_k, args.last_gens, out)
        print("\n".join(rep.lines()))
    elif args.command == "train":
        res = ex.cmd_train(args.dataset, cfg.model, cfg.train, out)
        for kind, hist in res.histories.items():
            print(f"{kind}: loss {hist[0]:.4f} -> {hist[-1]:.4f}, model {res.model_paths[kind]}")
    elif args.command == "baseline":
        seeds = seeding.test_seeds(cfg.seed, cfg.evo.test_seed_count)
        out.mkdir(parents=True, exist_ok=True)
        rows = ex.cmd_baseline(cfg.task_list, seeds, cfg.evo.num_jobs, out / "baseline.csv")
        for name, tid, m, s in rows:
            print(f"{name:10s} {tid:16s} {m:10.2f} ({s:.2f})")
    elif args.command == "pure-trans":
        cfg = dataclasses.replace(cfg, method="PureTrans")
        for tid, s in ex.cmd_pure_trans(cfg).items():
            d = s.as_dict()
            print(f"{tid}: min {d['min']:.2f} mean {d['mean']:.2f} std {d['std']:.2f} max {d['max']:.2f}")
    elif args.command == "analyze":
        for name, p in ex.cmd_analyze(args.inputs, out, args.dataset, args.top).items():
            print(f"{name}: {p}")
    elif args.command == "stats":
        for pair, task, u, p, v in ex.cmd_stats(args.inputs, out / "significance.csv"):
            print(f"{pair:30s} {task:16s} U={u:.1f} p={p:.4f} {v}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, FormatVersionMismatch, ShapeMismatch) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DfjssError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

