"""Seeded discrete-event simulator for dynamic flexible job shops.

Jobs arrive as a Poisson stream. Each operation may run on a subset of
machines with speed-dependent processing times, and moving a job between
machines (or from the entry / to the exit point) takes transport time.

Two decision points drive the schedule:

* routing, when an operation becomes ready: the routing rule is evaluated
  once per eligible machine and the job is sent to the minimum;
* sequencing, when a machine is idle with a non-empty queue: the sequencing
  rule is evaluated per queued operation and the minimum starts.

Both rules are minimised. Ties go to the lowest machine index (routing) or
the lowest (job, operation) index (sequencing).
"""

from __future__ import annotations

import csv
import heapq
import math
import statistics
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from .errors import ConfigError, InvalidConfig
from .expr import TERMINAL_NAMES, ExprTree, FeatureVector

OBJECTIVES = ("Fmax", "Fmean", "Tmean")


@dataclass(frozen=True)
class TaskSpec:
    objective: str
    util_level: float
    mach_num: int

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise InvalidConfig(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.mach_num < 1:
            raise InvalidConfig("mach_num must be positive")

    @property
    def id(self) -> str:
        return f"{self.objective}-{self.util_level:g}-{self.mach_num}"

    def __str__(self) -> str:
        return f"<{self.id}>"

    @classmethod
    def parse(cls, text: str) -> "TaskSpec":
        parts = text.strip().strip("<>").split("-")
        if len(parts) != 3:
            raise ConfigError(f"task id must look like Fmean-0.85-8, got {text!r}")
        try:
            return cls(parts[0], float(parts[1]), int(parts[2]))
        except ValueError as exc:
            raise ConfigError(f"bad task id {text!r}: {exc}") from None


SCENARIOS: dict[int, tuple[TaskSpec, ...]] = {
    s: tuple(TaskSpec(obj, u, m) for u, m in ((0.75, 6), (0.85, 8), (0.95, 10)))
    for s, obj in ((1, "Fmax"), (2, "Fmean"), (3, "Tmean"))
}


@dataclass(frozen=True)
class ScenarioConfig:
    task: TaskSpec
    num_jobs: int = 124
    ops_range: tuple[int, int] = (2, 10)
    workload_range: tuple[float, float] = (100.0, 1000.0)
    speed_range: tuple[float, float] = (10.0, 15.0)
    transport_range: tuple[int, int] = (7, 100)
    due_date_factor: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_jobs < 1:
            raise InvalidConfig("num_jobs must be >= 1")
        for name in ("ops_range", "workload_range", "speed_range", "transport_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name} is empty: {lo} > {hi}")
        if self.ops_range[0] < 1 or self.speed_range[0] <= 0 or self.workload_range[0] <= 0:
            raise InvalidConfig("operation counts, speeds and workloads must be positive")
        if self.transport_range[0] < 0:
            raise InvalidConfig("transport times must be non-negative")

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return ScenarioConfig(
            self.task, self.num_jobs, self.ops_range, self.workload_range,
            self.speed_range, self.transport_range, self.due_date_factor, int(seed),
        )


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    """Read a YAML scenario file (top-level keys mirror :class:`ScenarioConfig`, task nested)."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return scenario_config_from_dict(raw)


def scenario_config_from_dict(raw: dict) -> ScenarioConfig:
    raw = dict(raw)
    task = raw.pop("task", None)
    if task is None:
        raise ConfigError("scenario config needs a 'task' block")
    if isinstance(task, str):
        task = TaskSpec.parse(task)
    else:
        try:
            task = TaskSpec(task["objective"], float(task["util_level"]), int(task["mach_num"]))
        except KeyError as exc:
            raise ConfigError(f"task block missing {exc}") from None
    known = set(ScenarioConfig.__dataclass_fields__) - {"task"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    for key in ("ops_range", "workload_range", "speed_range", "transport_range"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return ScenarioConfig(task=task, **raw)


def arrival_rate(cfg: ScenarioConfig) -> float:
    """Poisson arrival rate that loads the shop to ``task.util_level``.

    ``rate = util * machines / (E[ops per job] * E[processing time per op])``
    with ``E[pt] = E[workload] * E[1/speed]``; for speeds ~ U[a, b],
    ``E[1/speed] = ln(b/a) / (b - a)``.
    """
    u = cfg.task.util_level
    if not u > 0:
        raise InvalidConfig("util_level must be positive")
    lo_ops, hi_ops = cfg.ops_range
    mean_ops = (lo_ops + hi_ops) / 2
    mean_work = sum(cfg.workload_range) / 2
    a, b = cfg.speed_range
    inv_speed = 1.0 / a if a == b else math.log(b / a) / (b - a)
    return u * cfg.task.mach_num / (mean_ops * mean_work * inv_speed)


# --- instances --------------------------------------------------------------


@dataclass(frozen=True)
class Operation:
    workload: float
    eligible: tuple[int, ...]


@dataclass(frozen=True)
class Job:
    release: float
    due: float
    ops: tuple[Operation, ...]
    weight: float = 1.0  # carried for completeness; no objective reads it


@dataclass(frozen=True)
class Instance:
    """Static data of one simulation replication.

    ``transport`` is (M+2)x(M+2): index M is the entry point, M+1 the exit.
    """

    speeds: tuple[float, ...]
    transport: tuple[tuple[float, ...], ...]
    jobs: tuple[Job, ...]
    objective: str = "Fmean"

    @property
    def num_machines(self) -> int:
        return len(self.speeds)

    @property
    def entry(self) -> int:
        return len(self.speeds)

    @property
    def exit(self) -> int:
        return len(self.speeds) + 1

    def processing_time(self, op: Operation, machine: int) -> float:
        return op.workload / self.speeds[machine]

    def median_processing_time(self, op: Operation) -> float:
        return statistics.median(op.workload / self.speeds[m] for m in op.eligible)

    @cached_property
    def _prep(self) -> "_Prepared":
        return _Prepared(self)


def due_date(release: float, ops: Sequence[Operation], speeds: Sequence[float], factor: float) -> float:
    total = sum(statistics.median(op.workload / speeds[m] for m in op.eligible) for op in ops)
    return release + factor * total


def make_job(release: float, ops: Sequence[Operation], speeds: Sequence[float], factor: float = 1.5) -> Job:
    ops = tuple(ops)
    return Job(float(release), due_date(release, ops, speeds, factor), ops)


def generate_instance(cfg: ScenarioConfig, seed: int | None = None) -> Instance:
    """Sample one replication; fully determined by ``seed`` (defaults to ``cfg.seed``)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    m = cfg.task.mach_num
    speeds = tuple(float(s) for s in rng.uniform(*cfg.speed_range, size=m))
    lo, hi = cfg.transport_range
    raw = rng.integers(lo, hi + 1, size=(m + 2, m + 2))
    sym = np.triu(raw, 1)
    sym = sym + sym.T
    transport = tuple(tuple(float(x) for x in row) for row in sym)
    rate = arrival_rate(cfg)
    t = 0.0
    jobs = []
    for _ in range(cfg.num_jobs):
        t += float(rng.exponential(1.0 / rate))
        n_ops = int(rng.integers(cfg.ops_range[0], cfg.ops_range[1] + 1))
        ops = []
        for _ in range(n_ops):
            work = float(rng.uniform(*cfg.workload_range))
            k = int(rng.integers(1, m + 1))
            elig = tuple(sorted(int(x) for x in rng.choice(m, size=k, replace=False)))
            ops.append(Operation(work, elig))
        jobs.append(make_job(t, ops, speeds, cfg.due_date_factor))
    return Instance(speeds, transport, tuple(jobs), cfg.task.objective)


class _Prepared:
    """Per-instance lookup tables used by the event loop."""

    def __init__(self, inst: Instance):
        self.alts: list[list[tuple[tuple[int, float], ...]]] = []
        self.npt: list[list[float]] = []
        self.wkr: list[list[float]] = []
        for job in inst.jobs:
            alts = [tuple((mm, op.workload / inst.speeds[mm]) for mm in op.eligible) for op in job.ops]
            med = [statistics.median(p for _, p in a) for a in alts]
            wkr = [0.0] * len(med)
            acc = 0.0
            for j in range(len(med) - 1, -1, -1):
                acc += med[j]
                wkr[j] = acc
            self.alts.append(alts)
            self.npt.append(med[1:] + [0.0])
            self.wkr.append(wkr)


# --- rules ------------------------------------------------------------------

Scorer = Callable[[tuple, float, float], float]


@dataclass(frozen=True)
class SelectorRule:
    """Fixed single-attribute rule: minimise (or maximise) one attribute.

    ``attribute`` is a terminal name, ``DUE`` (job due date) or ``READY``
    (time the operation joined the queue).
    """

    name: str
    attribute: str
    maximize: bool = False

    def scorer(self) -> Scorer:
        sign = -1.0 if self.maximize else 1.0
        if self.attribute == "DUE":
            return lambda f, due, ready: sign * due
        if self.attribute == "READY":
            return lambda f, due, ready: sign * ready
        idx = TERMINAL_NAMES.index(self.attribute)
        return lambda f, due, ready: sign * f[idx]


HANDCRAFTED_SEQUENCING = {
    "SPT": SelectorRule("SPT", "PT"),
    "LPT": SelectorRule("LPT", "PT", maximize=True),
    "EDD": SelectorRule("EDD", "DUE"),
    "FIFO": SelectorRule("FIFO", "READY"),
}
HANDCRAFTED_ROUTING = {
    "NIQ": SelectorRule("NIQ", "NIQ"),
    "WIQ": SelectorRule("WIQ", "WIQ"),
}


@dataclass(frozen=True)
class HandcraftedPolicy:
    sequencing: SelectorRule
    routing: SelectorRule

    @property
    def name(self) -> str:
        return f"{self.sequencing.name}+{self.routing.name}"

    @classmethod
    def from_names(cls, seq: str, route: str) -> "HandcraftedPolicy":
        try:
            return cls(HANDCRAFTED_SEQUENCING[seq], HANDCRAFTED_ROUTING[route])
        except KeyError as exc:
            raise ConfigError(f"unknown handcrafted rule {exc}") from None


def handcrafted_grid() -> list[HandcraftedPolicy]:
    """The 4x2 grid in table order: (SPT, LPT, EDD, FIFO) x (NIQ, WIQ), routing-major."""
    return [HandcraftedPolicy.from_names(s, r) for r in HANDCRAFTED_ROUTING for s in HANDCRAFTED_SEQUENCING]


def _scorer(rule) -> Scorer:
    if isinstance(rule, ExprTree):
        fn = rule.compiled()
        return lambda f, due, ready: fn(*f)
    if isinstance(rule, SelectorRule):
        return rule.scorer()
    if callable(rule):
        return rule
    raise TypeError(f"cannot use {rule!r} as a rule")


# --- simulation -------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleEntry:
    job: int
    op: int
    machine: int
    start: float
    end: float


@dataclass
class SimResult:
    releases: tuple[float, ...]
    dues: tuple[float, ...]
    completions: tuple[float, ...]
    objective_kind: str
    objective_value: float
    schedule: list[ScheduleEntry] = field(default_factory=list)

    @property
    def flowtimes(self) -> list[float]:
        return [c - r for c, r in zip(self.completions, self.releases)]

    @property
    def tardiness(self) -> list[float]:
        return [max(0.0, c - d) for c, d in zip(self.completions, self.dues)]


def objective(result: SimResult, kind: str) -> float:
    flows = result.flowtimes
    if kind == "Fmax":
        return max(flows)
    if kind == "Fmean":
        return math.fsum(flows) / len(flows)
    if kind == "Tmean":
        return math.fsum(result.tardiness) / len(flows)
    raise InvalidConfig(f"unknown objective {kind!r}")


_COMPLETE, _ARRIVE, _RELEASE = 0, 1, 2


class ShopState:
    """Mutable shop-floor state of one simulation run."""

    def __init__(self, inst: Instance):
        self.inst = inst
        self.prep = inst._prep
        m = inst.num_machines
        self.now = 0.0
        self.busy = [False] * m
        self.idle_since = [0.0] * m
        self.queues: list[list[tuple[int, int, float, float]]] = [[] for _ in range(m)]
        self.wiq = [0.0] * m

    def features(self, job: int, op: int, machine: int, pt: float, ready: float) -> tuple:
        """Terminal values for (operation, machine) at ``now``; see :func:`compute_features`."""
        now = self.now
        wkr = self.prep.wkr[job][op]
        j = self.inst.jobs[job]
        return (
            float(len(self.queues[machine])),
            self.wiq[machine],
            0.0 if self.busy[machine] else now - self.idle_since[machine],
            pt,
            self.prep.npt[job][op],
            now - ready,
            wkr,
            float(len(j.ops) - op),
            j.due - now - wkr,
            now - j.release,
        )


def compute_features(state: ShopState, job: int, op: int, machine: int, ready: float | None = None) -> FeatureVector:
    """Feature vector for operation ``op`` of ``job`` considered on ``machine``.

    NIQ/WIQ describe the machine queue (count / summed processing time on
    that machine); MWT is how long the machine has been idle (0 if busy);
    NPT and WKR use the median processing time over eligible machines;
    ``ready`` defaults to ``now`` (an operation being routed has not waited).
    """
    pt = state.inst.jobs[job].ops[op].workload / state.inst.speeds[machine]
    return FeatureVector(*state.features(job, op, machine, pt, state.now if ready is None else ready))


def run_simulation(inst: Instance, heuristic, record: bool = True) -> SimResult:
    """Simulate ``inst`` under ``heuristic`` (anything with ``.sequencing``/``.routing`` rules)."""
    seq_score = _scorer(heuristic.sequencing)
    route_score = _scorer(heuristic.routing)
    st = ShopState(inst)
    jobs = inst.jobs
    prep = st.prep
    transport = inst.transport
    exit_ = inst.exit
    queues = st.queues
    busy = st.busy
    idle_since = st.idle_since
    wiq = st.wiq
    features = st.features
    completions = [math.nan] * len(jobs)
    schedule: list[ScheduleEntry] = []
    heap: list[tuple] = []
    counter = 0
    for i, job in enumerate(jobs):
        heap.append((job.release, _RELEASE, counter, i, 0, inst.entry))
        counter += 1
    heapq.heapify(heap)

    def route(i: int, j: int, src: int) -> None:
        nonlocal counter
        now = st.now
        due = jobs[i].due
        best = math.inf
        best_m = -1
        for mm, pt in prep.alts[i][j]:
            s = route_score(features(i, j, mm, pt, now), due, now)
            if s < best or best_m < 0:
                best, best_m = s, mm
        heapq.heappush(heap, (now + transport[src][best_m], _ARRIVE, counter, i, j, best_m))
        counter += 1

    n_machines = inst.num_machines
    while heap:
        now = heap[0][0]
        st.now = now
        while heap and heap[0][0] == now:
            _, kind, _, i, j, m = heapq.heappop(heap)
            if kind == _COMPLETE:
                busy[m] = False
                idle_since[m] = now
                if j + 1 < len(jobs[i].ops):
                    route(i, j + 1, m)
                else:
                    completions[i] = now + transport[m][exit_]
            elif kind == _ARRIVE:
                pt = jobs[i].ops[j].workload / inst.speeds[m]
                queues[m].append((i, j, pt, now))
                wiq[m] += pt
            else:
                route(i, 0, m)
        for m in range(n_machines):
            q = queues[m]
            if busy[m] or not q:
                continue
            best_idx = 0
            best_key = None
            for idx, (i, j, pt, ready) in enumerate(q):
                s = seq_score(features(i, j, m, pt, ready), jobs[i].due, ready)
                key = (s, i, j)
                if best_key is None or key < best_key:
                    best_key, best_idx = key, idx
            i, j, pt, _ = q.pop(best_idx)
            wiq[m] = wiq[m] - pt if q else 0.0
            busy[m] = True
            end = now + pt
            if record:
                schedule.append(ScheduleEntry(i, j, m, now, end))
            heapq.heappush(heap, (end, _COMPLETE, counter, i, j, m))
            counter += 1

    res = SimResult(
        releases=tuple(j.release for j in jobs),
        dues=tuple(j.due for j in jobs),
        completions=tuple(completions),
        objective_kind=inst.objective,
        objective_value=math.nan,
        schedule=schedule,
    )
    res.objective_value = objective(res, inst.objective)
    return res


def argmin_first(scores: Iterable[float]) -> int:
    """Index of the smallest score, first occurrence on ties (the dispatch convention)."""
    best_i, best = -1, math.inf
    for i, s in enumerate(scores):
        if best_i < 0 or s < best:
            best_i, best = i, s
    return best_i


def audit_schedule(inst: Instance, result: SimResult, tol: float = 1e-9) -> list[str]:
    """Check a recorded schedule against the shop constraints; returns violation messages."""
    problems: list[str] = []
    seen: dict[tuple[int, int], ScheduleEntry] = {}
    for e in result.schedule:
        if (e.job, e.op) in seen:
            problems.append(f"operation {(e.job, e.op)} scheduled twice")
        seen[(e.job, e.op)] = e
    for i, job in enumerate(inst.jobs):
        prev_end, prev_loc = job.release, inst.entry
        for j, op in enumerate(job.ops):
            e = seen.get((i, j))
            if e is None:
                problems.append(f"operation {(i, j)} never ran")
                break
            if e.machine not in op.eligible:
                problems.append(f"operation {(i, j)} ran on ineligible machine {e.machine}")
            pt = op.workload / inst.speeds[e.machine]
            if abs((e.end - e.start) - pt) > tol * max(1.0, pt):
                problems.append(f"operation {(i, j)} was preempted or mistimed")
            if e.start + tol < prev_end + inst.transport[prev_loc][e.machine]:
                problems.append(f"operation {(i, j)} started before its predecessor arrived")
            prev_end, prev_loc = e.end, e.machine
        else:
            c = result.completions[i]
            if not abs(c - (prev_end + inst.transport[prev_loc][inst.exit])) <= tol * max(1.0, c):
                problems.append(f"job {i} completion time inconsistent")
            if c < job.release:
                problems.append(f"job {i} completes before release")
    by_machine: dict[int, list[ScheduleEntry]] = {}
    for e in result.schedule:
        by_machine.setdefault(e.machine, []).append(e)
    for m, entries in by_machine.items():
        entries.sort(key=lambda e: (e.start, e.end))
        for a, b in zip(entries, entries[1:]):
            if b.start + tol < a.end:
                problems.append(f"machine {m} overlaps {(a.job, a.op)} and {(b.job, b.op)}")
    return problems


def write_result_csv(result: SimResult, path: str | Path) -> None:
    """One row per job, then a ``summary`` row (max completion, mean flowtime, mean tardiness)."""
    flows = result.flowtimes
    tards = result.tardiness
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["job_id", "release", "due", "completion", "flowtime", "tardiness"])
        for i, (r, d, c) in enumerate(zip(result.releases, result.dues, result.completions)):
            w.writerow([i, repr(r), repr(d), repr(c), repr(flows[i]), repr(tards[i])])
        w.writerow([
            "summary", "", "", repr(max(result.completions)),
            repr(math.fsum(flows) / len(flows)), repr(math.fsum(tards) / len(tards)),
        ])
