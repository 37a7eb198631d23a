"""Experiment drivers: concurrency sweep, Q-learning training, default-config comparison."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from kpasim.agent import (
    Hyperparams,
    QTable,
    RewardConfig,
    discretize,
    epsilon_at,
    q_update,
    reward,
    save_qtable,
    select_action,
    update_ref,
)
from kpasim.simenv import MAX_LIMIT, LoadTestReport, SimConfig, SimEnv, reset, run_load_test, trace_rows
from kpasim.workload import CalibrationConstants, WorkloadProfile, get_profile, service_demand

log = logging.getLogger(__name__)

FAST_RATE_RPS = 100.0
FAST_DURATION_MS = 3000.0

# seed-stream tags
_SWEEP, _TRAIN_ENV, _AGENT = 1, 2, 3


@dataclass(frozen=True)
class SweepConfig:
    start: int = 10
    end: int = 310
    step: int = 20
    repetitions: int = 10

    def __post_init__(self):
        if self.start < 1:
            raise ValueError("sweep.start must be >= 1")
        if self.end > MAX_LIMIT:
            raise ValueError(f"sweep.end must be <= {MAX_LIMIT}")
        if self.end < self.start:
            raise ValueError("sweep.end must be >= sweep.start")
        if self.step < 1:
            raise ValueError("sweep.step must be >= 1")
        if self.repetitions < 1:
            raise ValueError("sweep.repetitions must be >= 1")

    def levels(self) -> list[int]:
        return list(range(self.start, self.end + 1, self.step))


@dataclass(frozen=True)
class ExperimentConfig:
    profile: WorkloadProfile = field(default_factory=lambda: get_profile("X"))
    calibration: CalibrationConstants = field(default_factory=CalibrationConstants)
    sim: SimConfig = field(default_factory=SimConfig)
    hp: Hyperparams = field(default_factory=Hyperparams)
    reward: RewardConfig = field(default_factory=RewardConfig)
    rate_rps: float = 500.0
    duration_ms: float = 30000.0
    sweep: SweepConfig = field(default_factory=SweepConfig)
    iterations: int = 600
    modal_k: int = 100
    default_target: float = 100.0
    default_target_percentage: float = 0.7
    seed: int = 0
    workers: int = 1
    out_dir: str = "results"
    qtable_path: str | None = None
    trace_path: str | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.modal_k < 1:
            raise ValueError("modal_k must be >= 1")
        if not self.rate_rps > 0:
            raise ValueError("rate_rps must be positive")
        if not self.duration_ms > 0:
            raise ValueError("duration_ms must be positive")
        if not self.default_target > 0:
            raise ValueError("default_target must be positive")
        if not 0 < self.default_target_percentage <= 1:
            raise ValueError("default_target_percentage must be in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def demand(self):
        return service_demand(self.profile, self.calibration)


def fast_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    """Desk-scale variant: 100 RPS for 3 s, cluster shrunk in proportion to the offered load."""
    ratio = FAST_RATE_RPS / cfg.rate_rps
    pods = max(1, int(round(cfg.sim.max_pods * ratio)))
    return replace(cfg, rate_rps=FAST_RATE_RPS, duration_ms=FAST_DURATION_MS,
                   sim=replace(cfg.sim, max_pods=pods))


def derive_seed(master: int, *tags: int) -> int:
    return int(np.random.SeedSequence([master, *tags]).generate_state(1, np.uint64)[0] >> 1)


# -- statistics ------------------------------------------------------------------

class UndefinedCorrelation(ValueError):
    pass


def pearson(xs, ys) -> float:
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    if len(xs) != len(ys):
        raise ValueError("series lengths differ")
    if len(xs) < 2:
        raise ValueError("need at least two points")
    mx, my = math.fsum(xs) / len(xs), math.fsum(ys) / len(ys)
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("zero variance in one of the series")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def running_average(xs) -> list[float]:
    out, avg = [], 0.0
    for n, x in enumerate(xs, start=1):
        avg = avg + (x - avg) / n
        out.append(avg)
    return out


# -- sweep -----------------------------------------------------------------------

@dataclass
class LevelResult:
    conc: int
    throughput_rps: float
    mean_latency_ms: float
    p95_latency_ms: float
    success_ratio: float
    cpu_util: float
    mem_util: float
    reports: list[LoadTestReport]


@dataclass
class SweepReport:
    profile: WorkloadProfile
    levels: list[LevelResult]
    best_by: dict[str, int]
    correlations: dict[str, float | None]


def _one_test(args):
    sim, seed, limit, demand, rate, duration = args
    env = SimEnv(replace(sim, rng_seed=seed))
    return run_load_test(env, limit, demand, rate, duration)


def _dump_trace(path, sim, seed, limit, demand, rate, duration, target=None):
    env = SimEnv(replace(sim, rng_seed=seed, trace=True))
    run_load_test(env, limit, demand, rate, duration, target=target)
    _atomic_write(path, "".join(json.dumps(row, sort_keys=True) + "\n" for row in trace_rows(env)))


def baseline_sweep(cfg: ExperimentConfig) -> SweepReport:
    demand = cfg.demand
    grid = cfg.sweep.levels()
    jobs = [(cfg.sim, derive_seed(cfg.seed, _SWEEP, level, rep), level, demand, cfg.rate_rps, cfg.duration_ms)
            for level in grid for rep in range(cfg.sweep.repetitions)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            reports = list(pool.map(_one_test, jobs, chunksize=4))
    else:
        reports = [_one_test(j) for j in jobs]
    if cfg.trace_path:
        _dump_trace(cfg.trace_path, *jobs[0])

    reps = cfg.sweep.repetitions
    levels = []
    for i, level in enumerate(grid):
        chunk = reports[i * reps:(i + 1) * reps]

        def m(get):
            return float(np.mean([get(r) for r in chunk]))

        levels.append(LevelResult(
            conc=level,
            throughput_rps=m(lambda r: r.throughput_rps),
            mean_latency_ms=m(lambda r: r.mean_latency_ms),
            p95_latency_ms=m(lambda r: r.p95_latency_ms),
            success_ratio=m(lambda r: r.success_ratio),
            cpu_util=m(lambda r: r.resources.avg_cpu_util),
            mem_util=m(lambda r: r.resources.avg_mem_util),
            reports=chunk,
        ))
        log.debug("conc=%d thr=%.1f mean=%.0f", level, levels[-1].throughput_rps, levels[-1].mean_latency_ms)

    # first extremum wins on ties, i.e. the lowest concurrency
    best_by = {
        "throughput": max(levels, key=lambda l: (l.throughput_rps, -l.conc)).conc,
        "mean_latency": min(levels, key=lambda l: (l.mean_latency_ms, l.conc)).conc,
        "p95_latency": min(levels, key=lambda l: (l.p95_latency_ms, l.conc)).conc,
    }
    thr = [l.throughput_rps for l in levels]
    correlations = {}
    for key, series in (("throughput_mean_latency", [l.mean_latency_ms for l in levels]),
                        ("throughput_p95_latency", [l.p95_latency_ms for l in levels])):
        try:
            correlations[key] = pearson(thr, series)
        except (UndefinedCorrelation, ValueError):
            correlations[key] = None
    return SweepReport(cfg.profile, levels, best_by, correlations)


# -- training --------------------------------------------------------------------

@dataclass
class TrainRow:
    iteration: int
    conc: int
    action: int
    throughput_rps: float
    reward: float
    epsilon: float
    ref_value: float | None
    cpu_util: float
    mem_util: float
    success_ratio: float


@dataclass
class TrainReport:
    rows: list[TrainRow]
    qtable: QTable
    modal_k: int = 100
    aborted: bool = False

    @property
    def modal_conc_last_k(self) -> int | None:
        tail = [r.conc for r in self.rows[-self.modal_k:]]
        if not tail:
            return None
        counts = Counter(tail)
        top = max(counts.values())
        return min(c for c, n in counts.items() if n == top)


def train(cfg: ExperimentConfig, on_iteration=None) -> TrainReport:
    """Run the online Q-learning loop.

    A ``KeyboardInterrupt`` between iterations stops training and returns the
    rows logged so far with ``aborted=True``.
    """
    hp = cfg.hp
    demand = cfg.demand
    rng = np.random.default_rng(derive_seed(cfg.seed, _AGENT))
    q = QTable()
    rc = cfg.reward
    conc = hp.initial_conc()
    state = discretize(conc, 0.0, 0.0, hp)
    env = SimEnv(cfg.sim)
    report = TrainReport([], q, cfg.modal_k)
    try:
        for i in range(cfg.iterations):
            eps = epsilon_at(i, hp)
            action = select_action(q, state, eps, rng, hp)
            conc = state.conc + action
            seed = derive_seed(cfg.seed, _TRAIN_ENV, i)
            reset(env, seed)
            if cfg.trace_path and i == 0:
                _dump_trace(cfg.trace_path, cfg.sim, seed, conc, demand, cfg.rate_rps, cfg.duration_ms)
            result = run_load_test(env, conc, demand, cfg.rate_rps, cfg.duration_ms)
            res = result.resources
            rc = update_ref(rc, result.throughput_rps)
            r = reward(result.throughput_rps, rc)
            nxt = discretize(conc, res.avg_cpu_util, res.avg_mem_util, hp)
            q_update(q, state, action, r, nxt, hp)
            row = TrainRow(i, conc, action, result.throughput_rps, r, eps, rc.ref_value,
                           res.avg_cpu_util, res.avg_mem_util, result.success_ratio)
            report.rows.append(row)
            if on_iteration is not None:
                on_iteration(row)
            state = nxt
    except KeyboardInterrupt:
        report.aborted = True
        log.warning("training interrupted after %d iterations", len(report.rows))
    if cfg.qtable_path:
        save_qtable(q, cfg.qtable_path)
    return report


# -- default-config comparison ------------------------------------------------------

@dataclass
class ComparisonReport:
    rl_throughput: list[float]
    default_throughput: list[float]
    rl_running_avg: list[float]
    default_running_avg: list[float]
    train: TrainReport

    @property
    def final_rl_avg(self) -> float:
        return self.rl_running_avg[-1]

    @property
    def final_default_avg(self) -> float:
        return self.default_running_avg[-1]


def run_default_arm(cfg: ExperimentConfig) -> list[float]:
    """Fixed soft target with no hard limit, one cold-started load test per iteration."""
    sim = replace(cfg.sim, target_percentage=cfg.default_target_percentage)
    env = SimEnv(sim)
    demand = cfg.demand
    out = []
    for i in range(cfg.iterations):
        reset(env, derive_seed(cfg.seed, _TRAIN_ENV, i))  # same seeds as the RL arm
        rep = run_load_test(env, MAX_LIMIT, demand, cfg.rate_rps, cfg.duration_ms, target=cfg.default_target)
        out.append(rep.throughput_rps)
    return out


def compare_default(cfg: ExperimentConfig) -> ComparisonReport:
    tr = train(cfg)
    rl = [r.throughput_rps for r in tr.rows]
    default = run_default_arm(replace(cfg, iterations=len(rl)))
    return ComparisonReport(rl, default, running_average(rl), running_average(default), tr)


# -- export --------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


def _jsonable(x):
    if isinstance(x, float) or isinstance(x, np.floating):
        x = float(x)
        return float(f"{x:.6g}") if math.isfinite(x) else None
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


SWEEP_COLUMNS = ["conc", "throughput_rps", "mean_latency_ms", "p95_latency_ms", "success_ratio",
                 "cpu_util", "mem_util", "repetitions"]
TRAIN_COLUMNS = ["iteration", "conc", "action", "throughput_rps", "reward", "epsilon", "ref_value",
                 "cpu_util", "mem_util", "success_ratio"]
COMPARE_COLUMNS = ["iteration", "rl_throughput_rps", "default_throughput_rps", "rl_running_avg",
                   "default_running_avg"]


def _table(report) -> tuple[list[str], list[list]]:
    if isinstance(report, SweepReport):
        return SWEEP_COLUMNS, [[l.conc, l.throughput_rps, l.mean_latency_ms, l.p95_latency_ms, l.success_ratio,
                                l.cpu_util, l.mem_util, len(l.reports)] for l in report.levels]
    if isinstance(report, TrainReport):
        return TRAIN_COLUMNS, [[getattr(r, c) for c in TRAIN_COLUMNS] for r in report.rows]
    if isinstance(report, ComparisonReport):
        rows = zip(report.rl_throughput, report.default_throughput, report.rl_running_avg, report.default_running_avg)
        return COMPARE_COLUMNS, [[i, *vals] for i, vals in enumerate(rows)]
    raise TypeError(f"cannot export {type(report).__name__}")


def _summary(report) -> dict:
    if isinstance(report, SweepReport):
        return {"kind": "sweep", "profile": asdict(report.profile), "best_by": report.best_by,
                "correlations": report.correlations}
    if isinstance(report, TrainReport):
        return {"kind": "train", "iterations": len(report.rows), "modal_k": report.modal_k,
                "modal_conc_last_k": report.modal_conc_last_k, "aborted": report.aborted}
    return {"kind": "compare", "iterations": len(report.rl_throughput),
            "final_rl_avg": report.final_rl_avg if report.rl_running_avg else None,
            "final_default_avg": report.final_default_avg if report.default_running_avg else None}


def export_report(report, fmt: str, path) -> None:
    """Write ``report`` as csv or json; repeated exports are byte-identical."""
    columns, rows = _table(report)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        text = buf.getvalue()
    elif fmt == "json":
        doc = {**_summary(report), "columns": columns, "rows": rows}
        text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}; use csv or json")
    _atomic_write(path, text)


def _atomic_write(path, text: str):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
