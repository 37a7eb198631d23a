import csv
import io
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kpasim import harness
from kpasim.agent import Hyperparams, QTable, load_qtable
from kpasim.harness import (
    COMPARE_COLUMNS,
    SWEEP_COLUMNS,
    TRAIN_COLUMNS,
    ExperimentConfig,
    SweepConfig,
    TrainReport,
    UndefinedCorrelation,
    baseline_sweep,
    compare_default,
    export_report,
    fast_scale,
    pearson,
    running_average,
    train,
)
from kpasim.simenv import MAX_LIMIT
from kpasim.workload import get_profile

# tiny but complete experiments: 20 RPS for 1 s on a small grid
TINY = replace(ExperimentConfig(profile=get_profile("VII")), rate_rps=20, duration_ms=1000,
               sweep=SweepConfig(start=10, end=70, step=20, repetitions=2), iterations=8, modal_k=4)


# -- config -----------------------------------------------------------------------

def test_default_sweep_grid():
    sc = ExperimentConfig().sweep
    assert sc.levels() == list(range(10, 311, 20))
    assert len(sc.levels()) == 16 and sc.repetitions == 10


@pytest.mark.parametrize("kwargs", [dict(iterations=0), dict(rate_rps=0), dict(workers=0)])
def test_experiment_config_rejects(kwargs):
    with pytest.raises(ValueError):
        ExperimentConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [dict(start=0), dict(end=1001), dict(repetitions=0), dict(start=50, end=30)])
def test_sweep_config_rejects(kwargs):
    with pytest.raises(ValueError):
        SweepConfig(**kwargs)


def test_fast_scale():
    cfg = fast_scale(ExperimentConfig())
    assert (cfg.rate_rps, cfg.duration_ms) == (100.0, 3000.0)
    assert cfg.sim.max_pods == 4


# -- statistics -------------------------------------------------------------------

def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [6, 4, 2]) == pytest.approx(-1.0)
    with pytest.raises(UndefinedCorrelation):
        pearson([1, 2, 3], [5, 5, 5])
    with pytest.raises(ValueError):
        pearson([1], [2])


series = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=30)


@given(series, st.data())
def test_pearson_matches_numpy(xs, data):
    ys = data.draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=len(xs), max_size=len(xs)))
    if np.std(xs) < 1e-6 or np.std(ys) < 1e-6:
        return
    r = pearson(xs, ys)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(float(np.corrcoef(xs, ys)[0, 1]), abs=1e-6)


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=50))
def test_running_average(xs):
    avg = running_average(xs)
    assert len(avg) == len(xs)
    for n, a in enumerate(avg):
        assert a == pytest.approx(math.fsum(xs[: n + 1]) / (n + 1), rel=1e-9, abs=1e-9)
        prev = avg[n - 1] if n else 0.0
        assert a == prev + (xs[n] - prev) / (n + 1)


# -- sweep ------------------------------------------------------------------------

def test_sweep_report_shape_and_consistency():
    rep = baseline_sweep(TINY)
    grid = TINY.sweep.levels()
    assert [l.conc for l in rep.levels] == grid
    assert all(len(l.reports) == 2 for l in rep.levels)
    by = rep.best_by
    assert set(by.values()) <= set(grid)
    thr = {l.conc: l.throughput_rps for l in rep.levels}
    assert thr[by["throughput"]] == max(thr.values())
    assert min(l.mean_latency_ms for l in rep.levels) == next(
        l.mean_latency_ms for l in rep.levels if l.conc == by["mean_latency"])
    for r in rep.correlations.values():
        assert r is None or -1 <= r <= 1


def test_sweep_is_reproducible_and_parallel_safe():
    a = baseline_sweep(TINY)
    b = baseline_sweep(replace(TINY, workers=2))
    assert [(l.conc, l.throughput_rps, l.mean_latency_ms) for l in a.levels] == \
           [(l.conc, l.throughput_rps, l.mean_latency_ms) for l in b.levels]


def test_memory_heavy_sweep_prefers_lowest_limit():
    cfg = fast_scale(replace(ExperimentConfig(profile=get_profile("X")),
                             sweep=SweepConfig(start=10, end=90, step=20, repetitions=2)))
    assert baseline_sweep(cfg).best_by["throughput"] == 10


def test_sweep_trace_dump(tmp_path):
    path = tmp_path / "trace.jsonl"
    baseline_sweep(replace(TINY, sweep=SweepConfig(start=10, end=10, repetitions=1), trace_path=str(path)))
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows[0]["event"] == "arrival"


# -- training ---------------------------------------------------------------------

def test_single_iteration_contract():
    rep = train(replace(TINY, iterations=1))
    assert len(rep.rows) == 1
    assert len(rep.qtable) == 1
    row = rep.rows[0]
    assert row.conc == Hyperparams().initial_conc() + row.action


def test_train_log_invariants():
    rep = train(TINY)
    hp = TINY.hp
    assert [r.iteration for r in rep.rows] == list(range(TINY.iterations))
    assert all(hp.on_grid(r.conc) for r in rep.rows)
    best = None
    for r in rep.rows:
        if r.throughput_rps > 0:
            best = r.throughput_rps if best is None else max(best, r.throughput_rps)
        assert r.ref_value == best
    assert rep.modal_conc_last_k in {r.conc for r in rep.rows[-TINY.modal_k:]}


def test_train_is_reproducible():
    a, b = train(TINY), train(TINY)
    assert a.rows == b.rows and a.qtable == b.qtable
    assert train(replace(TINY, seed=1)).rows != a.rows


def test_train_abort_keeps_partial_report(tmp_path):
    qpath = tmp_path / "q.txt"

    def stop(row):
        if row.iteration == 2:
            raise KeyboardInterrupt

    rep = train(replace(TINY, qtable_path=str(qpath)), on_iteration=stop)
    assert rep.aborted and len(rep.rows) == 3
    assert load_qtable(qpath) == rep.qtable


def test_modal_ties_go_to_lowest():
    rows = [harness.TrainRow(i, c, 0, 1.0, 1.0, 1.0, 1.0, 0, 0, 1) for i, c in enumerate([50, 30, 50, 30])]
    assert TrainReport(rows, QTable(), modal_k=4).modal_conc_last_k == 30


# -- comparison -------------------------------------------------------------------

def test_compare_series(monkeypatch):
    seen = []
    real = harness.run_load_test

    def spy(env, limit, demand, rate, duration, target=None):
        seen.append((limit, target, env.config.target_percentage))
        return real(env, limit, demand, rate, duration, target=target)

    monkeypatch.setattr(harness, "run_load_test", spy)
    rep = compare_default(replace(TINY, iterations=4))
    assert len(rep.rl_throughput) == len(rep.default_throughput) == 4
    assert rep.rl_running_avg == running_average(rep.rl_throughput)
    assert rep.default_running_avg == running_average(rep.default_throughput)
    default_calls = seen[-4:]
    # soft target 100 scaled by 0.7 -> the autoscaler aims at 70 per pod; no hard limit
    assert all(c == (MAX_LIMIT, 100.0, 0.7) for c in default_calls)


# -- export -----------------------------------------------------------------------

def test_export_csv_headers_and_determinism(tmp_path):
    sweep = baseline_sweep(TINY)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    export_report(sweep, "csv", p1)
    export_report(sweep, "csv", p2)
    assert p1.read_bytes() == p2.read_bytes()
    text = p1.read_text()
    assert text.startswith("conc,throughput_rps,mean_latency_ms,p95_latency_ms,success_ratio,")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == SWEEP_COLUMNS and len(rows) == 1 + len(TINY.sweep.levels())


def test_export_empty_train_report_is_header_only(tmp_path):
    path = tmp_path / "t.csv"
    export_report(TrainReport([], QTable()), "csv", path)
    assert path.read_text() == ",".join(TRAIN_COLUMNS) + "\n"


def test_export_json(tmp_path):
    rep = compare_default(replace(TINY, iterations=3))
    path = tmp_path / "c.json"
    export_report(rep, "json", path)
    doc = json.loads(path.read_text())
    assert doc["kind"] == "compare" and doc["columns"] == COMPARE_COLUMNS
    assert len(doc["rows"]) == 3


def test_export_six_significant_digits(tmp_path):
    rows = [harness.TrainRow(0, 10, 0, 1 / 3, 0.5, 1.0, 1 / 3, 0.123456789, 0.0, 1.0)]
    path = tmp_path / "t.csv"
    export_report(TrainReport(rows, QTable()), "csv", path)
    assert path.read_text().splitlines()[1] == "0,10,0,0.333333,0.5,1,0.333333,0.123457,0,1"


def test_export_errors(tmp_path):
    with pytest.raises(ValueError):
        export_report(TrainReport([], QTable()), "xml", tmp_path / "x")
    with pytest.raises(OSError):
        export_report(TrainReport([], QTable()), "csv", tmp_path / "missing" / "x.csv")
