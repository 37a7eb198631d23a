"""Command-line entry point: ``kpasim {sweep,train,compare,profiles}``.

Exit codes: 0 success, 2 usage error, 3 config error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from kpasim import harness
from kpasim.agent import save_qtable
from kpasim.config import ENV_CONFIG, ConfigError, apply_overrides, load_config
from kpasim.workload import builtin_profiles

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("kpasim")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError()


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kpasim", description="Simulated serverless concurrency tuning experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help=f"TOML config file (default: ${ENV_CONFIG} if set)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
        sp.add_argument("--fast", action="store_true", help="desk scale: 100 RPS for 3 s per load test")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--trace", help="write a per-request JSONL trace of the first load test here")

    common(sub.add_parser("sweep", help="baseline sweep over hard concurrency limits"))
    common(sub.add_parser("train", help="train the Q-learning agent"))
    common(sub.add_parser("compare", help="RL agent versus the default autoscaler configuration"))
    sub.add_parser("profiles", help="list the built-in workload profiles")
    return p


def resolve_config(args) -> harness.ExperimentConfig:
    path = args.config or os.environ.get(ENV_CONFIG) or None
    cfg = load_config(path)
    if args.fast:
        cfg = harness.fast_scale(cfg)
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.trace:
        cfg = replace(cfg, trace_path=args.trace)
    return cfg


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.3f}"


def cmd_sweep(cfg, fmt) -> str:
    rep = harness.baseline_sweep(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / f"sweep.{fmt}"
    harness.export_report(rep, fmt, dest)
    b, c = rep.best_by, rep.correlations
    return (f"sweep profile={cfg.profile.id} levels={len(rep.levels)} reps={cfg.sweep.repetitions} "
            f"best_throughput={b['throughput']} best_mean_latency={b['mean_latency']} "
            f"best_p95_latency={b['p95_latency']} r_mean={_fmt(c['throughput_mean_latency'])} "
            f"r_p95={_fmt(c['throughput_p95_latency'])} out={dest}")


def cmd_train(cfg, fmt) -> str:
    rep = harness.train(replace(cfg, qtable_path=None))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / f"train.{fmt}"
    harness.export_report(rep, fmt, dest)
    qpath = Path(cfg.qtable_path) if cfg.qtable_path else out / "qtable.txt"
    save_qtable(rep.qtable, qpath)
    ref = rep.rows[-1].ref_value if rep.rows else None
    status = " aborted" if rep.aborted else ""
    return (f"train profile={cfg.profile.id} iterations={len(rep.rows)} "
            f"modal_conc_last_{cfg.modal_k}={rep.modal_conc_last_k} ref_value={_fmt(ref)} "
            f"q_entries={len(rep.qtable)}{status} out={dest}")


def cmd_compare(cfg, fmt) -> str:
    rep = harness.compare_default(replace(cfg, qtable_path=None))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / f"compare.{fmt}"
    harness.export_report(rep, fmt, dest)
    return (f"compare profile={cfg.profile.id} iterations={len(rep.rl_throughput)} "
            f"rl_avg_rps={rep.final_rl_avg:.3f} default_avg_rps={rep.final_default_avg:.3f} out={dest}")


def cmd_profiles() -> str:
    lines = [f"{'id':<6}{'bloat_mb':>10}{'prime_n':>10}{'sleep_ms':>10}"]
    for p in builtin_profiles():
        lines.append(f"{p.id:<6}{p.bloat_mb:>10g}{p.prime_n:>10g}{p.sleep_ms:>10g}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "profiles":
        print(cmd_profiles())
        return EXIT_OK
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"kpasim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    handler = {"sweep": cmd_sweep, "train": cmd_train, "compare": cmd_compare}[args.command]
    try:
        print(handler(cfg, args.format))
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"kpasim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
