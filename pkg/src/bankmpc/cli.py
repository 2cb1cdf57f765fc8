"""Command-line entry point: ``bankmpc run | sweep-n | sweep-w | metrics``."""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .harness import (CONTROLLERS, PRESETS, ConfigError, RunTrace, ScenarioConfig, build_planning, compute_metrics,
                      run_scenario, sweep_bank_size, sweep_window)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def default_config_path() -> Path:
    return Path(str(resources.files("bankmpc") / "data" / "default_config.json"))


def _load(path) -> ScenarioConfig:
    return ScenarioConfig.from_json(path) if path else ScenarioConfig()


def _csv_list(text: str, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}") from exc


def _cmd_run(args) -> int:
    cfg = _load(args.config)
    if args.preset:
        cfg = cfg.with_preset(args.preset)
    if args.controller:
        cfg = cfg.replace(**{"run.controller": "fixed_nominal" if args.controller == "fixed" else args.controller})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workers is not None:
        cfg = cfg.replace(**{"run.workers": args.workers})
    if args.out:
        cfg = cfg.replace(**{"output.dir": args.out})
    if args.dump_track or args.dump_library:
        track, _, lib = build_planning(cfg)
        if args.dump_track:
            track.to_csv(args.dump_track)
        if args.dump_library:
            lib.to_csv(args.dump_library)
    result = run_scenario(cfg)
    print(json.dumps({**result.metrics.deterministic_dict(), "avg_compute_time": result.metrics.avg_compute_time,
                      "diverged": result.diverged}, indent=2))
    return EXIT_OK if result.metrics.completed else EXIT_DIVERGED


def _print_table(name, rows) -> None:
    print(f"{name},median_total_mpc_cost,per_seed")
    for value, med, costs in rows:
        print(f"{value},{med!r},{' '.join(repr(c) for c in costs)}")


def _cmd_sweep_n(args) -> int:
    rows = sweep_bank_size(_load(args.config), _csv_list(args.n, int), list(range(args.seeds)))
    _print_table("N", rows)
    return EXIT_OK


def _cmd_sweep_w(args) -> int:
    cfg = _load(args.config)
    if args.preset:
        cfg = cfg.with_preset(args.preset)
    rows = sweep_window(cfg, _csv_list(args.w, float), list(range(args.seeds)))
    _print_table("W_s", rows)
    return EXIT_OK


def _cmd_metrics(args) -> int:
    trace_path = Path(args.trace)
    cfg_path = args.config or trace_path.with_name("config.json")
    cfg = ScenarioConfig.from_json(cfg_path) if Path(cfg_path).exists() else ScenarioConfig()
    track, raceline, _ = build_planning(cfg)
    trace = RunTrace.from_csv(trace_path, cfg.run.dt)
    metrics = compute_metrics(trace, track, raceline, cfg.run.laps)
    print(metrics.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bankmpc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one closed-loop run")
    r.add_argument("--config")
    r.add_argument("--controller", choices=[c for c in CONTROLLERS if c != "fixed_nominal"] + ["fixed"])
    r.add_argument("--preset", choices=PRESETS)
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--out")
    r.add_argument("--dump-track")
    r.add_argument("--dump-library")
    r.set_defaults(func=_cmd_run)

    n = sub.add_parser("sweep-n", help="median MPC cost per bank size (gradual decay)")
    n.add_argument("--config")
    n.add_argument("--n", default="200,2000,20000")
    n.add_argument("--seeds", type=int, default=5)
    n.set_defaults(func=_cmd_sweep_n)

    w = sub.add_parser("sweep-w", help="median MPC cost per look-back window (s)")
    w.add_argument("--config")
    w.add_argument("--preset", choices=PRESETS, default="exp2")
    w.add_argument("--w", default="0.02,0.1,0.2,1.0,2.0")
    w.add_argument("--seeds", type=int, default=5)
    w.set_defaults(func=_cmd_sweep_w)

    m = sub.add_parser("metrics", help="recompute metrics from a trace CSV")
    m.add_argument("--trace", required=True)
    m.add_argument("--config", help="defaults to config.json next to the trace")
    m.set_defaults(func=_cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
