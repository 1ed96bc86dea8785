"""Command line: run, validate and sweep scenario files.

Set CCNSIM_LOG=DEBUG (or INFO, WARNING) to change log verbosity, and
CCNSIM_AUDIT=1 to check cache and PIT invariants after every event.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from .engine import SchedulingError
from .metrics import attack_results_csv, fmt
from .nodes import invariant_auditor
from .scenario import ScenarioError, build, bundled_scenarios, load_scenario, resolve_path, with_overrides

log = logging.getLogger("ccnsim")

SWEEP_COLUMNS = ("scenario_id", "cell", "params", "seed", "entity", "metric", "value")


def parse_seeds(text: str) -> list:
    """``"3"`` -> [3]; ``"1..5"`` -> [1, 2, 3, 4, 5]; ``"1,4,9"`` -> [1, 4, 9]."""
    text = text.strip()
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def write_outputs(rt, out_dir: Path, trace: bool):
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = rt.engine.collect()
    (out_dir / "metrics.csv").write_text(metrics.to_csv())
    (out_dir / "attack_results.csv").write_text(attack_results_csv(rt.engine))
    if trace:
        (out_dir / "trace.log").write_text(rt.engine.trace_lines())
    return metrics


def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    t0 = time.perf_counter()
    rt = build(cfg, args.seed, trace=args.trace)
    if os.environ.get("CCNSIM_AUDIT"):
        rt.engine.auditor = invariant_auditor
    until = None if args.until is None else int(round(args.until * 1000))
    try:
        rt.run(until)
        rt.finish()
    except (SchedulingError, AssertionError, RuntimeError) as err:
        print(f"error: invariant violated during run: {err}", file=sys.stderr)
        return 2
    metrics = write_outputs(rt, Path(args.out), args.trace)
    log.info("ran %s seed=%s in %.2fs: %d events, %d metric rows", cfg.id, rt.engine.seed,
             time.perf_counter() - t0, rt.engine.events_processed, len(metrics))
    return 0


def cmd_validate(args) -> int:
    cfg = load_scenario(args.scenario)
    print(f"ok: {cfg.id} ({len(cfg.node_kinds())} nodes, {len(cfg.links)} links)")
    return 0


def load_grid(path) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: grid must map parameter paths to value lists")
    grid = {}
    for key, values in data.items():
        if not isinstance(values, list) or not values:
            raise ScenarioError(f"{path}: grid entry {key!r} must be a non-empty list")
        grid[str(key)] = values
    return grid


def grid_cells(grid: dict) -> list:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _run_cell(job):
    data, overrides, seed, until, cell = job
    cfg = with_overrides(data, overrides)
    rt = build(cfg, seed)
    rt.run(until)
    rt.finish()
    metrics = rt.engine.collect()
    params = json.dumps(overrides, sort_keys=True)
    return [(cfg.id, cell, params, seed, e, m, fmt(v)) for e, m, v in metrics.rows]


def cmd_sweep(args) -> int:
    cfg = load_scenario(args.scenario)
    path = resolve_path(args.scenario)
    data = yaml.safe_load(path.read_text())
    grid = load_grid(args.grid)
    cells = grid_cells(grid)
    # check every cell before running anything
    for overrides in cells:
        with_overrides(data, overrides, source=str(path))
    seeds = parse_seeds(args.seeds) if args.seeds else [cfg.seed]
    until = None if args.until is None else int(round(args.until * 1000))
    jobs = [(data, overrides, seed, until, i) for i, overrides in enumerate(cells) for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for rows in results:
        w.writerows(rows)
    (out / "sweep.csv").write_text(buf.getvalue())
    log.info("sweep: %d cells x %d seeds", len(cells), len(seeds))
    return 0


def cmd_list(args) -> int:
    for name in bundled_scenarios():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccnsim", description="Discrete-event CCN simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", required=True, help="YAML file or bundled scenario name")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--until", type=float, default=None, help="simulated end time in ms")
    run.add_argument("--out", required=True)
    run.add_argument("--trace", action="store_true", help="also write trace.log")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("--scenario", required=True)
    val.set_defaults(func=cmd_validate)

    sw = sub.add_parser("sweep", help="grid x seeds, one engine per cell")
    sw.add_argument("--scenario", required=True)
    sw.add_argument("--grid", default=None, help="YAML mapping of parameter path -> list of values")
    sw.add_argument("--seeds", default=None, help="e.g. 1..5")
    sw.add_argument("--until", type=float, default=None)
    sw.add_argument("--out", required=True)
    sw.add_argument("--jobs", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)

    ls = sub.add_parser("list", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CCNSIM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
