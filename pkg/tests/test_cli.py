import csv
import io
import os
import subprocess
import sys
import time

import pytest

from ccnsim import cli
from ccnsim.metrics import ATTACK_COLUMNS, METRICS_COLUMNS
from ccnsim.scenario import bundled_scenarios


def run_cli(*args):
    return cli.main([str(a) for a in args])


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def header(path):
    return tuple(path.read_text().splitlines()[0].split(","))


def test_golden_headers(tmp_path):
    assert run_cli("run", "--scenario", "enumeration", "--out", tmp_path) == 0
    assert header(tmp_path / "metrics.csv") == METRICS_COLUMNS == ("scenario_id", "seed", "entity", "metric", "value")
    assert header(tmp_path / "attack_results.csv") == ATTACK_COLUMNS == (
        "scenario_id", "seed", "attack_id", "variant", "param_hash", "metric", "value")
    assert rows(tmp_path / "attack_results.csv")
    assert not (tmp_path / "trace.log").exists()


def test_baseline_metrics_nonempty_and_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("run", "--scenario", "baseline", "--seed", 11, "--out", out, "--trace") == 0
    assert len(rows(a / "metrics.csv")) > 20
    for f in ("metrics.csv", "attack_results.csv", "trace.log"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert {r["seed"] for r in rows(a / "metrics.csv")} == {"11"}


def test_until_shortens_run(tmp_path):
    assert run_cli("run", "--scenario", "baseline", "--until", 1000, "--out", tmp_path / "s") == 0
    assert run_cli("run", "--scenario", "baseline", "--out", tmp_path / "l") == 0

    def sent(d):
        return int(next(r["value"] for r in rows(d / "metrics.csv") if r["entity"] == "u1" and r["metric"] == "sent"))

    assert sent(tmp_path / "s") < sent(tmp_path / "l")


def write(tmp_path, text, fname="s.yaml"):
    p = tmp_path / fname
    p.write_text(text)
    return p


GOOD = """
schema_version: 1
id: tiny
t_end_ms: 500
routers: {r: {}}
hosts: [h]
producers: {p: {prefix: /p}}
links:
  - {a: h, b: r, delay_ms: 1}
  - {a: r, b: p, delay_ms: 1}
workloads:
  - {host: h, rate_per_s: 10, names: unique, prefix: /p}
"""


def test_validate_ok(tmp_path, capsys):
    assert run_cli("validate", "--scenario", write(tmp_path, GOOD)) == 0
    assert "ok: tiny" in capsys.readouterr().out


def test_validate_names_unknown_link_end(tmp_path, capsys):
    bad = GOOD.replace("{a: r, b: p, delay_ms: 1}", "{a: r, b: ghost, delay_ms: 1}")
    assert run_cli("validate", "--scenario", write(tmp_path, bad)) == 1
    assert "ghost" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["", "just a string", "schema_version: 1\nid: x\nbogus_field: 3\n"])
def test_validate_rejects_broken_files(tmp_path, capsys, text):
    assert run_cli("validate", "--scenario", write(tmp_path, text)) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_missing_scenario_file(tmp_path):
    assert run_cli("validate", "--scenario", tmp_path / "nope.yaml") == 1


def test_list_shows_bundled(capsys):
    assert run_cli("list") == 0
    listed = capsys.readouterr().out.split()
    assert listed == bundled_scenarios() and "baseline" in listed


@pytest.mark.parametrize("text,expected", [("3", [3]), ("1..5", [1, 2, 3, 4, 5]), ("1,4,9", [1, 4, 9]),
                                           (" 2..2 ", [2])])
def test_parse_seeds(text, expected):
    assert cli.parse_seeds(text) == expected


@pytest.mark.parametrize("text", ["5..1", "a", "1..x"])
def test_parse_seeds_rejects(text):
    with pytest.raises(ValueError):
        cli.parse_seeds(text)


def test_sweep_grid_times_seeds(tmp_path):
    grid = write(tmp_path, "router_defaults.cs_capacity: [1, 10, 50]\nworkloads.0.rate_per_s: [5, 10, 20]\n",
                 "grid.yaml")
    scen = write(tmp_path, GOOD)
    assert run_cli("sweep", "--scenario", scen, "--grid", grid, "--seeds", "1..5", "--out", tmp_path / "o") == 0
    out = rows(tmp_path / "o" / "sweep.csv")
    assert header(tmp_path / "o" / "sweep.csv") == cli.SWEEP_COLUMNS
    assert len({(r["cell"], r["seed"]) for r in out}) == 45
    assert len(out) >= 45


def test_sweep_parallel_matches_serial(tmp_path):
    grid = write(tmp_path, "router_defaults.cs_capacity: [1, 50]\n", "grid.yaml")
    scen = write(tmp_path, GOOD)
    run_cli("sweep", "--scenario", scen, "--grid", grid, "--seeds", "1..2", "--out", tmp_path / "a")
    run_cli("sweep", "--scenario", scen, "--grid", grid, "--seeds", "1..2", "--out", tmp_path / "b", "--jobs", 2)
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_sweep_unknown_path_fails_before_running(tmp_path, monkeypatch, capsys):
    calls = []
    monkeypatch.setattr(cli, "_run_cell", lambda job: calls.append(job) or [])
    grid = write(tmp_path, "router_defaults.cs_capacity: [1]\nrouters.nowhere.x: [1]\n", "grid.yaml")
    assert run_cli("sweep", "--scenario", write(tmp_path, GOOD), "--grid", grid, "--out", tmp_path / "o") == 1
    assert calls == []
    assert "nowhere" in capsys.readouterr().err


def test_sweep_empty_grid_is_single_run(tmp_path):
    grid = write(tmp_path, "{}\n", "grid.yaml")
    assert run_cli("sweep", "--scenario", write(tmp_path, GOOD), "--grid", grid, "--out", tmp_path / "o") == 0
    out = rows(tmp_path / "o" / "sweep.csv")
    assert {(r["cell"], r["params"]) for r in out} == {("0", "{}")}


def test_per_domain_limit_tradeoff(tmp_path):
    grid = write(tmp_path, "routers.edge.per_domain_limit: [null, 100, 10]\n", "grid.yaml")
    assert run_cli("sweep", "--scenario", "ifa", "--grid", grid, "--out", tmp_path / "o") == 0
    out = rows(tmp_path / "o" / "sweep.csv")

    def metric(cell, entity, name):
        return float(next(r["value"] for r in out
                          if r["cell"] == str(cell) and r["entity"] == entity and r["metric"] == name))

    peaks = [metric(c, "edge", "pit_peak") for c in range(3)]
    users = [metric(c, "user", "satisfaction_ratio") for c in range(3)]
    # tighter limits shrink the flood's PIT footprint...
    assert peaks[0] > peaks[1] > peaks[2]
    # ...until the limit also starves the legitimate user
    assert users[1] >= 0.95 * users[0]
    assert users[2] < 0.8 * users[0]


@pytest.mark.parametrize("scenario", bundled_scenarios())
def test_bundled_scenario_runs_quickly(tmp_path, scenario):
    t0 = time.perf_counter()
    assert run_cli("run", "--scenario", scenario, "--out", tmp_path) == 0
    assert time.perf_counter() - t0 < 60
    assert rows(tmp_path / "metrics.csv")


def test_module_entry_point(tmp_path):
    env = dict(os.environ, CCNSIM_LOG="INFO", CCNSIM_AUDIT="1")
    proc = subprocess.run([sys.executable, "-m", "ccnsim", "run", "--scenario", "enumeration", "--out",
                           str(tmp_path)], capture_output=True, text=True, env=env, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "ran enumeration" in proc.stderr
