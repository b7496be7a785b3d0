from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from iconasim import cli
from iconasim.metrics import aggregate, group, read_csv
from iconasim.scenario import Results

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = {"name": "small", "kind": "reroute-grid", "topology": {"grid": [4, 4], "delay_ms": 5.0},
         "partition": "grid", "clusters": [1, 4], "paths_total": 100, "paths_on_failed_link": 20,
         "repetitions": 3}


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_run_writes_outputs(small, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", str(small), "--out", str(out), "--trace", str(out / "trace.txt")]) == 0
    for name in ("results.csv", "results.svg", "trace.txt"):
        assert (out / name).stat().st_size > 0
    printed = capsys.readouterr().out
    samples, aggs = read_csv(out / "results.csv")
    for (scenario, plane), items in group(samples).items():
        agg = aggregate(items)
        assert aggs[(scenario, plane)] == agg
        assert f"{agg.avg_ms:.3f}" in printed


def test_run_is_byte_identical(small, tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert cli.main(["run", str(small), "--out", str(d), "--trace", str(d / "trace.txt")]) == 0
        outs.append(((d / "results.csv").read_bytes(), (d / "trace.txt").read_bytes()))
    assert outs[0] == outs[1]


def test_overrides(small, tmp_path):
    assert cli.main(["run", str(small), "--out", str(tmp_path), "--reps", "2", "--seed", "5"]) == 0
    samples, _ = read_csv(tmp_path / "results.csv")
    assert len(samples) == 4


@pytest.mark.parametrize("argv", [
    ["micro", "no-such-scenario"],
    ["run", "/nonexistent/config.json"],
])
def test_errors_exit_1(argv, capsys):
    assert cli.main(argv) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**SMALL, "clusters": [3]}))
    assert cli.main(["run", str(p), "--out", str(tmp_path)]) == 1


def test_invariant_violation_exits_2(small, tmp_path, monkeypatch):
    real = cli.run

    def broken(cfg, trace=False):
        res = real(cfg, trace)
        res.details[0].violations.append("injected")
        return res

    monkeypatch.setattr(cli, "run", broken)
    assert cli.main(["run", str(small), "--out", str(tmp_path)]) == 2


def test_micro_prints_trace_and_verdict(capsys):
    assert cli.main(["micro", "twophase-nack"]) == 0
    out = capsys.readouterr().out
    assert "ReserveNack" in out and out.rstrip().endswith("twophase-nack: PASS")


def test_sweep(tmp_path):
    assert cli.main(["sweep", "grid", "--sizes", "4", "--clusters", "1,4", "--reps", "2",
                     "--out", str(tmp_path)]) == 0
    samples, _ = read_csv(tmp_path / "results.csv")
    assert {s.control_plane for s in samples} == {"ONOS", "ICONA-4"}


def test_calibrate_startup(capsys):
    assert cli.main(["calibrate", str(CONFIGS / "geant-startup.json"), "--target-ms", "6980"]) == 0
    assert json.loads(capsys.readouterr().out)["handshake_ms"] > 0


def test_shipped_configs_parse():
    from iconasim.scenario import ScenarioConfig

    names = sorted(p.name for p in CONFIGS.glob("*.json"))
    assert names
    for name in names:
        cfg = ScenarioConfig.from_json(CONFIGS / name)
        cfg.build_topology()


def test_module_entry_point(small, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "iconasim.cli", "micro", "lldp-il"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS" in proc.stdout
