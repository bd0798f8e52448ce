"""End-to-end tests for the command-line front end."""

import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.cli import commands
from app.cli.commands import exit_code_for, main
from app.cli.report import dumps, to_jsonable
from app.core.exceptions import BootstrapError, ConfigError, LeakageError, NotAbsorbing, SnmmError

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr(commands, "setup_logging", lambda *args, **kwargs: None)


@pytest.fixture
def counties(tmp_path):
    out = tmp_path / "data"
    assert main(["synth-counties", "--out", str(out), "--seed", "5"]) == 0
    return out


def _error_line(err: str) -> dict:
    for line in reversed(err.strip().splitlines()):
        if line.startswith("{"):
            return json.loads(line)
    raise AssertionError(f"no JSON error line in {err!r}")


def _estimate_config(path, counties, *, model='builtin = "application"', variance='method = "sandwich"', graph=True):
    graph_line = f'graph = "{counties / "counties.edges"}"' if graph else ""
    path.write_text(
        f"""
mode = "estimate"
seed = 7

[data]
panel = "{counties / "counties.csv"}"
{graph_line}
recode = "absorbing"

[data.columns]
x_km = "x_km"
y_km = "y_km"
alphabet = [0, 1]

[model]
{model}

[variance]
{variance}

[[estimands]]
kind = "blip_at"
m = 0
k = 1
history = [[1, 1]]
label = "gamma_{{0,1}}(a_0=1,h_0=1)"

[[estimands]]
kind = "subgroup_blip_mean"
m = 1
k = 2
selector = "a[m] == 0 & h[m][0] == 1"

[[estimands]]
kind = "untreated_trajectory"
k = 2
""",
        encoding="utf-8",
    )
    return path


def test_synth_counties_writes_panel_and_graph(counties):
    panel = pd.read_csv(counties / "counties.csv")
    assert list(panel.columns) == ["unit", "time", "exposure", "outcome", "x_km", "y_km"]
    assert len(panel) == 400 * 3
    assert (counties / "counties.edges").read_text().strip()


def test_validate(tmp_path, counties, capsys):
    config = _estimate_config(tmp_path / "run.toml", counties)
    assert main(["validate", str(config)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["accepted"] is True
    assert report["errors"] == []


def test_estimate_writes_reproducible_outputs(tmp_path, counties, capsys):
    config = _estimate_config(tmp_path / "run.toml", counties)
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["estimate", str(config), "--output-dir", str(first)]) == 0
    assert main(["estimate", str(config), "--output-dir", str(second), "--threads", "2"]) == 0
    assert "Blip parameters" in capsys.readouterr().out

    for name in ("report.json", "psi.csv", "estimands.csv", "report.txt"):
        assert (first / name).is_file()
    assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()

    psi = pd.read_csv(first / "psi.csv")
    assert list(psi.columns) == ["label", "estimate", "se", "ci_low", "ci_high"]
    assert len(psi) == 11
    assert (psi.se > 0).all()

    estimands = pd.read_csv(first / "estimands.csv")
    assert len(estimands) == 3
    assert estimands.loc[0, "name"] == "gamma_{0,1}(a_0=1,h_0=1)"
    assert estimands.method.unique().tolist() == ["sandwich"]

    report = json.loads((first / "report.json").read_text())
    assert report["seed"] == 7
    assert report["variance"]["method"] == "sandwich"


def test_missing_graph_file_exits_2(tmp_path, counties, capsys):
    config = _estimate_config(tmp_path / "run.toml", counties)
    config.write_text(config.read_text().replace("counties.edges", "missing.edges"))
    assert main(["estimate", str(config)]) == 2
    assert _error_line(capsys.readouterr().err)["code"] == "config_error"


def test_neighbor_mapping_without_graph_exits_2(tmp_path, counties, capsys):
    config = _estimate_config(tmp_path / "run.toml", counties, graph=False)
    assert main(["estimate", str(config)]) == 2


def test_zero_constraint_violation_exits_3(tmp_path, counties, capsys):
    model = 'spec = """\n[m=1,k=2]\nbad: h[m-1][0]\n"""'
    config = _estimate_config(tmp_path / "run.toml", counties, model=model)
    assert main(["estimate", str(config), "--output-dir", str(tmp_path / "out")]) == 3
    error = _error_line(capsys.readouterr().err)
    assert error["code"] == "zero_constraint_violation"
    assert error["details"]["label"] == "bad"


def test_simulate_with_bad_replicates_exits_2(tmp_path, capsys):
    config = tmp_path / "sim.toml"
    config.write_text('mode = "simulate"\n[simulation]\nreplicates = 0\n')
    assert main(["simulate", str(config)]) == 2
    assert _error_line(capsys.readouterr().err)["details"]["key"] == "simulation.replicates"


def test_simulate_cluster_design(tmp_path, capsys):
    config = tmp_path / "sim.toml"
    config.write_text(
        'mode = "simulate"\nseed = 3\n[simulation]\ndgp = "cluster_pairs"\nreplicates = 2\nsize = 200\n'
    )
    out = tmp_path / "mc"
    assert main(["simulate", str(config), "--output-dir", str(out), "--threads", "1"]) == 0
    table = pd.read_csv(out / "montecarlo.csv")
    assert len(table) == 7
    assert table.replicates.tolist() == [2] * 7
    assert "cluster_pairs" in capsys.readouterr().out


def test_mode_mismatch_exits_2():
    assert main(["estimate", str(CONFIGS / "cluster_pairs.toml")]) == 2


def test_exit_codes():
    assert exit_code_for(ConfigError("x")) == 2
    assert exit_code_for(NotAbsorbing("x")) == 2
    assert exit_code_for(LeakageError("x")) == 3
    assert exit_code_for(BootstrapError("x")) == 3
    assert exit_code_for(SnmmError("x")) == 1
    assert exit_code_for(RuntimeError("x")) == 1


def test_to_jsonable():
    payload = {"se": math.nan, "psi": np.array([1.0, np.inf]), "n": np.int64(3), "ok": np.bool_(True)}
    assert to_jsonable(payload) == {"se": None, "psi": [1.0, None], "n": 3, "ok": True}
    assert dumps({"b": 1, "a": 2}).index('"a"') < dumps({"b": 1, "a": 2}).index('"b"')
