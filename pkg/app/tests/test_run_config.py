"""Tests for the TOML run configuration."""

from pathlib import Path

import pytest

from app.config.run_config import load_run_config, parse_run_config
from app.core.exceptions import ConfigError
from app.snmm.blip import BUILTIN_MODELS

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


def _estimate_raw(**extra):
    raw = {
        "mode": "estimate",
        "data": {"panel": "panel.csv", "graph": "panel.edges"},
        "model": {"builtin": "network_saturated"},
    }
    raw.update(extra)
    return raw


@pytest.fixture
def data_dir(tmp_path):
    (tmp_path / "panel.csv").write_text("unit,time,exposure,outcome\n")
    (tmp_path / "panel.edges").write_text("")
    return tmp_path


def test_shipped_network_config():
    config = load_run_config(CONFIGS / "network_line.toml")
    assert config.mode == "simulate"
    assert config.simulation.dgp == "network_line"
    assert config.simulation.replicates == 500
    assert config.variance.method == "mbb"
    assert config.variance.block_length == 5
    assert config.variance.seed == config.seed


def test_shipped_cluster_config_with_overrides(tmp_path):
    config = load_run_config(CONFIGS / "cluster_pairs.toml", seed=3, threads=2, output_dir=tmp_path)
    assert config.simulation.dgp == "cluster_pairs"
    assert config.seed == 3
    assert config.variance.seed == 3
    assert config.threads == 2
    assert config.output_dir == tmp_path


def test_estimate_config(data_dir):
    raw = _estimate_raw(
        variance={"method": "hac", "kernel": "parzen", "bandwidth": 3},
        estimands=[
            {"kind": "blip_at", "m": 0, "k": 1, "history": [[1, 0]]},
            {"kind": "subgroup_blip_mean", "m": 1, "k": 2, "selector": "a[m] == 1"},
            {"kind": "untreated_trajectory", "k": 2},
        ],
    )
    config = parse_run_config(raw, data_dir)
    assert config.data.panel == data_dir / "panel.csv"
    assert config.data.structure == "network"
    assert config.model_text == BUILTIN_MODELS["network_saturated"]
    assert config.variance.bandwidth == 3.0
    assert config.estimands[0].history == ((1.0, (0.0,)),)
    assert [s.kind for s in config.estimands] == ["blip_at", "subgroup_blip_mean", "untreated_trajectory"]


def test_inline_model_spec(data_dir):
    raw = _estimate_raw(model={"spec": "psi1: a[m]\n"})
    assert parse_run_config(raw, data_dir).model_text == "psi1: a[m]\n"


@pytest.mark.parametrize(
    "change",
    [
        {"colour": "blue"},
        {"mode": "fit"},
        {"seed": True},
        {"model": {"builtin": "network_saturated", "spec": "psi1: a[m]\n"}},
        {"model": {"builtin": "unknown"}},
        {"estimator": {"treatment_strategy": "forest"}},
        {"variance": {"method": "mbb"}},
        {"variance": {"method": "jackknife"}},
        {"mapping": {"kind": "identity_cluster"}},
        {"estimands": [{"kind": "blip_at", "k": 1}]},
        {"estimands": [{"kind": "blip_at", "m": 0, "k": 1, "history": [1, 0]}]},
        {"simulation": {"dgp": "network_line"}},
    ],
)
def test_estimate_config_errors(data_dir, change):
    with pytest.raises(ConfigError):
        parse_run_config(_estimate_raw(**change), data_dir)


def test_missing_panel_file(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_run_config(_estimate_raw(), tmp_path)
    assert exc.value.details["key"] == "data.panel"


def test_neighbor_mapping_needs_graph(data_dir):
    raw = _estimate_raw(data={"panel": "panel.csv"})
    with pytest.raises(ConfigError):
        parse_run_config(raw, data_dir)


def test_simulation_errors():
    with pytest.raises(ConfigError):
        parse_run_config({"mode": "simulate", "simulation": {"replicates": 1}})
    with pytest.raises(ConfigError):
        parse_run_config({"mode": "simulate", "simulation": {"dgp": "grid"}})
    with pytest.raises(ConfigError):
        parse_run_config({"mode": "simulate", "simulation": {"dgp": "cluster_pairs", "naive_comparison": True}})
    with pytest.raises(ConfigError):
        parse_run_config({"mode": "simulate", "data": {"panel": "x.csv"}})


def test_simulation_defaults():
    config = parse_run_config({"mode": "simulate", "simulation": {"noise_sd": 0}})
    assert config.simulation.size == 5000
    assert config.simulation.noise_sd == 0.0
    assert config.variance.method == "sandwich"


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("mode = \n")
    with pytest.raises(ConfigError):
        load_run_config(broken)
