"""
TOML run configuration.

One file describes one run. Top-level keys: ``mode`` (estimate | simulate),
``seed``, ``threads``, ``output_dir``; tables ``[data]``, ``[data.columns]``,
``[mapping]``, ``[model]``, ``[estimator]``, ``[variance]``, ``[simulation]``
and an array ``[[estimands]]``. See ``configs/`` for annotated examples.

Schema problems raise ConfigError. The blip model text is kept verbatim and
parsed later, so DSL errors surface as model errors, not config errors.
"""

from __future__ import annotations

import logging
import tomllib
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from app.config import settings
from app.core.exceptions import ConfigError, ModelSpecError
from app.panel.loading import PanelSchema
from app.simlab.dgp import DGP_NAMES, NOISE_CONVENTIONS
from app.snmm.blip import BUILTIN_MODELS
from app.snmm.estimands import EstimandSpec
from app.snmm.estimator import EstimatorConfig
from app.snmm.exposure_map import MAPPING_KINDS
from app.snmm.inference import VarianceConfig
from app.utils.validation import check_choice

logger = logging.getLogger(__name__)

T = TypeVar("T")

MODES = ("estimate", "simulate")
RECODINGS = ("none", "absorbing", "increments")

_TOP_KEYS = {
    "mode",
    "seed",
    "threads",
    "output_dir",
    "data",
    "mapping",
    "model",
    "estimator",
    "variance",
    "estimands",
    "simulation",
}


@dataclass(frozen=True, slots=True)
class DataConfig:
    panel: Path
    schema: PanelSchema
    graph: Path | None = None
    clusters: Path | None = None
    recode: str = "none"

    @property
    def structure(self) -> str:
        if self.graph is not None:
            return "network"
        if self.clusters is not None or self.schema.cluster:
            return "cluster"
        return "none"


@dataclass(frozen=True, slots=True)
class MappingConfig:
    kind: str = "neighbor_max"
    dimension: int | None = None
    radius: int | None = None


@dataclass(frozen=True, slots=True)
class SimulationConfig:
    dgp: str = "network_line"
    replicates: int = 500
    size: int = 5000
    noise_convention: str = "variance"
    noise_sd: float | None = None
    outcome_noise: bool = True
    naive_comparison: bool = False


@dataclass(frozen=True, slots=True)
class RunConfig:
    mode: str
    seed: int
    threads: int
    output_dir: Path
    model_text: str
    estimator: EstimatorConfig
    variance: VarianceConfig
    mapping: MappingConfig = MappingConfig()
    data: DataConfig | None = None
    estimands: tuple[EstimandSpec, ...] = ()
    simulation: SimulationConfig | None = None
    raw: Mapping[str, Any] = field(default_factory=dict)


def _get(table: Mapping[str, Any], key: str, kind: type[T] | tuple[type, ...], default: Any, where: str) -> Any:
    if key not in table:
        return default
    value = table[key]
    # bool is an int subclass; keep them apart
    if isinstance(value, bool) and kind in (int, float, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {value!r}", key=f"{where}.{key}")
    if kind is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, kind):
        raise ConfigError(
            f"{where}.{key} has type {type(value).__name__}, expected {getattr(kind, '__name__', kind)}",
            key=f"{where}.{key}",
        )
    return value


def _table(raw: Mapping[str, Any], key: str, allowed: set[str], where: str = "") -> Mapping[str, Any]:
    table = raw.get(key, {})
    name = f"{where}.{key}" if where else key
    if not isinstance(table, Mapping):
        raise ConfigError(f"[{name}] must be a table", key=name)
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{name}]: {', '.join(unknown)}", keys=unknown)
    return table


def _existing(base: Path, value: str | None, where: str) -> Path | None:
    if not value:
        return None
    path = Path(value)
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        raise ConfigError(f"{where} file not found: {path}", key=where, path=str(path))
    return path


def _parse_data(raw: Mapping[str, Any], base: Path) -> DataConfig:
    data = _table(raw, "data", {"panel", "graph", "clusters", "recode", "columns"})
    cols = _table(
        data,
        "columns",
        {"unit", "time", "exposure", "outcome", "covariates", "cluster", "x_km", "y_km", "delimiter", "alphabet"},
        "data",
    )
    covariates = _get(cols, "covariates", list, [], "data.columns")
    alphabet = _get(cols, "alphabet", list, None, "data.columns")
    schema = PanelSchema(
        unit=_get(cols, "unit", str, "unit", "data.columns"),
        time=_get(cols, "time", str, "time", "data.columns"),
        exposure=_get(cols, "exposure", str, "exposure", "data.columns"),
        outcome=_get(cols, "outcome", str, "outcome", "data.columns"),
        covariates=tuple(str(c) for c in covariates),
        cluster=_get(cols, "cluster", str, None, "data.columns"),
        x_km=_get(cols, "x_km", str, None, "data.columns"),
        y_km=_get(cols, "y_km", str, None, "data.columns"),
        delimiter=_get(cols, "delimiter", str, ",", "data.columns"),
        alphabet=None if alphabet is None else tuple(float(a) for a in alphabet),
    )
    panel = _existing(base, _get(data, "panel", str, None, "data"), "data.panel")
    if panel is None:
        raise ConfigError("data.panel is required", key="data.panel")
    graph = _existing(base, _get(data, "graph", str, None, "data"), "data.graph")
    clusters = _existing(base, _get(data, "clusters", str, None, "data"), "data.clusters")
    declared = sum(x is not None for x in (graph, clusters, schema.cluster))
    if declared > 1:
        raise ConfigError("Declare exactly one interference structure: graph, clusters or a cluster column")
    recode = check_choice(_get(data, "recode", str, "none", "data"), RECODINGS, "data.recode")
    return DataConfig(panel=panel, schema=schema, graph=graph, clusters=clusters, recode=recode)


def _parse_model(raw: Mapping[str, Any]) -> str:
    model = _table(raw, "model", {"builtin", "spec"})
    builtin = _get(model, "builtin", str, None, "model")
    spec = _get(model, "spec", str, None, "model")
    if (builtin is None) == (spec is None):
        raise ConfigError("[model] needs exactly one of 'builtin' or 'spec'")
    if builtin is not None:
        return BUILTIN_MODELS[check_choice(builtin, tuple(BUILTIN_MODELS), "model.builtin")]
    assert spec is not None
    return spec


def _parse_estimator(raw: Mapping[str, Any]) -> EstimatorConfig:
    est = _table(raw, "estimator", {"treatment_strategy", "trend_strategy", "extra_s", "tolerance"})
    try:
        return EstimatorConfig(
            treatment_strategy=_get(est, "treatment_strategy", str, "saturated", "estimator"),
            trend_strategy=_get(est, "trend_strategy", str, "saturated", "estimator"),
            extra_s=_get(est, "extra_s", str, None, "estimator"),
            tolerance=_get(est, "tolerance", float, settings.SCORE_TOLERANCE, "estimator"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_variance(raw: Mapping[str, Any], seed: int) -> VarianceConfig:
    var = _table(
        raw,
        "variance",
        {"method", "kernel", "bandwidth", "max_lag", "block_length", "replicates", "hex_width_km"},
    )
    return VarianceConfig(
        method=_get(var, "method", str, "sandwich", "variance"),
        kernel=_get(var, "kernel", str, "bartlett", "variance"),
        bandwidth=_get(var, "bandwidth", float, None, "variance"),
        max_lag=_get(var, "max_lag", int, None, "variance"),
        block_length=_get(var, "block_length", int, None, "variance"),
        replicates=_get(var, "replicates", int, 200, "variance"),
        hex_width_km=_get(var, "hex_width_km", float, None, "variance"),
        seed=seed,
    )


def _history(value: Any, where: str) -> tuple[tuple[float, tuple[float, ...]], ...]:
    if not isinstance(value, list):
        raise ConfigError(f"{where} must be a list of [a, h] pairs", key=where)
    out = []
    for item in value:
        if not isinstance(item, list) or len(item) != 2:
            raise ConfigError(f"{where} entries must be [a, h] pairs, got {item!r}", key=where)
        a, h = item
        h_vec = tuple(float(x) for x in h) if isinstance(h, list) else (float(h),)
        out.append((float(a), h_vec))
    return tuple(out)


def _parse_estimands(raw: Mapping[str, Any]) -> tuple[EstimandSpec, ...]:
    items = raw.get("estimands", [])
    if not isinstance(items, list):
        raise ConfigError("[[estimands]] must be an array of tables")
    allowed = {"kind", "k", "m", "selector", "history", "covariates", "member", "label"}
    specs = []
    for n, item in enumerate(items):
        where = f"estimands[{n}]"
        if not isinstance(item, Mapping):
            raise ConfigError(f"{where} must be a table")
        unknown = sorted(set(item) - allowed)
        if unknown:
            raise ConfigError(f"Unknown key(s) in {where}: {', '.join(unknown)}", keys=unknown)
        if "k" not in item or "kind" not in item:
            raise ConfigError(f"{where} needs 'kind' and 'k'")
        covariates = _get(item, "covariates", list, None, where)
        try:
            specs.append(
                EstimandSpec(
                    kind=_get(item, "kind", str, None, where),
                    k=_get(item, "k", int, None, where),
                    m=_get(item, "m", int, None, where),
                    selector=_get(item, "selector", str, None, where),
                    history=_history(item["history"], f"{where}.history") if "history" in item else None,
                    covariates=None if covariates is None else tuple(tuple(float(x) for x in row) for row in covariates),
                    member=_get(item, "member", int, None, where),
                    label=_get(item, "label", str, None, where),
                )
            )
        except ModelSpecError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return tuple(specs)


def _parse_simulation(raw: Mapping[str, Any]) -> SimulationConfig:
    sim = _table(
        raw,
        "simulation",
        {"dgp", "replicates", "size", "noise_convention", "noise_sd", "outcome_noise", "naive_comparison"},
    )
    config = SimulationConfig(
        dgp=check_choice(_get(sim, "dgp", str, "network_line", "simulation"), DGP_NAMES, "simulation.dgp"),
        replicates=_get(sim, "replicates", int, 500, "simulation"),
        size=_get(sim, "size", int, 5000, "simulation"),
        noise_convention=check_choice(
            _get(sim, "noise_convention", str, "variance", "simulation"), NOISE_CONVENTIONS, "simulation.noise_convention"
        ),
        noise_sd=_get(sim, "noise_sd", float, None, "simulation"),
        outcome_noise=_get(sim, "outcome_noise", bool, True, "simulation"),
        naive_comparison=_get(sim, "naive_comparison", bool, False, "simulation"),
    )
    if config.replicates < 2:
        raise ConfigError(f"simulation.replicates must be >= 2, got {config.replicates}", key="simulation.replicates")
    if config.size < 1:
        raise ConfigError(f"simulation.size must be >= 1, got {config.size}", key="simulation.size")
    if config.naive_comparison and config.dgp != "network_line":
        raise ConfigError("simulation.naive_comparison needs the network_line design")
    return config


def parse_run_config(
    raw: Mapping[str, Any],
    base_dir: Path | None = None,
    *,
    seed: int | None = None,
    threads: int | None = None,
    output_dir: Path | None = None,
) -> RunConfig:
    """Validate a decoded TOML document; keyword arguments are CLI overrides."""
    base = base_dir or Path.cwd()
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"Unknown top-level key(s): {', '.join(unknown)}", keys=unknown)
    mode = check_choice(_get(raw, "mode", str, None, "run") or "", MODES, "mode")
    run_seed = seed if seed is not None else _get(raw, "seed", int, settings.DEFAULT_SEED, "run")
    run_threads = threads if threads is not None else _get(raw, "threads", int, settings.THREADS, "run")
    out = output_dir or Path(_get(raw, "output_dir", str, str(settings.OUTPUT_BASE_DIR), "run"))

    variance = _parse_variance(raw, run_seed)
    estimator = _parse_estimator(raw)
    mapping_t = _table(raw, "mapping", {"kind", "dimension", "radius"})
    mapping = MappingConfig(
        kind=check_choice(_get(mapping_t, "kind", str, "neighbor_max", "mapping"), MAPPING_KINDS - {"custom"}, "mapping.kind"),
        dimension=_get(mapping_t, "dimension", int, None, "mapping"),
        radius=_get(mapping_t, "radius", int, None, "mapping"),
    )

    if mode == "estimate":
        if "simulation" in raw:
            raise ConfigError("[simulation] is only valid with mode = 'simulate'")
        data = _parse_data(raw, base)
        if mapping.kind == "identity_cluster" and data.structure != "cluster":
            raise ConfigError("mapping.kind 'identity_cluster' needs a cluster map")
        if mapping.kind in ("neighbor_max", "neighbor_sum", "neighbor_mean", "weighted_sum") and data.structure != "network":
            raise ConfigError(f"mapping.kind {mapping.kind!r} needs data.graph")
        return RunConfig(
            mode=mode,
            seed=run_seed,
            threads=run_threads,
            output_dir=out,
            model_text=_parse_model(raw),
            estimator=estimator,
            variance=variance,
            mapping=mapping,
            data=data,
            estimands=_parse_estimands(raw),
            raw=dict(raw),
        )

    if "data" in raw:
        raise ConfigError("[data] is only valid with mode = 'estimate'")
    simulation = _parse_simulation(raw)
    return RunConfig(
        mode=mode,
        seed=run_seed,
        threads=run_threads,
        output_dir=out,
        model_text="",
        estimator=estimator,
        variance=variance,
        mapping=mapping,
        simulation=simulation,
        raw=dict(raw),
    )


def load_run_config(path: str | Path, **overrides: Any) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {path}", path=str(path)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Invalid TOML in {path}: {exc}", path=str(path)) from exc
    config = parse_run_config(raw, path.parent, **overrides)
    logger.info("config.loaded path=%s mode=%s seed=%d", path, config.mode, config.seed)
    return config
