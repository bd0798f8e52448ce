"""
Command-line front end.

    python main.py estimate configs/application_style.toml
    python main.py simulate configs/network_line.toml --threads 8
    python main.py validate configs/application_style.toml
    python main.py synth-counties --out data/

Exit codes: 0 success, 2 config or data error, 3 model or estimation error,
1 anything else. Errors are written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from app.cli.report import dumps, write_estimate_report, write_simulation_report
from app.config import settings, strings
from app.config.run_config import RunConfig, load_run_config
from app.core.exceptions import ConfigError, DataError, EstimationError, ModelSpecError, SnmmError
from app.core.logging import setup_logging
from app.core.types import PanelDataset
from app.panel.loading import (
    PanelSchema,
    load_clusters,
    load_graph,
    load_panel,
    validate_panel,
    write_graph,
    write_panel,
)
from app.simlab.dgp import ClusterDGPConfig, NetworkDGPConfig, synthetic_county_lattice
from app.simlab.monte_carlo import naive_comparison, run_monte_carlo
from app.snmm.blip import BlipModel, parse_blip_spec
from app.snmm.estimator import solve_psi
from app.snmm.exposure_map import MappedPanel, MappingSpec, apply_mapping, recode_absorbing, recode_increments
from app.snmm.inference import infer
from app.utils.filesystem import ensure_output_dir

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_ESTIMATION = 3


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, DataError)):
        return EXIT_CONFIG
    if isinstance(exc, (ModelSpecError, EstimationError)):
        return EXIT_ESTIMATION
    return EXIT_FAILURE


def _overrides(args: argparse.Namespace) -> dict[str, object]:
    return {
        "seed": args.seed,
        "threads": args.threads,
        "output_dir": Path(args.output_dir) if args.output_dir else None,
    }


def load_data(config: RunConfig) -> PanelDataset:
    """Panel plus its declared structure, recoded as configured."""
    data = config.data
    if data is None:
        raise ConfigError("This command needs a [data] table")
    panel = load_panel(str(data.panel), data.schema)
    if data.graph is not None:
        graph = load_graph(str(data.graph), panel.unit_ids)
        if panel.coordinates is not None:
            graph = graph.with_coordinates(panel.coordinates)
        panel = panel.evolve(structure=graph)
    elif data.clusters is not None:
        panel = panel.evolve(structure=load_clusters(str(data.clusters), panel.unit_ids))
    if data.recode == "absorbing":
        panel = recode_absorbing(panel)
    elif data.recode == "increments":
        panel = recode_increments(panel)
    return panel


def prepare(config: RunConfig) -> tuple[MappedPanel, BlipModel]:
    panel = load_data(config)
    spec = MappingSpec(kind=config.mapping.kind, dimension=config.mapping.dimension, radius=config.mapping.radius)
    mapped = apply_mapping(panel, spec)
    model = parse_blip_spec(config.model_text)
    return mapped, model


def cmd_estimate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, **_overrides(args))
    if config.mode != "estimate":
        raise ConfigError(f"'estimate' needs mode = 'estimate', config has {config.mode!r}")
    mapped, model = prepare(config)
    logger.info(strings.MESSAGES["estimate_start"].format(n_params=model.n_params, n_groups=mapped.n_groups))
    result = solve_psi(mapped, model, config.estimator)
    variance, rows = infer(result, config.variance, config.estimands, config.threads)
    text = write_estimate_report(config, result, variance, rows)
    sys.stdout.write(text)
    logger.info(strings.MESSAGES["estimate_done"].format(path=config.output_dir))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, **_overrides(args))
    if config.mode != "simulate" or config.simulation is None:
        raise ConfigError(f"'simulate' needs mode = 'simulate', config has {config.mode!r}")
    sim = config.simulation
    common = {
        "seed": config.seed,
        "noise_sd": sim.noise_sd,
        "noise_convention": sim.noise_convention,
        "outcome_noise": sim.outcome_noise,
    }
    dgp: NetworkDGPConfig | ClusterDGPConfig
    if sim.dgp == "network_line":
        dgp = NetworkDGPConfig(n_units=sim.size, **common)  # type: ignore[arg-type]
    else:
        dgp = ClusterDGPConfig(n_clusters=sim.size, **common)  # type: ignore[arg-type]
    variance = config.variance if "variance" in config.raw else None
    logger.info(strings.MESSAGES["simulate_start"].format(replicates=sim.replicates, dgp=sim.dgp))
    if sim.naive_comparison:
        assert isinstance(dgp, NetworkDGPConfig)
        report = naive_comparison(dgp, sim.replicates, config.estimator, variance, config.threads)
    else:
        report = run_monte_carlo(dgp, config.estimator, variance, sim.replicates, config.threads)
    text = write_simulation_report(config, report)
    sys.stdout.write(text)
    logger.info(strings.MESSAGES["simulate_done"].format(path=config.output_dir))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, **_overrides(args))
    panel = load_data(config)
    data = config.data
    assert data is not None
    report = validate_panel(panel, data.schema.alphabet)
    sys.stdout.write(dumps(report.to_dict()))
    if report.accepted:
        logger.info(strings.MESSAGES["validate_ok"])
        return EXIT_OK
    logger.error(strings.MESSAGES["validate_failed"].format(n_errors=len(report.errors)))
    return EXIT_CONFIG


def cmd_synth_counties(args: argparse.Namespace) -> int:
    out = ensure_output_dir(Path(args.out))
    seed = args.seed if args.seed is not None else settings.DEFAULT_SEED
    lattice = synthetic_county_lattice(args.n_side, args.spacing_km, seed)
    panel = lattice.mapped.panel
    schema = PanelSchema(x_km="x_km", y_km="y_km")
    with (out / "counties.csv").open("w", encoding="utf-8", newline="") as fh:
        write_panel(panel, fh, schema)
    graph = panel.graph
    assert graph is not None
    with (out / "counties.edges").open("w", encoding="utf-8") as fh:
        write_graph(graph, fh, panel.unit_ids)
    logger.info(strings.MESSAGES["synth_done"].format(path=out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snmm-interference",
        description="Difference-in-differences structural nested mean models under interference.",
    )
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL (DEBUG, INFO, ...)")
    parser.add_argument("--log-json", action="store_true", default=None, help="JSON log lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_parser(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None, help="Worker threads (0 = all cores)")
        p.add_argument("--output-dir", default=None)
        return p

    run_parser("estimate", "Fit psi, variance and estimands on a data set").set_defaults(func=cmd_estimate)
    run_parser("simulate", "Monte Carlo study on a simulated design").set_defaults(func=cmd_simulate)
    run_parser("validate", "Check a panel and its structure without fitting").set_defaults(func=cmd_validate)

    synth = sub.add_parser("synth-counties", help="Write a synthetic county panel and border graph")
    synth.add_argument("--out", required=True)
    synth.add_argument("--n-side", type=int, default=20)
    synth.add_argument("--spacing-km", type=float, default=25.0)
    synth.add_argument("--seed", type=int, default=None)
    synth.set_defaults(func=cmd_synth_counties)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.log_json)
    try:
        return int(args.func(args))
    except SnmmError as exc:
        code = exit_code_for(exc)
        sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True, default=str) + "\n")
        logger.debug("cli.failed code=%s exit=%d", exc.code, code)
        return code
    except Exception as exc:  # noqa: BLE001
        logger.exception("cli.crashed")
        sys.stderr.write(json.dumps({"code": "internal_error", "message": str(exc)}) + "\n")
        return EXIT_FAILURE
