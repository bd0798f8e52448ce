"""
Run outputs.

Every run writes ``report.json`` (sorted keys, no timestamps, so identical
configs give identical bytes) next to a human ``report.txt`` and CSV tables.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from app.config import strings
from app.config.run_config import RunConfig
from app.simlab.monte_carlo import MonteCarloReport
from app.snmm.estimands import EstimandEstimate
from app.snmm.estimator import EstimationResult
from app.snmm.variance import VarianceEstimate
from app.utils.filesystem import atomic_write_text, ensure_output_dir

logger = logging.getLogger(__name__)

_FLOAT_FORMAT = "%.10g"


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        f = float(value)
        return f if math.isfinite(f) else None
    if isinstance(value, Path):
        return str(value)
    if value is None or isinstance(value, str):
        return value
    return str(value)


def dumps(payload: Mapping[str, Any]) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def psi_frame(result: EstimationResult, variance: VarianceEstimate | None) -> pd.DataFrame:
    table = pd.DataFrame({"label": result.labels, "estimate": result.psi_hat})
    if variance is None:
        for col in ("se", "ci_low", "ci_high"):
            table[col] = np.nan
    else:
        ci = variance.intervals()
        table["se"] = variance.standard_errors()
        table["ci_low"] = ci[:, 0]
        table["ci_high"] = ci[:, 1]
    return table[list(strings.REPORT_HEADERS["psi"])]


def estimands_frame(rows: Sequence[EstimandEstimate]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in rows], columns=list(strings.REPORT_HEADERS["estimands"]))


def _csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=_FLOAT_FORMAT, lineterminator="\n")


def _text_table(frame: pd.DataFrame) -> str:
    if frame.empty:
        return "(none)"
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def _run_header(config: RunConfig) -> dict[str, Any]:
    return {"mode": config.mode, "seed": config.seed, "config": dict(config.raw)}


def write_estimate_report(
    config: RunConfig,
    result: EstimationResult,
    variance: VarianceEstimate | None,
    estimands: Sequence[EstimandEstimate],
) -> str:
    """Write all estimate outputs; returns the human-readable report."""
    out = ensure_output_dir(config.output_dir)
    psi = psi_frame(result, variance)
    est = estimands_frame(estimands)
    payload = {
        **_run_header(config),
        "result": result.to_dict(),
        "variance": variance.to_dict() if variance is not None else None,
        "psi": psi.to_dict(orient="records"),
        "estimands": [r.to_dict() for r in estimands],
        "strata": result.stratum_table().to_dict(orient="records"),
    }
    atomic_write_text(out / "report.json", dumps(payload))
    atomic_write_text(out / "psi.csv", _csv(psi))
    atomic_write_text(out / "estimands.csv", _csv(est))

    method = variance.method if variance is not None else "none"
    lines = [
        f"Blip parameters ({result.n_groups} sampling groups, variance: {method})",
        _text_table(psi),
        "",
        "Estimands",
        _text_table(est),
    ]
    warnings = result.diagnostics.get("warnings", [])
    if warnings:
        lines += ["", "Warnings"]
        lines += [f"- {w.get('code')}: " + ", ".join(f"{k}={v}" for k, v in w.items() if k != "code") for w in warnings]
    text = "\n".join(lines) + "\n"
    atomic_write_text(out / "report.txt", text)
    logger.info("report.written path=%s", out)
    return text


def write_simulation_report(config: RunConfig, report: MonteCarloReport) -> str:
    out = ensure_output_dir(config.output_dir)
    frame = report.to_frame()
    payload = {**_run_header(config), "montecarlo": report.to_dict()}
    atomic_write_text(out / "report.json", dumps(payload))
    atomic_write_text(out / "montecarlo.csv", _csv(frame))
    lines = [
        f"Monte Carlo: {report.dgp}, {report.replicates} replicates "
        f"({report.failures} failed), noise convention: {report.noise_convention}",
        _text_table(frame),
    ]
    text = "\n".join(lines) + "\n"
    atomic_write_text(out / "report.txt", text)
    logger.info("report.written path=%s", out)
    return text
