"""
Monte Carlo harness: simulate, fit, compute uncertainty, aggregate.

Replicate r generates its data from derive_seed(seed, r, 0) and bootstraps from
derive_seed(seed, r, 1), so the report depends only on (config, seed, R).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from app.config import settings, strings
from app.core.exceptions import ConfigError, EstimationError, InvalidSize, MonteCarloError, SnmmError
from app.simlab.dgp import (
    DGPConfig,
    NetworkDGPConfig,
    cluster_psi_labels,
    estimand_truth,
    generate,
    model_for,
    naive_untreated_limit,
    network_table_estimands,
)
from app.snmm.blip import BlipModel, builtin_model
from app.snmm.estimands import EstimandSpec, estimate_estimand
from app.snmm.estimator import EstimatorConfig, naive_no_interference_fit, solve_psi
from app.snmm.inference import VarianceConfig, compute_variance
from app.utils.concurrency import ordered_map, resolve_threads
from app.utils.seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class MonteCarloRow:
    estimand: str
    truth: float
    mean: float
    sd: float
    mean_se: float
    coverage: float
    replicates: int

    @property
    def bias(self) -> float:
        return self.mean - self.truth

    @property
    def mcse(self) -> float:
        """Monte Carlo standard error of the mean estimate."""
        return self.sd / math.sqrt(self.replicates) if self.replicates > 0 else math.nan

    def to_dict(self) -> dict[str, Any]:
        return {
            "estimand": self.estimand,
            "truth": self.truth,
            "mean": self.mean,
            "sd": self.sd,
            "mean_se": self.mean_se,
            "coverage": self.coverage,
            "replicates": self.replicates,
        }


@dataclass(slots=True)
class MonteCarloReport:
    dgp: str
    rows: list[MonteCarloRow]
    replicates: int
    failures: int
    seed: int
    noise_convention: str
    config: dict[str, Any] = field(default_factory=dict)
    failure_codes: dict[str, int] = field(default_factory=dict)

    def row(self, estimand: str) -> MonteCarloRow:
        for row in self.rows:
            if row.estimand == estimand:
                return row
        raise KeyError(estimand)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.rows], columns=list(strings.REPORT_HEADERS["montecarlo"]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "dgp": self.dgp,
            "replicates": self.replicates,
            "failures": self.failures,
            "failure_codes": self.failure_codes,
            "seed": self.seed,
            "noise_convention": self.noise_convention,
            "config": self.config,
            "rows": [r.to_dict() for r in self.rows],
        }


@dataclass(frozen=True, slots=True)
class _Draw:
    """One replicate: per-target (estimate, se, ci_low, ci_high)."""

    values: dict[str, tuple[float, float, float, float]]


@dataclass(frozen=True, slots=True)
class _Target:
    label: str
    truth: float
    psi_index: int | None = None
    spec: EstimandSpec | None = None
    naive: bool = False


def default_targets(config: DGPConfig, model: BlipModel) -> list[_Target]:
    """Table rows for the design: blip cells for the network, coefficients for clusters."""
    if isinstance(config, NetworkDGPConfig):
        return [
            _Target(label=spec.name, truth=estimand_truth(model, config.psi, spec), spec=spec)
            for spec in network_table_estimands()
        ]
    return [
        _Target(label=label, truth=float(config.psi[i]), psi_index=i)
        for i, label in enumerate(cluster_psi_labels())
    ]


def _untreated_target(naive: bool) -> _Target:
    label = strings.UNTREATED_LABEL.format(k=2)
    spec = EstimandSpec(kind="untreated_trajectory", k=2, label=label)
    # E[U] with U ~ Bernoulli(0.5)
    return _Target(label=label + (strings.NAIVE_SUFFIX if naive else ""), truth=0.5, spec=spec, naive=naive)


def _one_replicate(
    r: int,
    dgp: DGPConfig,
    model: BlipModel,
    estimator: EstimatorConfig,
    variance: VarianceConfig,
    targets: Sequence[_Target],
    threads: int,
) -> _Draw:
    data = generate(dgp.with_seed(derive_seed(dgp.seed, r, 0)))
    vconf = variance.with_seed(derive_seed(dgp.seed, r, 1))
    values: dict[str, tuple[float, float, float, float]] = {}
    for naive in (False, True):
        group = [t for t in targets if t.naive is naive]
        if not group:
            continue
        if naive:
            result = naive_no_interference_fit(data.panel, builtin_model("no_interference"), estimator)
        else:
            result = solve_psi(data, model, estimator)
        specs = [t.spec for t in group if t.spec is not None]
        var = compute_variance(result, vconf, specs, threads)
        intervals = var.intervals() if var is not None else None
        ses = var.standard_errors() if var is not None else None
        for t in group:
            if t.psi_index is not None:
                i = t.psi_index
                est = float(result.psi_hat[i])
                se = float(ses[i]) if ses is not None else math.nan
                lo, hi = (float(intervals[i, 0]), float(intervals[i, 1])) if intervals is not None else (math.nan,) * 2
                values[t.label] = (est, se, lo, hi)
            else:
                assert t.spec is not None
                e = estimate_estimand(result, t.spec, var)
                values[t.label] = (e.estimate, e.se, e.ci_low, e.ci_high)
    return _Draw(values=values)


def _aggregate(targets: Sequence[_Target], draws: Sequence[_Draw]) -> list[MonteCarloRow]:
    rows = []
    for t in targets:
        arr = np.array([d.values[t.label] for d in draws], dtype=float).reshape(-1, 4)
        est, se, lo, hi = arr.T
        n = est.size
        covered = (lo <= t.truth) & (t.truth <= hi)
        rows.append(
            MonteCarloRow(
                estimand=t.label,
                truth=t.truth,
                mean=float(est.mean()) if n else math.nan,
                sd=float(est.std(ddof=1)) if n > 1 else math.nan,
                mean_se=float(np.nanmean(se)) if n and not np.isnan(se).all() else math.nan,
                coverage=float(covered.mean()) if n and not np.isnan(lo).all() else math.nan,
                replicates=n,
            )
        )
    return rows


def _run(
    dgp: DGPConfig,
    estimator: EstimatorConfig,
    variance: VarianceConfig,
    replicates: int,
    targets: Sequence[_Target],
    threads: int | None,
) -> MonteCarloReport:
    if replicates < 2:
        raise InvalidSize(f"Monte Carlo needs at least 2 replicates, got {replicates}", n=replicates)
    model = model_for(dgp)
    outer = resolve_threads(threads)
    # inner bootstraps run serially while replicates run in parallel
    inner = 1 if outer > 1 else outer

    def attempt(r: int) -> _Draw | SnmmError:
        try:
            return _one_replicate(r, dgp, model, estimator, variance, targets, inner)
        except EstimationError as exc:
            logger.warning("montecarlo.replicate_failed r=%d code=%s", r, exc.code)
            return exc

    outcomes = ordered_map(attempt, range(replicates), outer)
    draws = [o for o in outcomes if isinstance(o, _Draw)]
    failed = [o for o in outcomes if not isinstance(o, _Draw)]
    codes: dict[str, int] = {}
    for exc in failed:
        codes[exc.code] = codes.get(exc.code, 0) + 1
    if len(failed) > settings.MONTE_CARLO_MAX_FAILURE_RATE * replicates:
        raise MonteCarloError(
            f"{len(failed)} of {replicates} replicates failed, above the "
            f"{settings.MONTE_CARLO_MAX_FAILURE_RATE:.0%} limit",
            failures=len(failed),
            codes=codes,
        )
    if failed:
        logger.warning(strings.MESSAGES["warn_mc_failures"].format(failed=len(failed), replicates=replicates))

    report = MonteCarloReport(
        dgp=dgp.name,
        rows=_aggregate(targets, draws),
        replicates=replicates,
        failures=len(failed),
        seed=dgp.seed,
        noise_convention=dgp.noise_convention,
        config={
            "dgp": dgp.to_dict(),
            "estimator": {
                "treatment_strategy": estimator.treatment_strategy,
                "trend_strategy": estimator.trend_strategy,
                "extra_s": estimator.extra_s,
                "trend_offset": estimator.trend_offset,
            },
            "variance": dataclasses.asdict(variance),
        },
        failure_codes=codes,
    )
    logger.info("montecarlo.done dgp=%s replicates=%d failures=%d", dgp.name, replicates, len(failed))
    return report


def run_monte_carlo(
    dgp: DGPConfig,
    estimator: EstimatorConfig | None = None,
    variance: VarianceConfig | None = None,
    replicates: int = 500,
    threads: int | None = None,
) -> MonteCarloReport:
    """Bias, SD, mean SE and CI coverage for the design's reported estimands."""
    estimator = estimator or EstimatorConfig()
    if variance is None:
        variance = (
            VarianceConfig(method="mbb", block_length=5)
            if isinstance(dgp, NetworkDGPConfig)
            else VarianceConfig(method="sandwich")
        )
    targets = default_targets(dgp, model_for(dgp))
    return _run(dgp, estimator, variance, replicates, targets, threads)


def naive_comparison(
    dgp: NetworkDGPConfig,
    replicates: int = 500,
    estimator: EstimatorConfig | None = None,
    variance: VarianceConfig | None = None,
    threads: int | None = None,
) -> MonteCarloReport:
    """E[Y_2(0)] from the interference-aware fit next to the fit that ignores spillover."""
    if not isinstance(dgp, NetworkDGPConfig):
        raise ConfigError("The naive comparison is defined for the network design only")
    estimator = estimator or EstimatorConfig()
    variance = variance or VarianceConfig(method="mbb", block_length=5)
    targets = [_untreated_target(naive=False), _untreated_target(naive=True)]
    report = _run(dgp, estimator, variance, replicates, targets, threads)
    report.config["naive_limit"] = naive_untreated_limit(dgp)
    return report
