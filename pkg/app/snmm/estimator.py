"""
G-estimation of the blip parameters.

The per-group score is

    g_i(psi) = sum_{m<k} sum_j {H_{m,k} - H_{m,k-1} - v_{m,k}}_j * {s_m - E[s_m | history]}_j

and, with a linear blip model and affine trend model, g_i(psi) = e_i - W_i psi
exactly. The mean score is written A psi - b with A = -mean(W), b = -mean(e).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
import pandas as pd
from scipy import linalg

from app.config import settings
from app.core.exceptions import IdentificationError, JacobianSingular, ModelSpecError
from app.core.types import PanelDataset
from app.snmm.blip import BlipModel
from app.snmm.exposure_map import MappedPanel, MappingSpec, apply_mapping
from app.snmm.nuisance import (
    STRATEGIES,
    NuisanceDiagnostics,
    TreatmentModel,
    TrendModel,
    fit_strata,
    fit_treatment_model,
    fit_trend_model,
)
from app.snmm.sfunctions import (
    MomentInputs,
    SFunctionSet,
    check_s_rank,
    default_s_functions,
    moment_inputs,
    null_space_labels,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class EstimatorConfig:
    treatment_strategy: str = "saturated"
    trend_strategy: str = "saturated"
    extra_s: str | None = None
    tolerance: float = settings.SCORE_TOLERANCE
    rank_tolerance: float = settings.RANK_TOLERANCE
    # added to the fitted trend; non-zero only in robustness checks
    trend_offset: float = 0.0

    def __post_init__(self) -> None:
        for name in ("treatment_strategy", "trend_strategy"):
            if getattr(self, name) not in STRATEGIES:
                raise ValueError(f"{name} must be one of {STRATEGIES}, got {getattr(self, name)!r}")


@dataclass(frozen=True, slots=True)
class ScoreSystem:
    e: np.ndarray  # (G, Q)
    W: np.ndarray  # (G, Q, P)

    @property
    def A(self) -> np.ndarray:
        return -self.W.mean(axis=0)

    @property
    def b(self) -> np.ndarray:
        return -self.e.mean(axis=0)

    def scores(self, psi: np.ndarray) -> np.ndarray:
        return self.e - self.W @ psi

    def mean_score(self, psi: np.ndarray) -> np.ndarray:
        return self.A @ psi - self.b


def assemble_score(
    mapped: MappedPanel,
    model: BlipModel,
    sset: SFunctionSet,
    treatment: TreatmentModel,
    trend: TrendModel,
    inputs: MomentInputs | None = None,
) -> ScoreSystem:
    if inputs is None:
        inputs = moment_inputs(mapped, model, sset)
    G, Q, P = mapped.n_groups, sset.dim, model.n_params
    e = np.zeros((G, Q))
    W = np.zeros((G, Q, P))
    for m, k in inputs.pairs:
        centred = inputs.s[(m, k)] - treatment.predict(m, k)
        resid_const = inputs.dy[(m, k)] - trend.intercept[(m, k)] - trend.offset
        resid_slope = inputs.F[(m, k)] + trend.slope[(m, k)]
        e += np.einsum("gjq,gj->gq", centred, resid_const)
        W += np.einsum("gjq,gjp->gqp", centred, resid_slope)
    return ScoreSystem(e=e, W=W)


class _HasIntervals(Protocol):
    def standard_errors(self) -> np.ndarray: ...

    def wald_intervals(self, level: float = ...) -> np.ndarray: ...


@dataclass(slots=True, eq=False)
class EstimationResult:
    psi_hat: np.ndarray
    model: BlipModel
    sset: SFunctionSet
    mapped: MappedPanel
    config: EstimatorConfig
    system: ScoreSystem
    scores: np.ndarray  # (G, Q) per sampling group, at psi_hat
    residual: float
    treatment: TreatmentModel
    trend: TrendModel
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.model.labels

    @property
    def jacobian(self) -> np.ndarray:
        return self.system.A

    @property
    def b(self) -> np.ndarray:
        return self.system.b

    @property
    def n_groups(self) -> int:
        return self.mapped.n_groups

    @property
    def psi(self) -> dict[str, float]:
        return dict(zip(self.labels, self.psi_hat.tolist()))

    def refit(self, mapped: MappedPanel) -> EstimationResult:
        return solve_psi(mapped, self.model, self.config)

    def summary_table(self, variance: _HasIntervals | None = None, level: float = settings.CI_LEVEL) -> pd.DataFrame:
        table = pd.DataFrame({"label": self.labels, "estimate": self.psi_hat})
        if variance is not None:
            ci = variance.wald_intervals(level)
            table["se"] = variance.standard_errors()
            table["ci_low"] = ci[:, 0]
            table["ci_high"] = ci[:, 1]
        return table

    def stratum_table(self) -> pd.DataFrame:
        nuis: NuisanceDiagnostics = self.treatment.diagnostics
        rows = [
            {
                "m": m,
                "stratum": strata.key_label(s),
                "n_groups": int(strata.counts[s]),
                "n_zero_exposed": int(strata.zero_counts[s]),
            }
            for m, strata in sorted(nuis.strata.items())
            for s in range(strata.n_strata)
        ]
        return pd.DataFrame(rows, columns=["m", "stratum", "n_groups", "n_zero_exposed"])

    def to_dict(self) -> dict[str, Any]:
        return {
            "psi": self.psi,
            "n_groups": self.n_groups,
            "group_size": self.mapped.group_size,
            "residual": self.residual,
            "treatment_strategy": self.config.treatment_strategy,
            "trend_strategy": self.config.trend_strategy,
            "s_functions": list(self.sset.labels),
            "diagnostics": self.diagnostics,
        }


def _check_rank(A: np.ndarray, labels: tuple[str, ...], tol: float) -> None:
    sv = linalg.svdvals(A)
    if sv.size == 0 or sv.max() == 0.0 or sv.min() <= tol * sv.max() or sv.size < A.shape[1]:
        directions = null_space_labels(A, labels, tol)
        raise IdentificationError(
            f"Score Jacobian is singular; parameters not identified along {directions}",
            null_space=directions,
        )


def solve_psi(
    mapped: MappedPanel, model: BlipModel, config: EstimatorConfig | None = None
) -> EstimationResult:
    config = config or EstimatorConfig()
    sset = default_s_functions(model, config.extra_s)
    inputs = moment_inputs(mapped, model, sset)
    check_s_rank(inputs, sset.labels, config.rank_tolerance)

    need_discrete = "saturated" in (config.treatment_strategy, config.trend_strategy)
    nuis = fit_strata(mapped, need_discrete=need_discrete)
    treatment = fit_treatment_model(mapped, sset, config.treatment_strategy, inputs=inputs, diagnostics=nuis)
    trend = fit_trend_model(
        mapped, model, sset, config.trend_strategy, offset=config.trend_offset, inputs=inputs, diagnostics=nuis
    )
    system = assemble_score(mapped, model, sset, treatment, trend, inputs)
    A, b = system.A, system.b
    _check_rank(A, model.labels, config.rank_tolerance)

    if sset.over_identified:
        psi_hat = linalg.lstsq(A, b)[0]
    else:
        psi_hat = linalg.solve(A, b)
        residual = float(np.max(np.abs(A @ psi_hat - b)))
        if residual > config.tolerance * (1.0 + float(np.max(np.abs(b)))):
            raise JacobianSingular(
                f"Linear solve left residual {residual:.3e}; Jacobian condition number {np.linalg.cond(A):.3e}",
                residual=residual,
            )
    residual = float(np.max(np.abs(A @ psi_hat - b)))

    diagnostics: dict[str, Any] = {
        "warnings": list(nuis.warnings),
        "n_strata": {str(m): s.n_strata for m, s in nuis.strata.items()},
        "condition_number": float(np.linalg.cond(A)),
    }
    logger.info(
        "estimator.solved n_params=%d groups=%d residual=%.3e", model.n_params, mapped.n_groups, residual
    )
    return EstimationResult(
        psi_hat=psi_hat,
        model=model,
        sset=sset,
        mapped=mapped,
        config=config,
        system=system,
        scores=system.scores(psi_hat),
        residual=residual,
        treatment=treatment,
        trend=trend,
        diagnostics=diagnostics,
    )


def naive_no_interference_fit(
    panel: PanelDataset, model: BlipModel, config: EstimatorConfig | None = None
) -> EstimationResult:
    """Same pipeline with the exposure mapping reduced to own exposure (p = 0)."""
    if model.uses_spillover:
        raise ModelSpecError("The no-interference fit needs a model over a[.] atoms only")
    mapped = apply_mapping(panel, MappingSpec(kind="direct"))
    return solve_psi(mapped, model, config)
