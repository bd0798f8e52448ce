"""
Plug-in nuisance models for the doubly robust score.

Both nuisances are projections of a per-group quantity onto the history
(D_{m-1}, L_m) of the sampling group:

* treatment model: E[s_m(k, D_m, L_m) | history]
* trend model:     E[H_{m,k} - H_{m,k-1} | history], kept affine in psi by
                   projecting the outcome increment and the feature increment
                   separately.

Strategies: ``saturated`` (cell means over discrete strata), ``regression``
(least squares on the history design) and ``marginal`` (pooled mean, ignores
history; a deliberately misspecified choice for robustness checks).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LinearRegression

from app.core.exceptions import ConfigError, PositivityViolation
from app.snmm.blip import BlipModel
from app.snmm.exposure_map import MappedPanel
from app.snmm.sfunctions import MomentInputs, SFunctionSet, moment_inputs

logger = logging.getLogger(__name__)

STRATEGIES = ("saturated", "regression", "marginal")


def history_design(mapped: MappedPanel, m: int) -> np.ndarray:
    """Group-level history (D_{m-1}, L_m): members' a[:m], h[:m], l[:m+1] side by side."""
    units = mapped.groups
    G = mapped.n_groups
    parts = [
        mapped.a[units, :m].reshape(G, -1),
        mapped.h[units, :m, :].reshape(G, -1),
        mapped.covariates[units, : m + 1, :].reshape(G, -1),
    ]
    return np.hstack(parts)


@dataclass(frozen=True, slots=True)
class Strata:
    m: int
    ids: np.ndarray  # (G,) stratum of each group
    keys: np.ndarray  # (n_strata, d)
    counts: np.ndarray  # (n_strata,)
    zero_counts: np.ndarray  # groups with D_m = 0 for every member

    @property
    def n_strata(self) -> int:
        return int(self.counts.size)

    @property
    def singletons(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 1)

    def key_label(self, s: int) -> str:
        return "(" + ",".join(f"{v:g}" for v in self.keys[s]) + ")" if self.keys.shape[1] else "()"


def zero_exposed(mapped: MappedPanel, m: int) -> np.ndarray:
    """Per group: every member has D_m equal to the zero element."""
    return mapped.is_zero(m)[mapped.groups].all(axis=1)


def stratify(mapped: MappedPanel, m: int, *, require_discrete: bool = True) -> Strata:
    design = history_design(mapped, m)
    G = mapped.n_groups
    if require_discrete and design.size and not np.all(np.mod(design, 1) == 0):
        raise ConfigError(
            f"History at m={m} has non-integer values; saturated nuisances need discrete histories, "
            "use the regression strategy",
            m=m,
        )
    if design.shape[1] == 0:
        keys = np.zeros((1, 0))
        ids = np.zeros(G, dtype=np.int64)
    else:
        keys, ids = np.unique(design, axis=0, return_inverse=True)
        ids = ids.reshape(-1)
    counts = np.bincount(ids, minlength=len(keys))
    zero_counts = np.bincount(ids, weights=zero_exposed(mapped, m).astype(float), minlength=len(keys))
    return Strata(m=m, ids=ids, keys=keys, counts=counts, zero_counts=zero_counts.astype(np.int64))


def check_positivity(strata: Strata) -> None:
    empty = np.flatnonzero(strata.zero_counts == 0)
    if empty.size:
        labels = [strata.key_label(int(s)) for s in empty[:10]]
        raise PositivityViolation(
            f"No group with zero exposure at m={strata.m} in {empty.size} stratum(s) of the history, "
            f"e.g. {labels}; the positivity assumption fails in the data",
            m=strata.m,
            strata=labels,
        )


def _cell_means(values: np.ndarray, strata: Strata) -> np.ndarray:
    flat = values.reshape(values.shape[0], -1)
    sums = np.zeros((strata.n_strata, flat.shape[1]))
    np.add.at(sums, strata.ids, flat)
    means = sums / strata.counts[:, None]
    return means[strata.ids].reshape(values.shape)


def _regression_fit(values: np.ndarray, design: np.ndarray) -> np.ndarray:
    flat = values.reshape(values.shape[0], -1)
    if design.shape[1] == 0 or flat.shape[1] == 0:
        return np.broadcast_to(flat.mean(axis=0), flat.shape).reshape(values.shape).copy()
    reg = LinearRegression().fit(design, flat)
    return reg.predict(design).reshape(values.shape)


def project(values: np.ndarray, strategy: str, mapped: MappedPanel, m: int, strata: Strata | None) -> np.ndarray:
    """Fitted conditional mean of ``values`` (leading axis = groups) given the history at m."""
    if strategy == "saturated":
        assert strata is not None
        return _cell_means(values, strata)
    if strategy == "regression":
        return _regression_fit(values, history_design(mapped, m))
    if strategy == "marginal":
        flat = values.reshape(values.shape[0], -1)
        return np.broadcast_to(flat.mean(axis=0), flat.shape).reshape(values.shape).copy()
    raise ConfigError(f"Unknown nuisance strategy {strategy!r}; expected one of {STRATEGIES}")


@dataclass(slots=True)
class NuisanceDiagnostics:
    strata: dict[int, Strata] = field(default_factory=dict)
    warnings: list[dict[str, object]] = field(default_factory=list)


def fit_strata(mapped: MappedPanel, need_discrete: bool) -> NuisanceDiagnostics:
    """Stratify every m, enforce positivity and record singleton strata."""
    diag = NuisanceDiagnostics()
    for m in range(mapped.tau):
        if need_discrete:
            strata = stratify(mapped, m)
            check_positivity(strata)
            for s in strata.singletons:
                label = strata.key_label(int(s))
                logger.warning("nuisance.singleton_stratum m=%d stratum=%s", m, label)
                diag.warnings.append({"code": "singleton_stratum", "m": m, "stratum": label})
            diag.strata[m] = strata
        elif not zero_exposed(mapped, m).any():
            raise PositivityViolation(f"No group with zero exposure at m={m}", m=m)
    return diag


@dataclass(slots=True)
class TreatmentModel:
    strategy: str
    fitted: dict[tuple[int, int], np.ndarray]  # (G, J, Q)
    diagnostics: NuisanceDiagnostics

    def predict(self, m: int, k: int) -> np.ndarray:
        return self.fitted[(m, k)]


@dataclass(slots=True)
class TrendModel:
    """v_{m,k} = intercept + slope @ psi (+ offset), per group member."""

    strategy: str
    intercept: dict[tuple[int, int], np.ndarray]  # (G, J)
    slope: dict[tuple[int, int], np.ndarray]  # (G, J, P)
    diagnostics: NuisanceDiagnostics
    offset: float = 0.0

    def value(self, psi: np.ndarray, m: int, k: int) -> np.ndarray:
        return self.intercept[(m, k)] + self.slope[(m, k)] @ np.asarray(psi, dtype=float) + self.offset


def _prepare(
    mapped: MappedPanel,
    model: BlipModel,
    sset: SFunctionSet,
    strategy: str,
    inputs: MomentInputs | None,
    diagnostics: NuisanceDiagnostics | None,
) -> tuple[MomentInputs, NuisanceDiagnostics]:
    if strategy not in STRATEGIES:
        raise ConfigError(f"Unknown nuisance strategy {strategy!r}; expected one of {STRATEGIES}")
    if inputs is None:
        inputs = moment_inputs(mapped, model, sset)
    if diagnostics is None:
        diagnostics = fit_strata(mapped, need_discrete=strategy == "saturated")
    return inputs, diagnostics


def fit_treatment_model(
    mapped: MappedPanel,
    sset: SFunctionSet,
    strategy: str = "saturated",
    *,
    inputs: MomentInputs | None = None,
    diagnostics: NuisanceDiagnostics | None = None,
) -> TreatmentModel:
    inputs, diagnostics = _prepare(mapped, sset.model, sset, strategy, inputs, diagnostics)
    fitted = {
        (m, k): project(inputs.s[(m, k)], strategy, mapped, m, diagnostics.strata.get(m))
        for m, k in inputs.pairs
    }
    logger.debug("nuisance.treatment_fitted strategy=%s pairs=%d", strategy, len(fitted))
    return TreatmentModel(strategy=strategy, fitted=fitted, diagnostics=diagnostics)


def fit_trend_model(
    mapped: MappedPanel,
    model: BlipModel,
    sset: SFunctionSet,
    strategy: str = "saturated",
    *,
    offset: float = 0.0,
    inputs: MomentInputs | None = None,
    diagnostics: NuisanceDiagnostics | None = None,
) -> TrendModel:
    """Affine-in-psi fit of E[H_{m,k} - H_{m,k-1} | history].

    H_{m,k} - H_{m,k-1} = dy - F psi, so the fit is proj(dy) - proj(F) psi.
    """
    inputs, diagnostics = _prepare(mapped, model, sset, strategy, inputs, diagnostics)
    intercept: dict[tuple[int, int], np.ndarray] = {}
    slope: dict[tuple[int, int], np.ndarray] = {}
    for m, k in inputs.pairs:
        strata = diagnostics.strata.get(m)
        intercept[(m, k)] = project(inputs.dy[(m, k)], strategy, mapped, m, strata)
        slope[(m, k)] = -project(inputs.F[(m, k)], strategy, mapped, m, strata)
    logger.debug("nuisance.trend_fitted strategy=%s pairs=%d", strategy, len(intercept))
    return TrendModel(strategy=strategy, intercept=intercept, slope=slope, diagnostics=diagnostics, offset=offset)
