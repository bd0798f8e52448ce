"""
Causal quantities derived from psi-hat.

Every estimand here is linear in psi for fixed data, so each one is returned
together with weights w such that estimand = offset + w @ psi.
"""

from __future__ import annotations

import logging
import operator
from collections.abc import Callable
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING

import numpy as np
from lark import Lark, Transformer
from lark.exceptions import UnexpectedInput, VisitError
from scipy import stats

from app.config import settings
from app.core.exceptions import (
    BootstrapError,
    EmptySubgroup,
    LeakageError,
    ModelSpecError,
    SpecParseError,
)
from app.core.types import StructureKind
from app.snmm.blip import BlipModel, blip_down, blip_features, check_model, unit_features
from app.snmm.exposure_map import MappedPanel

if TYPE_CHECKING:
    from app.snmm.estimator import EstimationResult
    from app.snmm.variance import VarianceEstimate

logger = logging.getLogger(__name__)

KINDS = ("untreated_trajectory", "subgroup_blip_mean", "blip_at")

_SELECTOR_GRAMMAR = r"""
start: builtin | cmp ("&" cmp)*

builtin: "cluster_direct" ("(" INT ")")?     -> cluster_direct
       | "cluster_indirect" ("(" INT ")")?   -> cluster_indirect

cmp: atom OP NUMBER

atom: "a" "[" time "]"                 -> a_atom
    | "h" "[" time "]" "[" INT "]"     -> h_atom
    | "l" "[" time "]" "[" INT "]"     -> l_atom

time: "m"               -> t_now
    | "m" "-" INT       -> t_back
    | "m" "+" INT       -> t_ahead
    | INT               -> t_abs

OP: "==" | "!=" | "<=" | ">=" | "<" | ">" | "="
NUMBER: /-?[0-9]+(\.[0-9]+)?/
INT: /[0-9]+/

%ignore /[ \t\r\n]+/
"""

_OPS: dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "==": operator.eq,
    "=": operator.eq,
    "!=": operator.ne,
    "<=": operator.le,
    ">=": operator.ge,
    "<": operator.lt,
    ">": operator.gt,
}


@lru_cache(maxsize=1)
def _selector_parser() -> Lark:
    return Lark(_SELECTOR_GRAMMAR, parser="lalr")


@dataclass(frozen=True, slots=True)
class _Atom:
    kind: str
    lag: int | None
    at: int | None
    index: int | None = None


@dataclass(frozen=True, slots=True)
class _Compare:
    atom: _Atom
    op: str
    value: float


@dataclass(frozen=True, slots=True)
class _Builtin:
    name: str
    member: int | None


class _SelectorTransformer(Transformer):
    def t_now(self, _):
        return (0, None)

    def t_back(self, items):
        return (int(items[0]), None)

    def t_ahead(self, items):
        if int(items[0]) > 0:
            raise LeakageError(f"Selector references future time m+{items[0]}")
        return (0, None)

    def t_abs(self, items):
        return (None, int(items[0]))

    def a_atom(self, items):
        lag, at = items[0]
        return _Atom("a", lag, at)

    def h_atom(self, items):
        lag, at = items[0]
        return _Atom("h", lag, at, int(items[1]))

    def l_atom(self, items):
        lag, at = items[0]
        return _Atom("l", lag, at, int(items[1]))

    def cmp(self, items):
        atom, op, value = items
        return _Compare(atom, str(op), float(value))

    def cluster_direct(self, items):
        return _Builtin("cluster_direct", int(items[0]) if items else None)

    def cluster_indirect(self, items):
        return _Builtin("cluster_indirect", int(items[0]) if items else None)

    def start(self, items):
        return items


def parse_selector(text: str) -> list[_Compare] | _Builtin:
    try:
        tree = _selector_parser().parse(text)
    except UnexpectedInput as exc:
        raise SpecParseError(
            f"Invalid selector at line {exc.line}, column {exc.column}: {text!r}",
            line=exc.line,
            column=exc.column,
        ) from exc
    try:
        items = _SelectorTransformer().transform(tree)
    except VisitError as exc:
        raise exc.orig_exc from None
    if len(items) == 1 and isinstance(items[0], _Builtin):
        return items[0]
    return list(items)


@dataclass(frozen=True, slots=True)
class EstimandSpec:
    kind: str
    k: int
    m: int | None = None
    selector: str | None = None
    history: tuple[tuple[float, tuple[float, ...]], ...] | None = None
    covariates: tuple[tuple[float, ...], ...] | None = None
    member: int | None = None
    label: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ModelSpecError(f"Unknown estimand kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "untreated_trajectory" and self.m is None:
            raise ModelSpecError(f"Estimand {self.kind!r} needs m")
        if self.kind == "subgroup_blip_mean" and not self.selector:
            raise ModelSpecError("subgroup_blip_mean needs a selector")
        if self.kind == "blip_at" and self.history is None:
            raise ModelSpecError("blip_at needs an exposure history")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "untreated_trajectory":
            return f"E[Y_{self.k}(0)]"
        if self.kind == "subgroup_blip_mean":
            return f"mean gamma_{{{self.m},{self.k}}} | {self.selector}"
        return f"gamma_{{{self.m},{self.k}}}{self.history}"


def _atom_values(atom: _Atom, mapped: MappedPanel, m: int) -> np.ndarray:
    t = atom.at if atom.at is not None else m - (atom.lag or 0)
    if t > m:
        raise LeakageError(f"Selector looks at time {t} beyond m={m}")
    if t < 0:
        return np.zeros(mapped.n_units)
    if atom.kind == "a":
        return mapped.a[:, t]
    if atom.kind == "h":
        return mapped.h[:, t, atom.index]
    return mapped.covariates[:, t, atom.index]


def _cluster_mask(builtin: _Builtin, mapped: MappedPanel, m: int) -> np.ndarray:
    if mapped.mode is not StructureKind.CLUSTER:
        raise ModelSpecError(f"Selector {builtin.name} needs cluster interference")
    groups = mapped.groups
    own = mapped.a[groups, m]  # (G, J)
    treated = own.sum(axis=1, keepdims=True)
    if builtin.name == "cluster_direct":
        pair_mask = (own == 1) & (treated == 1)
    else:
        pair_mask = (own == 0) & (treated >= 1)
    if builtin.member is not None:
        if builtin.member >= mapped.group_size:
            raise ModelSpecError(f"Member {builtin.member} outside cluster size {mapped.group_size}")
        keep = np.zeros_like(pair_mask)
        keep[:, builtin.member] = True
        pair_mask &= keep
    mask = np.zeros(mapped.n_units, dtype=bool)
    mask[groups[pair_mask]] = True
    return mask


def selector_mask(selector: str, mapped: MappedPanel, m: int) -> np.ndarray:
    parsed = parse_selector(selector)
    if isinstance(parsed, _Builtin):
        return _cluster_mask(parsed, mapped, m)
    mask = np.ones(mapped.n_units, dtype=bool)
    for cmp in parsed:
        mask &= _OPS[cmp.op](_atom_values(cmp.atom, mapped, m), cmp.value)
    return mask


@dataclass(frozen=True, slots=True)
class LinearEstimand:
    """value = offset + weights @ psi."""

    offset: float
    weights: np.ndarray

    def value(self, psi: np.ndarray) -> float:
        return float(self.offset + self.weights @ np.asarray(psi, dtype=float))


def linearize(spec: EstimandSpec, mapped: MappedPanel, model: BlipModel) -> LinearEstimand:
    check_model(model, mapped)
    if spec.kind == "untreated_trajectory":
        if not 0 <= spec.k <= mapped.tau:
            raise IndexError(f"k={spec.k} outside 0..{mapped.tau}")
        total = np.zeros(model.n_params)
        for m in range(spec.k):
            total += unit_features(model, mapped, m, spec.k).mean(axis=0)
        return LinearEstimand(offset=float(mapped.outcome[:, spec.k].mean()), weights=-total)
    assert spec.m is not None
    if spec.kind == "subgroup_blip_mean":
        assert spec.selector is not None
        mask = selector_mask(spec.selector, mapped, spec.m)
        if not mask.any():
            raise EmptySubgroup(f"Selector {spec.selector!r} matches no unit at m={spec.m}", selector=spec.selector)
        feats = unit_features(model, mapped, spec.m, spec.k)
        return LinearEstimand(offset=0.0, weights=feats[mask].mean(axis=0))
    assert spec.history is not None
    feats = blip_features(model, spec.m, spec.k, spec.history, spec.covariates, j=spec.member)
    return LinearEstimand(offset=0.0, weights=feats)


def untreated_trajectory(result: EstimationResult, mapped: MappedPanel, model: BlipModel, k: int) -> float:
    """Sample mean of the fully blipped-down outcome H_{0,k} at psi-hat."""
    if k == 0:
        return float(mapped.outcome[:, 0].mean())
    return blip_down(model, result.psi_hat, mapped).mean(0, k)


def subgroup_blip_mean(
    result: EstimationResult, mapped: MappedPanel, model: BlipModel, spec: EstimandSpec
) -> float:
    if spec.kind != "subgroup_blip_mean":
        raise ModelSpecError(f"Expected a subgroup_blip_mean estimand, got {spec.kind!r}")
    return linearize(spec, mapped, model).value(result.psi_hat)


def evaluate_estimand(result: EstimationResult, spec: EstimandSpec) -> float:
    """Value of ``spec`` at the fit's psi-hat, on the fit's own data."""
    if spec.kind == "untreated_trajectory":
        return untreated_trajectory(result, result.mapped, result.model, spec.k)
    return linearize(spec, result.mapped, result.model).value(result.psi_hat)


@dataclass(frozen=True, slots=True)
class EstimandEstimate:
    name: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    method: str

    def to_dict(self) -> dict[str, object]:
        return {
            "name": self.name,
            "estimate": self.estimate,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "method": self.method,
        }


def estimand_se(
    spec: EstimandSpec, variance: VarianceEstimate | None, level: float = settings.CI_LEVEL
) -> tuple[float, float, float]:
    """(SE, percentile CI low, high) from the estimand's bootstrap draws."""
    draws = variance.estimand_draws.get(spec.name) if variance is not None else None
    if draws is None:
        raise BootstrapError(f"No bootstrap draws for estimand {spec.name!r}; configure a bootstrap variance")
    draws = np.asarray(draws, dtype=float)
    alpha = 1 - level
    lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2])
    return float(draws.std(ddof=1)), float(lo), float(hi)


def estimate_estimand(
    result: EstimationResult,
    spec: EstimandSpec,
    variance: VarianceEstimate | None = None,
    level: float = settings.CI_LEVEL,
) -> EstimandEstimate:
    """Point estimate plus uncertainty.

    Bootstrap variances use the per-replicate draws; analytic variances use the
    exact linear form of the estimand in psi.
    """
    value = evaluate_estimand(result, spec)
    logger.debug("estimands.evaluated kind=%s k=%d value=%.6g", spec.kind, spec.k, value)
    if variance is None:
        nan = float("nan")
        return EstimandEstimate(spec.name, value, nan, nan, nan, "none")
    if variance.is_bootstrap:
        se, lo, hi = estimand_se(spec, variance, level)
        return EstimandEstimate(spec.name, value, se, lo, hi, variance.method)
    lin = linearize(spec, result.mapped, result.model)
    se = variance.linear_combination_se(lin.weights)
    z = float(stats.norm.ppf(0.5 + level / 2))
    return EstimandEstimate(spec.name, value, se, value - z * se, value + z * se, variance.method)
