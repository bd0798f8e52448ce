"""
Linear blip models and the term language used to write them down.

A model is a list of scoped blocks. Each block holds labelled product terms;
the blip for (m, k) and cluster member j is the sum over every matching term of
psi[label] * product(factors). Grammar, by example::

    # terms before any header apply to every (m, k)
    [m=0]
    psi1: a[m]
    psi2: h[m][0]; psi3: a[m]*timegap
    [m=1,k=2]
    psi7: a[m]*h[m-1][0]
    [m=0,k=1,j=1]          # cluster member 1 only
    psi01_2: h[m][0]

Atoms: ``a[t]``, ``h[t][r]``, ``l[t][j]``, ``lagsum_a`` (sum of a_t for t < m)
and ``timegap`` (k - m - 1), where t is ``m``, ``m-d`` or an absolute time.
Times before 0 evaluate to 0.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from lark import Lark, Token, Transformer
from lark.exceptions import UnexpectedInput, VisitError

from app.core.exceptions import (
    DimensionMismatch,
    LeakageError,
    SpecParseError,
    ZeroConstraintViolation,
)
from app.core.types import StructureKind
from app.snmm.exposure_map import History, MappedPanel

logger = logging.getLogger(__name__)

_GRAMMAR = r"""
start: _SEP? (_entry _SEP)* _entry?
_entry: header | term

header: "[" scope ("," scope)* "]"
scope: "all"            -> scope_all
     | "m" "=" INT      -> scope_m
     | "k" "=" INT      -> scope_k
     | "j" "=" INT      -> scope_j

term: LABEL ":" factor ("*" factor)*

factor: "a" "[" time "]"                 -> a_atom
      | "h" "[" time "]" "[" INT "]"     -> h_atom
      | "l" "[" time "]" "[" INT "]"     -> l_atom
      | "lagsum_a"                       -> lagsum_atom
      | "timegap"                        -> timegap_atom

time: "m"               -> t_now
    | "m" "+" INT       -> t_ahead
    | "m" "-" INT       -> t_back
    | INT               -> t_abs

LABEL: /[A-Za-z_][A-Za-z0-9_']*/
INT: /[0-9]+/
_SEP: /[ \t\r]*((#[^\n]*)?[\n;][ \t\r]*)+/

%ignore /[ \t\r\f]+/
%ignore /#[^\n]*/
"""


@lru_cache(maxsize=1)
def _parser() -> Lark:
    return Lark(_GRAMMAR, parser="lalr", maybe_placeholders=False)


@dataclass(frozen=True, slots=True)
class Factor:
    kind: str  # "a" | "h" | "l" | "lagsum" | "timegap"
    lag: int | None = None  # time = m - lag
    at: int | None = None  # absolute time
    index: int | None = None

    @property
    def is_exposure(self) -> bool:
        return self.kind in ("a", "h")

    def time(self, m: int) -> int:
        if self.at is not None:
            return self.at
        return m - (self.lag or 0)

    def __str__(self) -> str:
        if self.kind == "lagsum":
            return "lagsum_a"
        if self.kind == "timegap":
            return "timegap"
        if self.at is not None:
            t = str(self.at)
        elif self.lag:
            t = f"m-{self.lag}"
        else:
            t = "m"
        suffix = "" if self.index is None else f"[{self.index}]"
        return f"{self.kind}[{t}]{suffix}"


@dataclass(frozen=True, slots=True)
class FeatureTerm:
    label: str
    factors: tuple[Factor, ...]

    def __str__(self) -> str:
        return f"{self.label}: " + "*".join(str(f) for f in self.factors)


@dataclass(frozen=True, slots=True)
class Block:
    m: int | None = None
    k: int | None = None
    j: int | None = None
    terms: tuple[FeatureTerm, ...] = ()

    def matches(self, m: int, k: int, j: int | None) -> bool:
        if self.m is not None and self.m != m:
            return False
        if self.k is not None and self.k != k:
            return False
        return self.j is None or j is None or self.j == j

    def header(self) -> str:
        parts = [f"{name}={value}" for name, value in (("m", self.m), ("k", self.k), ("j", self.j)) if value is not None]
        return "[" + (",".join(parts) or "all") + "]"


@dataclass(frozen=True, slots=True)
class BlipModel:
    blocks: tuple[Block, ...]

    @property
    def labels(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for block in self.blocks:
            for term in block.terms:
                seen.setdefault(term.label, None)
        return tuple(seen)

    @property
    def n_params(self) -> int:
        return len(self.labels)

    @property
    def member_scoped(self) -> bool:
        return any(b.j is not None for b in self.blocks)

    @property
    def uses_spillover(self) -> bool:
        return any(f.kind == "h" for b in self.blocks for t in b.terms for f in t.factors)

    def factors(self) -> list[Factor]:
        return [f for b in self.blocks for t in b.terms for f in t.factors]

    def terms_for(self, m: int, k: int, j: int | None = None) -> list[tuple[int, FeatureTerm]]:
        index = {label: i for i, label in enumerate(self.labels)}
        return [
            (index[term.label], term)
            for block in self.blocks
            if block.matches(m, k, j)
            for term in block.terms
        ]


class _SpecTransformer(Transformer):
    def t_now(self, _: list[Token]) -> Factor:
        return Factor(kind="", lag=0)

    def t_back(self, items: list[Token]) -> Factor:
        return Factor(kind="", lag=int(items[0]))

    def t_ahead(self, items: list[Token]) -> Factor:
        (tok,) = items
        if int(tok) > 0:
            raise LeakageError(
                f"Reference to future time m+{tok} at line {tok.line}, column {tok.column}",
                line=tok.line,
                column=tok.column,
            )
        return Factor(kind="", lag=0)

    def t_abs(self, items: list[Token]) -> Factor:
        return Factor(kind="", at=int(items[0]))

    def a_atom(self, items: list[Factor]) -> Factor:
        return Factor(kind="a", lag=items[0].lag, at=items[0].at)

    def h_atom(self, items: list) -> Factor:
        return Factor(kind="h", lag=items[0].lag, at=items[0].at, index=int(items[1]))

    def l_atom(self, items: list) -> Factor:
        return Factor(kind="l", lag=items[0].lag, at=items[0].at, index=int(items[1]))

    def lagsum_atom(self, _: list) -> Factor:
        return Factor(kind="lagsum")

    def timegap_atom(self, _: list) -> Factor:
        return Factor(kind="timegap")

    def term(self, items: list) -> FeatureTerm:
        label, *factors = items
        return FeatureTerm(label=str(label), factors=tuple(factors))

    def scope_all(self, _: list) -> tuple[str, int | None]:
        return "all", None

    def scope_m(self, items: list[Token]) -> tuple[str, int]:
        return "m", int(items[0])

    def scope_k(self, items: list[Token]) -> tuple[str, int]:
        return "k", int(items[0])

    def scope_j(self, items: list[Token]) -> tuple[str, int]:
        return "j", int(items[0])

    def header(self, scopes: list[tuple[str, int | None]]) -> Block:
        names = [name for name, _ in scopes]
        if "all" in names and len(names) > 1:
            raise SpecParseError("Scope 'all' cannot be combined with other scopes")
        if len(set(names)) != len(names):
            raise SpecParseError(f"Repeated scope in header: {names}")
        values = {name: value for name, value in scopes if name != "all"}
        return Block(**values)

    def start(self, items: list) -> list:
        return items


def _check_term(term: FeatureTerm, block: Block, require_zero: bool) -> None:
    for factor in term.factors:
        if factor.at is not None and block.m is not None and factor.at > block.m:
            raise LeakageError(
                f"Term {term.label!r} references time {factor.at} inside a block fixed at m={block.m}",
                label=term.label,
            )
    if not require_zero:
        return
    anchored = any(
        f.is_exposure and (f.lag == 0 or (f.at is not None and f.at == block.m))
        for f in term.factors
    )
    if not anchored:
        raise ZeroConstraintViolation(
            f"Term {term.label!r} has no time-m exposure factor, so the blip would not vanish at d_m = 0",
            label=term.label,
        )


def parse_blip_spec(text: str, *, require_zero: bool = True) -> BlipModel:
    """Parse blip-language text into a BlipModel.

    ``require_zero=False`` is used for extra estimating functions, which need
    not vanish at the zero exposure.
    """
    try:
        tree = _parser().parse(text)
    except UnexpectedInput as exc:
        raise SpecParseError(
            f"Invalid blip specification at line {exc.line}, column {exc.column}: "
            f"{exc.get_context(text).strip()!r}",
            line=exc.line,
            column=exc.column,
        ) from exc
    try:
        items = _SpecTransformer().transform(tree)
    except VisitError as exc:
        raise exc.orig_exc from None

    blocks: list[Block] = []
    current = Block()
    pending: list[FeatureTerm] = []
    implicit = True
    for item in items:
        if isinstance(item, Block):
            if pending or not implicit:
                blocks.append(Block(current.m, current.k, current.j, tuple(pending)))
            current, pending, implicit = item, [], False
        else:
            _check_term(item, current, require_zero)
            pending.append(item)
    if pending or not implicit:
        blocks.append(Block(current.m, current.k, current.j, tuple(pending)))
    model = BlipModel(blocks=tuple(blocks))
    logger.debug("blip.parsed blocks=%d params=%d", len(model.blocks), model.n_params)
    return model


def format_blip_spec(model: BlipModel) -> str:
    """Canonical text; parsing it gives back an equal model."""
    lines: list[str] = []
    for block in model.blocks:
        lines.append(block.header())
        lines.extend(str(term) for term in block.terms)
    return "\n".join(lines) + "\n"


def check_model(model: BlipModel, mapped: MappedPanel) -> None:
    """Reject models that index past the mapped panel's dimensions."""
    p, q = mapped.p, mapped.panel.n_covariates
    for factor in model.factors():
        if factor.kind == "h" and factor.index is not None and factor.index >= p:
            raise DimensionMismatch(f"{factor} needs h of dimension > {factor.index}, mapping has p={p}")
        if factor.kind == "l" and factor.index is not None and factor.index >= q:
            raise DimensionMismatch(f"{factor} needs covariate {factor.index}, panel has {q}")
        if factor.at is not None and factor.at >= mapped.tau:
            raise DimensionMismatch(f"{factor} references time {factor.at} beyond tau-1={mapped.tau - 1}")
    if model.member_scoped:
        if mapped.mode is not StructureKind.CLUSTER:
            raise DimensionMismatch("Member-scoped blocks (j=...) need cluster interference")
        for block in model.blocks:
            if block.j is not None and block.j >= mapped.group_size:
                raise DimensionMismatch(f"Block {block.header()} exceeds cluster size {mapped.group_size}")


def _factor_values(factor: Factor, m: int, k: int, hist: History) -> np.ndarray:
    n = hist.n
    if factor.kind == "timegap":
        return np.full(n, float(k - m - 1))
    if factor.kind == "lagsum":
        return hist.a[:, :m].sum(axis=1)
    t = factor.time(m)
    if t > m:
        raise LeakageError(f"{factor} evaluated at m={m} looks into the future")
    if t < 0:
        return np.zeros(n)
    if factor.kind == "a":
        return hist.a[:, t]
    if factor.kind == "h":
        return hist.h[:, t, factor.index]
    return hist.l[:, t, factor.index]


def features_for_history(
    model: BlipModel, m: int, k: int, hist: History, j: int | None = None
) -> np.ndarray:
    """f_{m,k} for every unit in a history batch, shape (n, n_params)."""
    if k <= m:
        raise IndexError(f"blip features need k > m, got m={m}, k={k}")
    out = np.zeros((hist.n, model.n_params))
    for col, term in model.terms_for(m, k, j):
        value = np.ones(hist.n)
        for factor in term.factors:
            value = value * _factor_values(factor, m, k, hist)
        out[:, col] += value
    return out


def _history_from_point(
    m: int,
    d_bar: Sequence[tuple[float, Sequence[float] | float]],
    l_bar: Sequence[Sequence[float]] | None,
) -> History:
    if len(d_bar) != m + 1:
        raise DimensionMismatch(f"Exposure history needs {m + 1} entries, got {len(d_bar)}")
    a = np.array([[float(d[0]) for d in d_bar]])
    h = np.array([[np.atleast_1d(np.asarray(d[1], dtype=float)) for d in d_bar]], dtype=float)
    if l_bar is None:
        l = np.zeros((1, m + 1, 0))
    else:
        l = np.array([[list(row) for row in l_bar]], dtype=float).reshape(1, m + 1, -1)
    return History(m=m, a=a, h=h, l=l)


def blip_features(
    model: BlipModel,
    m: int,
    k: int,
    d_bar: Sequence[tuple[float, Sequence[float] | float]],
    l_bar: Sequence[Sequence[float]] | None = None,
    j: int | None = None,
) -> np.ndarray:
    """Feature vector f_{m,k} at one history point ``d_bar = [(a_0, h_0), ..., (a_m, h_m)]``."""
    if k <= m:
        raise IndexError(f"blip features need k > m, got m={m}, k={k}")
    return features_for_history(model, m, k, _history_from_point(m, d_bar, l_bar), j)[0]


def blip_value(
    model: BlipModel,
    psi: np.ndarray,
    m: int,
    k: int,
    d_bar: Sequence[tuple[float, Sequence[float] | float]],
    l_bar: Sequence[Sequence[float]] | None = None,
    j: int | None = None,
) -> float:
    return float(blip_features(model, m, k, d_bar, l_bar, j) @ np.asarray(psi, dtype=float))


def cluster_blip_values(
    model: BlipModel,
    psi: np.ndarray,
    m: int,
    k: int,
    members: Sequence[tuple[Sequence[tuple[float, Sequence[float]]], Sequence[Sequence[float]] | None]],
) -> np.ndarray:
    """One blip per cluster member, each evaluated with that member's term list."""
    return np.array(
        [blip_value(model, psi, m, k, d_bar, l_bar, j=j) for j, (d_bar, l_bar) in enumerate(members)]
    )


def unit_features(model: BlipModel, mapped: MappedPanel, m: int, k: int) -> np.ndarray:
    """f_{m,k} for every unit of the mapped panel, shape (n, n_params)."""
    if not 0 <= m < k <= mapped.tau:
        raise IndexError(f"need 0 <= m < k <= tau, got m={m}, k={k}, tau={mapped.tau}")
    out = np.zeros((mapped.n_units, model.n_params))
    if mapped.mode is StructureKind.CLUSTER and model.member_scoped:
        for j in range(mapped.group_size):
            units = mapped.groups[:, j]
            out[units] = features_for_history(model, m, k, mapped.history(m, units), j)
    else:
        out[:] = features_for_history(model, m, k, mapped.history(m))
    return out


def feature_tensor(model: BlipModel, mapped: MappedPanel, m: int, k: int) -> np.ndarray:
    """Features arranged by sampling group, shape (G, J, n_params)."""
    return unit_features(model, mapped, m, k)[mapped.groups]


def blip_matrix(model: BlipModel, psi: np.ndarray, mapped: MappedPanel) -> np.ndarray:
    """gamma[i, m, k] = gamma_{m,k} for unit i; zero where k <= m."""
    psi = np.asarray(psi, dtype=float)
    tau = mapped.tau
    gamma = np.zeros((mapped.n_units, tau, tau + 1))
    for m in range(tau):
        for k in range(m + 1, tau + 1):
            gamma[:, m, k] = unit_features(model, mapped, m, k) @ psi
    return gamma


@dataclass(frozen=True, slots=True)
class BlippedOutcome:
    """H[i, m, k] for m <= k; entries with m > k are NaN."""

    H: np.ndarray

    def at(self, m: int, k: int) -> np.ndarray:
        if m > k:
            raise IndexError(f"H is defined for m <= k, got m={m}, k={k}")
        return self.H[:, m, k]

    def mean(self, m: int, k: int) -> float:
        return float(self.at(m, k).mean())


def blip_down(model: BlipModel, psi: np.ndarray, mapped: MappedPanel) -> BlippedOutcome:
    check_model(model, mapped)
    if len(psi) != model.n_params:
        raise DimensionMismatch(f"psi has {len(psi)} entries, model has {model.n_params} parameters")
    gamma = blip_matrix(model, psi, mapped)
    Y = mapped.outcome
    tau = mapped.tau
    H = np.full((mapped.n_units, tau + 1, tau + 1), np.nan)
    for k in range(tau + 1):
        H[:, k, k] = Y[:, k]
        # accumulate backwards so H[m][k] = Y_k - sum_{j=m}^{k-1} gamma_{j,k}
        for m in range(k - 1, -1, -1):
            H[:, m, k] = H[:, m + 1, k] - gamma[:, m, k]
    return BlippedOutcome(H=H)


NETWORK_SATURATED_MODEL = """\
[m=0]
psi1: a[m]
psi2: h[m][0]
psi3: a[m]*timegap
psi4: h[m][0]*timegap
psi5: a[m]*h[m][0]
psi6: a[m]*h[m][0]*timegap
[m=1,k=2]
psi7: a[m]
psi8: h[m][0]
psi9: a[m]*h[m][0]
psi10: a[m]*h[m-1][0]
psi11: h[m][0]*a[m-1]
psi12: h[m][0]*h[m-1][0]
psi13: a[m]*h[m][0]*h[m-1][0]
"""

APPLICATION_MODEL = """\
[m=0]
psi1: a[m]
psi2: h[m][0]
psi3: a[m]*timegap
psi4: h[m][0]*timegap
psi5: a[m]*h[m][0]
psi6: a[m]*h[m][0]*timegap
[m=1,k=2]
psi7: a[m]
psi8: h[m][0]
psi9: a[m]*h[m-1][0]
psi10: h[m][0]*a[m-1]
psi11: h[m][0]*h[m-1][0]
"""

CLUSTER_SYMMETRIC_MODEL = """\
[m=0,k=1,j=0]
psi01_1: a[m]
psi01_2: h[m][1]
[m=0,k=1,j=1]
psi01_1: a[m]
psi01_2: h[m][0]
[m=0,k=2,j=0]
psi02_1: a[m]
psi02_2: h[m][1]
[m=0,k=2,j=1]
psi02_1: a[m]
psi02_2: h[m][0]
[m=1,k=2,j=0]
psi12_1: a[m]
psi12_2: h[m][1]
psi12_3: a[m]*h[m-1][1]
psi12_3: a[m]*h[m][1]
[m=1,k=2,j=1]
psi12_1: a[m]
psi12_2: h[m][0]
psi12_3: a[m]*h[m-1][0]
psi12_3: a[m]*h[m][0]
"""

NO_INTERFERENCE_MODEL = """\
[m=0,k=1]
psi01: a[m]
[m=0,k=2]
psi02: a[m]
[m=1,k=2]
psi12: a[m]
"""

BUILTIN_MODELS = {
    "network_saturated": NETWORK_SATURATED_MODEL,
    "application": APPLICATION_MODEL,
    "cluster_symmetric": CLUSTER_SYMMETRIC_MODEL,
    "no_interference": NO_INTERFERENCE_MODEL,
}


def builtin_model(name: str) -> BlipModel:
    try:
        return parse_blip_spec(BUILTIN_MODELS[name])
    except KeyError:
        raise KeyError(f"Unknown built-in model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
