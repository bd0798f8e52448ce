"""
Simulated panels with known blip parameters.

* network_line: units on a line, absorbing binary exposure, spillover through
  the max of the two neighbours' exposures, saturated two-period blip model.
* cluster_pairs: two-unit clusters, symmetric blips with one interaction term.
* synthetic_county_lattice: square grid of counties grouped into states with
  staggered state-level adoption; spillover crosses state borders only.

Every generator returns a MappedPanel ready for `solve_psi`.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from app.config import settings, strings
from app.core.exceptions import ConfigError, InvalidSize
from app.core.types import ClusterMap, PanelDataset
from app.panel.graphs import from_edges, lattice_graph, line_graph
from app.snmm.blip import (
    APPLICATION_MODEL,
    CLUSTER_SYMMETRIC_MODEL,
    NETWORK_SATURATED_MODEL,
    BlipModel,
    blip_features,
    blip_matrix,
    parse_blip_spec,
)
from app.snmm.estimands import EstimandSpec
from app.snmm.exposure_map import MappedPanel, MappingSpec, apply_mapping, recode_absorbing
from app.utils.seeding import rng_for
from app.utils.validation import check_choice, check_positive, check_probability

logger = logging.getLogger(__name__)

NETWORK_PSI = (1.0, 0.5, -0.1, -0.1, -0.2, -0.05, 1.0, 0.5, -0.1, -0.1, -0.1, -0.05, -0.05)
CLUSTER_PSI = (1.0, 0.5, 2.0, 1.0, 0.75, 0.25, 0.1)
APPLICATION_PSI = (-0.3, 0.0, -0.5, 0.0, 0.0, 0.0, -0.3, 0.0, 0.0, 0.0, 0.0)

NOISE_CONVENTIONS = ("variance", "sd")
# N(mu, 0.1) read as variance 0.1 or as SD 0.1
_NOMINAL_NOISE = 0.1

DGP_NAMES = ("network_line", "cluster_pairs")

# (m, k, ((a_0, h_0), ..., (a_m, h_m))) cells reported for the network design
NETWORK_TABLE_CELLS: tuple[tuple[int, int, tuple[tuple[float, tuple[float, ...]], ...]], ...] = (
    (0, 1, ((1.0, (0.0,)),)),
    (0, 1, ((1.0, (1.0,)),)),
    (0, 1, ((0.0, (1.0,)),)),
    (0, 2, ((1.0, (0.0,)),)),
    (0, 2, ((1.0, (1.0,)),)),
    (0, 2, ((0.0, (1.0,)),)),
    (1, 2, ((0.0, (0.0,)), (1.0, (0.0,)))),
    (1, 2, ((0.0, (1.0,)), (1.0, (0.0,)))),
    (1, 2, ((0.0, (0.0,)), (1.0, (1.0,)))),
    (1, 2, ((0.0, (1.0,)), (1.0, (1.0,)))),
    (1, 2, ((0.0, (0.0,)), (0.0, (1.0,)))),
    (1, 2, ((0.0, (1.0,)), (0.0, (1.0,)))),
    (1, 2, ((1.0, (0.0,)), (0.0, (1.0,)))),
)

# (r, m, k) superscript/subscript of each cluster-model coefficient, in model order
CLUSTER_PSI_INDEX = ((1, 0, 1), (2, 0, 1), (1, 0, 2), (2, 0, 2), (1, 1, 2), (2, 1, 2), (3, 1, 2))

# state adoption codes: 0 adopts at t=0, 1 adopts at t=1, 2 never; tiled over the state grid
_STATE_PATTERN = np.array(
    [
        [0, 0, 1, 2],
        [1, 2, 0, 0],
        [2, 0, 1, 2],
        [0, 1, 2, 0],
    ]
)


def _resolve_sd(noise_sd: float | None, convention: str) -> float:
    if noise_sd is not None:
        return noise_sd
    return math.sqrt(_NOMINAL_NOISE) if convention == "variance" else _NOMINAL_NOISE


def _check_common(base_rate: float, confounder_effect: float, convention: str, noise_sd: float | None) -> None:
    check_probability(base_rate, "base_rate")
    check_probability(base_rate + confounder_effect, "base_rate + confounder_effect")
    check_choice(convention, NOISE_CONVENTIONS, "noise_convention")
    if noise_sd is not None:
        check_positive(noise_sd, "noise_sd", allow_zero=True)


@dataclass(frozen=True, slots=True)
class NetworkDGPConfig:
    name: ClassVar[str] = "network_line"

    n_units: int = 5000
    seed: int = settings.DEFAULT_SEED
    psi: tuple[float, ...] = NETWORK_PSI
    confounder_effect: float = 0.2
    base_rate: float = 0.3
    noise_sd: float | None = None
    noise_convention: str = "variance"
    outcome_noise: bool = True
    spacing_km: float = 1.0

    def __post_init__(self) -> None:
        if self.n_units < 3:
            raise InvalidSize(f"The network design needs at least 3 units, got {self.n_units}", n=self.n_units)
        if len(self.psi) != len(NETWORK_PSI):
            raise ConfigError(f"psi needs {len(NETWORK_PSI)} values, got {len(self.psi)}")
        _check_common(self.base_rate, self.confounder_effect, self.noise_convention, self.noise_sd)

    @property
    def sd(self) -> float:
        return _resolve_sd(self.noise_sd, self.noise_convention)

    def with_seed(self, seed: int) -> NetworkDGPConfig:
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict[str, object]:
        return {**dataclasses.asdict(self), "name": self.name, "resolved_noise_sd": self.sd}


@dataclass(frozen=True, slots=True)
class ClusterDGPConfig:
    name: ClassVar[str] = "cluster_pairs"
    cluster_size: ClassVar[int] = 2

    n_clusters: int = 5000
    seed: int = settings.DEFAULT_SEED
    psi: tuple[float, ...] = CLUSTER_PSI
    confounder_effect: float = 0.2
    base_rate: float = 0.3
    noise_sd: float | None = None
    noise_convention: str = "variance"
    outcome_noise: bool = True

    def __post_init__(self) -> None:
        if self.n_clusters < 1:
            raise InvalidSize(f"Need at least one cluster, got {self.n_clusters}", n=self.n_clusters)
        if len(self.psi) != len(CLUSTER_PSI):
            raise ConfigError(f"psi needs {len(CLUSTER_PSI)} values, got {len(self.psi)}")
        _check_common(self.base_rate, self.confounder_effect, self.noise_convention, self.noise_sd)

    @property
    def sd(self) -> float:
        return _resolve_sd(self.noise_sd, self.noise_convention)

    def with_seed(self, seed: int) -> ClusterDGPConfig:
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict[str, object]:
        return {**dataclasses.asdict(self), "name": self.name, "resolved_noise_sd": self.sd}


DGPConfig = NetworkDGPConfig | ClusterDGPConfig


def network_model() -> BlipModel:
    return parse_blip_spec(NETWORK_SATURATED_MODEL)


def cluster_model() -> BlipModel:
    return parse_blip_spec(CLUSTER_SYMMETRIC_MODEL)


def model_for(config: DGPConfig) -> BlipModel:
    return network_model() if isinstance(config, NetworkDGPConfig) else cluster_model()


def _with_blips(
    mapped: MappedPanel,
    model: BlipModel,
    psi: tuple[float, ...],
    untreated: np.ndarray,
    noise_sd: float,
    rng: np.random.Generator,
) -> MappedPanel:
    """Observed Y_k = Y_k(0) + sum_{m<k} gamma_{m,k} (+ optional fresh noise for k >= 1)."""
    gamma = blip_matrix(model, np.asarray(psi, dtype=float), mapped)
    outcome = untreated + gamma.sum(axis=1)
    if noise_sd > 0:
        outcome[:, 1:] += rng.normal(0.0, noise_sd, size=outcome[:, 1:].shape)
    panel = mapped.panel.evolve(outcome=outcome)
    return dataclasses.replace(mapped, panel=panel)


def _absorbing_exposure(rng: np.random.Generator, p: np.ndarray, tau: int = 2) -> np.ndarray:
    """A_0 ~ Bern(p), A_1 ~ (1 - A_0) Bern(p); column tau is carried as zero."""
    a0 = rng.binomial(1, p)
    a1 = (1 - a0) * rng.binomial(1, p)
    exposure = np.zeros((p.size, tau + 1))
    exposure[:, 0] = a0
    exposure[:, 1] = a1
    return exposure


def gen_network_dgp(config: NetworkDGPConfig) -> MappedPanel:
    rng = rng_for(config.seed)
    n = config.n_units
    sd = config.sd
    u = rng.binomial(1, 0.5, size=n)
    untreated = rng.normal(u[:, None].astype(float), sd, size=(n, 3))
    exposure = _absorbing_exposure(rng, config.base_rate + config.confounder_effect * u)

    coords = np.column_stack([np.arange(n) * config.spacing_km, np.zeros(n)])
    graph = line_graph(n).with_coordinates(coords)
    panel = PanelDataset(
        unit_ids=tuple(f"u{i}" for i in range(n)),
        exposure=exposure,
        covariates=np.zeros((n, 3, 0)),
        outcome=untreated,
        structure=graph,
        coordinates=coords,
    )
    mapped = apply_mapping(recode_absorbing(panel), MappingSpec(kind="neighbor_max"))
    out = _with_blips(
        mapped, network_model(), config.psi, untreated, sd if config.outcome_noise else 0.0, rng
    )
    logger.debug("dgp.network n=%d seed=%d sd=%.4f", n, config.seed, sd)
    return out


def gen_cluster_dgp(config: ClusterDGPConfig) -> MappedPanel:
    rng = rng_for(config.seed)
    G, J = config.n_clusters, config.cluster_size
    n = G * J
    sd = config.sd
    u = np.repeat(rng.binomial(1, 0.5, size=G), J)
    untreated = rng.normal(u[:, None].astype(float), sd, size=(n, 3))
    exposure = _absorbing_exposure(rng, config.base_rate + config.confounder_effect * u)

    clusters = ClusterMap(
        cluster_ids=tuple(f"c{c}" for c in range(G)),
        members=tuple(tuple(range(c * J, (c + 1) * J)) for c in range(G)),
    )
    panel = PanelDataset(
        unit_ids=tuple(f"c{c}_{j}" for c in range(G) for j in range(J)),
        exposure=exposure,
        covariates=np.zeros((n, 3, 0)),
        outcome=untreated,
        structure=clusters,
    )
    mapped = apply_mapping(recode_absorbing(panel), MappingSpec(kind="identity_cluster"))
    out = _with_blips(
        mapped, cluster_model(), config.psi, untreated, sd if config.outcome_noise else 0.0, rng
    )
    logger.debug("dgp.cluster clusters=%d seed=%d sd=%.4f", G, config.seed, sd)
    return out


def generate(config: DGPConfig) -> MappedPanel:
    if isinstance(config, NetworkDGPConfig):
        return gen_network_dgp(config)
    return gen_cluster_dgp(config)


def network_table_estimands() -> list[EstimandSpec]:
    return [
        EstimandSpec(kind="blip_at", m=m, k=k, history=hist, label=strings.blip_cell_label(m, k, hist))
        for m, k, hist in NETWORK_TABLE_CELLS
    ]


def estimand_truth(model: BlipModel, psi: tuple[float, ...], spec: EstimandSpec) -> float:
    """True value of a blip_at cell, straight from the blip formula at the true psi."""
    if spec.kind != "blip_at" or spec.m is None or spec.history is None:
        raise ConfigError(f"Truth is only defined for blip_at cells, got {spec.kind!r}")
    feats = blip_features(model, spec.m, spec.k, spec.history, spec.covariates, j=spec.member)
    return float(feats @ np.asarray(psi, dtype=float))


def naive_untreated_limit(config: NetworkDGPConfig) -> float:
    """Large-N value of E[Y_2(0)] estimated by the fit that ignores spillover.

    Own history is the only stratum, so never-exposed units act as controls and
    their spillover stays in the estimate:

        E[U] + gamma_{0,2}(0, h_0=1) P(H_0=1) + E[gamma_{1,2} | a_0 = a_1 = 0]

    Neighbours' exposures are independent of a unit's own, which gives the
    neighbourhood probabilities in closed form. The two end units are ignored.
    """
    p = config.base_rate + config.confounder_effect * np.array([0.0, 1.0])
    first = float(p.mean())  # P(A_0 = 1)
    second = float(((1.0 - p) * p).mean())  # P(A_1 = 1)
    never = 1.0 - first - second
    h0 = 1.0 - (1.0 - first) ** 2
    h1_only = (1.0 - first) ** 2 - never**2  # H_0 = 0, H_1 = 1
    h1_both = 1.0 - (1.0 - second) ** 2 - h1_only

    model, psi = network_model(), np.asarray(config.psi, dtype=float)
    early = float(blip_features(model, 0, 2, ((0.0, (1.0,)),)) @ psi)
    late = float(blip_features(model, 1, 2, ((0.0, (0.0,)), (0.0, (1.0,)))) @ psi)
    both = float(blip_features(model, 1, 2, ((0.0, (1.0,)), (0.0, (1.0,)))) @ psi)
    return 0.5 + early * h0 + late * h1_only + both * h1_both


def cluster_psi_labels() -> tuple[str, ...]:
    return tuple(strings.psi_component_label(r, m, k) for r, m, k in CLUSTER_PSI_INDEX)


@dataclass(frozen=True, slots=True)
class CountyLattice:
    mapped: MappedPanel
    model: BlipModel
    psi: tuple[float, ...]
    state_of: np.ndarray = field(repr=False)


def synthetic_county_lattice(
    n_side: int = 20,
    spacing_km: float = 25.0,
    seed: int = settings.DEFAULT_SEED,
    *,
    state_side: int = 5,
    psi: tuple[float, ...] = APPLICATION_PSI,
    noise_sd: float = 0.5,
) -> CountyLattice:
    """Counties on an n_side x n_side grid, states are state_side x state_side tiles.

    Edges join rook-adjacent counties in different states, so h_m = 1 exactly when
    some bordering out-of-state county has adopted. Exposure is initiation coded.
    """
    if n_side < 2 * state_side or n_side % state_side:
        raise InvalidSize(
            f"n_side must be a multiple of state_side={state_side} covering at least two states, got {n_side}",
            n=n_side,
        )
    model = parse_blip_spec(APPLICATION_MODEL)
    if len(psi) != model.n_params:
        raise ConfigError(f"psi needs {model.n_params} values, got {len(psi)}")
    rng = rng_for(seed)
    n = n_side * n_side
    rows, cols = np.divmod(np.arange(n), n_side)
    state_row, state_col = rows // state_side, cols // state_side
    states_per_side = n_side // state_side
    state_of = state_row * states_per_side + state_col
    code = _STATE_PATTERN[state_row % 4, state_col % 4]

    exposure = np.zeros((n, 3))
    exposure[code == 0, 0] = 1.0
    exposure[code == 1, 1] = 1.0

    full = lattice_graph(n_side, spacing_km)
    edges = [(i, j) for i, nbrs in enumerate(full.adjacency) for j in nbrs if i < j and state_of[i] != state_of[j]]
    coords = full.coordinates
    assert coords is not None
    graph = from_edges(n, edges).with_coordinates(coords)

    baseline = rng.normal(12.0, 3.0, size=n)
    trend = np.array([0.0, -0.4, -0.8])
    untreated = baseline[:, None] + trend[None, :] + rng.normal(0.0, noise_sd, size=(n, 3))
    panel = PanelDataset(
        unit_ids=tuple(f"county{i:04d}" for i in range(n)),
        exposure=exposure,
        covariates=np.zeros((n, 3, 0)),
        outcome=untreated,
        structure=graph,
        coordinates=coords,
    )
    mapped = apply_mapping(panel, MappingSpec(kind="neighbor_max"))
    mapped = _with_blips(mapped, model, psi, untreated, 0.0, rng)
    logger.debug("dgp.county_lattice counties=%d states=%d", n, states_per_side**2)
    return CountyLattice(mapped=mapped, model=model, psi=tuple(psi), state_of=state_of)


APPLICATION_CELLS = NETWORK_TABLE_CELLS[:6]


def application_estimands() -> list[EstimandSpec]:
    return [
        EstimandSpec(kind="blip_at", m=m, k=k, history=hist, label=strings.blip_cell_label(m, k, hist))
        for m, k, hist in APPLICATION_CELLS
    ]
