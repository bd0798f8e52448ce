"""
Exposure mappings D_{i,m} = (a_{i,m}, h_m(A_m; theta_i)) and exposure recodings.

The mapped panel also fixes the sampling units used downstream: one group per
unit under network (or no) interference, one group of J members per cluster
under cluster interference.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from app.core.exceptions import DimensionMismatch, NotAbsorbing, StructureMissing
from app.core.types import ClusterMap, NetworkGraph, PanelDataset, StructureKind

logger = logging.getLogger(__name__)

NEIGHBOR_KINDS = frozenset({"neighbor_max", "neighbor_sum", "neighbor_mean", "weighted_sum"})
MAPPING_KINDS = NEIGHBOR_KINDS | {"identity_cluster", "direct", "custom"}

CustomMapping = Callable[[int, int, np.ndarray, NetworkGraph | None], Sequence[float]]


@dataclass(frozen=True, slots=True)
class MappingSpec:
    kind: str = "neighbor_max"
    weights: Mapping[tuple[int, int], float] | None = None
    dimension: int | None = None
    function: CustomMapping | None = None
    radius: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in MAPPING_KINDS:
            raise ValueError(f"Unknown mapping kind {self.kind!r}; expected one of {sorted(MAPPING_KINDS)}")
        if self.kind == "custom" and (self.function is None or self.dimension is None):
            raise ValueError("custom mappings need both `function` and `dimension`")

    @property
    def needs_graph(self) -> bool:
        return self.kind in NEIGHBOR_KINDS

    @property
    def dependence_radius(self) -> int:
        if self.radius is not None:
            return self.radius
        return 1 if self.kind in NEIGHBOR_KINDS or self.kind == "custom" else 0


@dataclass(frozen=True, slots=True)
class History:
    """Exposure and covariate histories through time m for a batch of units."""

    m: int
    a: np.ndarray  # (n, m+1)
    h: np.ndarray  # (n, m+1, p)
    l: np.ndarray  # (n, m+1, q)

    @property
    def n(self) -> int:
        return int(self.a.shape[0])

    def d_bar(self, unit: int = 0) -> list[tuple[float, tuple[float, ...]]]:
        return [(float(self.a[unit, t]), tuple(self.h[unit, t].tolist())) for t in range(self.m + 1)]

    def l_bar(self, unit: int = 0) -> list[tuple[float, ...]]:
        return [tuple(self.l[unit, t].tolist()) for t in range(self.m + 1)]


@dataclass(frozen=True, slots=True, eq=False)
class MappedPanel:
    """Panel plus mapped exposures for m in 0..tau-1.

    `groups` is a (G, J) matrix of unit indices: the sampling units.
    """

    panel: PanelDataset
    a: np.ndarray  # (n, tau)
    h: np.ndarray  # (n, tau, p)
    spec: MappingSpec
    groups: np.ndarray
    mode: StructureKind = StructureKind.NETWORK
    source_units: np.ndarray | None = field(default=None)

    @property
    def tau(self) -> int:
        return self.panel.tau

    @property
    def p(self) -> int:
        return int(self.h.shape[2])

    @property
    def n_units(self) -> int:
        return self.panel.n_units

    @property
    def n_groups(self) -> int:
        return int(self.groups.shape[0])

    @property
    def group_size(self) -> int:
        return int(self.groups.shape[1])

    @property
    def zero_element(self) -> tuple[float, tuple[float, ...]]:
        return 0.0, (0.0,) * self.p

    @property
    def dependence_radius(self) -> int:
        return self.spec.dependence_radius

    @property
    def outcome(self) -> np.ndarray:
        return self.panel.outcome

    @property
    def covariates(self) -> np.ndarray:
        return self.panel.covariates

    def is_zero(self, m: int) -> np.ndarray:
        """Per-unit indicator that D_{i,m} is the zero element."""
        return (self.a[:, m] == 0) & np.all(self.h[:, m, :] == 0, axis=1)

    def history(self, m: int, units: np.ndarray | None = None) -> History:
        if not 0 <= m < self.tau:
            raise IndexError(f"time {m} outside 0..{self.tau - 1}")
        sel = slice(None) if units is None else units
        return History(
            m=m,
            a=self.a[sel, : m + 1],
            h=self.h[sel, : m + 1, :],
            l=self.panel.covariates[sel, : m + 1, :],
        )

    def take(self, group_indices: np.ndarray) -> MappedPanel:
        """Resample whole groups; mapped exposures travel with their unit."""
        group_indices = np.asarray(group_indices, dtype=np.int64)
        units = self.groups[group_indices].reshape(-1)
        J = self.group_size
        panel = self.panel
        n_new = units.size
        ids = tuple(f"{panel.unit_ids[u]}#{pos}" for pos, u in enumerate(units))
        structure: ClusterMap | None = None
        if self.mode is StructureKind.CLUSTER:
            structure = ClusterMap(
                cluster_ids=tuple(str(g) for g in range(group_indices.size)),
                members=tuple(
                    tuple(range(g * J, (g + 1) * J)) for g in range(group_indices.size)
                ),
            )
        new_panel = PanelDataset(
            unit_ids=ids,
            exposure=panel.exposure[units],
            covariates=panel.covariates[units],
            outcome=panel.outcome[units],
            structure=structure,
            covariate_names=panel.covariate_names,
            coordinates=None if panel.coordinates is None else panel.coordinates[units],
        )
        base = self.source_units if self.source_units is not None else np.arange(self.n_units)
        return MappedPanel(
            panel=new_panel,
            a=self.a[units],
            h=self.h[units],
            spec=self.spec,
            groups=np.arange(n_new, dtype=np.int64).reshape(-1, J),
            mode=self.mode,
            source_units=base[units],
        )


def _adjacency_matrix(graph: NetworkGraph, spec: MappingSpec) -> sparse.csr_matrix:
    rows, cols, vals = [], [], []
    weights = spec.weights or {}
    for i, nbrs in enumerate(graph.adjacency):
        for j in nbrs:
            rows.append(i)
            cols.append(j)
            vals.append(float(weights.get((i, j), weights.get((j, i), 1.0))))
    n = graph.n_nodes
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _neighbor_max(adj: sparse.csr_matrix, A: np.ndarray) -> np.ndarray:
    n, T = A.shape
    out = np.zeros((n, T))
    has_nbrs = np.diff(adj.indptr) > 0
    if adj.nnz:
        vals = A[adj.indices]
        starts = adj.indptr[:-1][has_nbrs]
        out[has_nbrs] = np.maximum.reduceat(vals, starts, axis=0)
    return out


def apply_mapping(panel: PanelDataset, spec: MappingSpec) -> MappedPanel:
    """Compute D[i][m] for every unit and m in 0..tau-1."""
    tau = panel.tau
    A = panel.exposure[:, :tau]
    n = panel.n_units
    groups = np.arange(n, dtype=np.int64).reshape(-1, 1)
    mode = StructureKind.NETWORK if panel.graph is not None else StructureKind.NONE

    if spec.needs_graph:
        graph = panel.graph
        if graph is None:
            raise StructureMissing(f"Mapping {spec.kind!r} needs a network graph", kind=spec.kind)
        if graph.n_nodes != n:
            raise DimensionMismatch(f"Graph has {graph.n_nodes} nodes for {n} units")
        adj = _adjacency_matrix(graph, spec)
        if spec.kind == "neighbor_max":
            h = _neighbor_max(adj, A)
        elif spec.kind == "neighbor_mean":
            deg = np.maximum(np.diff(adj.indptr), 1)[:, None]
            h = (adj.sign() @ A) / deg
        elif spec.kind == "neighbor_sum":
            h = adj.sign() @ A
        else:
            h = adj @ A
        h = np.asarray(h, dtype=float)[:, :, None]
    elif spec.kind == "identity_cluster":
        clusters = panel.clusters
        if clusters is None:
            raise StructureMissing("Mapping 'identity_cluster' needs a cluster map")
        groups = clusters.member_matrix()
        mode = StructureKind.CLUSTER
        J = clusters.size
        h = np.empty((n, tau, J))
        for members in groups:
            h[members] = A[members].T[None, :, :]
    elif spec.kind == "direct":
        h = np.zeros((n, tau, 0))
        if panel.clusters is not None:
            groups = panel.clusters.member_matrix()
            mode = StructureKind.CLUSTER
    else:
        assert spec.function is not None and spec.dimension is not None
        p = spec.dimension
        h = np.empty((n, tau, p))
        for m in range(tau):
            column = A[:, m].copy()
            column.setflags(write=False)
            for i in range(n):
                value = np.asarray(spec.function(i, m, column, panel.graph), dtype=float)
                if value.shape != (p,):
                    raise DimensionMismatch(
                        f"Custom mapping returned shape {value.shape} for unit {i}, expected ({p},)"
                    )
                h[i, m] = value

    if spec.dimension is not None and h.shape[2] != spec.dimension:
        raise DimensionMismatch(
            f"Mapping {spec.kind!r} yields p={h.shape[2]}, spec declares p={spec.dimension}"
        )
    a = np.array(A, dtype=float)
    h = np.ascontiguousarray(h, dtype=float)
    for arr in (a, h, groups):
        arr.setflags(write=False)
    logger.debug("mapping.applied kind=%s units=%d p=%d", spec.kind, n, h.shape[2])
    return MappedPanel(panel=panel, a=a, h=h, spec=spec, groups=groups, mode=mode)


def recode_absorbing(panel: PanelDataset) -> PanelDataset:
    """Recode absorbing binary exposure to 1 only at initiation.

    Trajectories already in initiation coding (at most one non-zero entry) are
    returned unchanged, which makes the recoding idempotent.
    """
    E = panel.exposure
    if not np.isin(E, (0.0, 1.0)).all():
        raise NotAbsorbing("Absorbing recoding needs binary exposures")
    monotone = np.all(np.diff(E, axis=1) >= 0, axis=1)
    initiation_coded = E.sum(axis=1) <= 1
    bad = ~(monotone | initiation_coded)
    if bad.any():
        u = int(np.flatnonzero(bad)[0])
        raise NotAbsorbing(
            f"Exposure of unit {panel.unit_ids[u]!r} reverts from 1 to 0: {E[u].tolist()}",
            unit=panel.unit_ids[u],
        )
    first = np.zeros_like(E)
    started = E.any(axis=1)
    first[np.flatnonzero(started), E[started].argmax(axis=1)] = 1.0
    return panel.evolve(exposure=first)


def recode_increments(panel: PanelDataset, level_name: str = "lag_exposure_level") -> PanelDataset:
    """Exposure becomes A_m - A_{m-1} (A_{-1}=0); A_{m-1} is appended to L_m."""
    E = panel.exposure
    lagged = np.zeros_like(E)
    lagged[:, 1:] = E[:, :-1]
    covariates = np.concatenate([panel.covariates, lagged[:, :, None]], axis=2)
    return panel.evolve(
        exposure=E - lagged,
        covariates=covariates,
        covariate_names=(*panel.covariate_names, level_name),
    )


def mapping_histories(mapped: MappedPanel, i: int, m: int) -> History:
    """Full mapped-exposure and covariate history of unit i through time m."""
    return mapped.history(m, units=np.array([i]))
