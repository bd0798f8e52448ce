from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class StructureKind(Enum):
    NONE = "none"
    CLUSTER = "cluster"
    NETWORK = "network"


@dataclass(frozen=True, slots=True)
class ClusterMap:
    """Partition of units into equally sized clusters.

    `members[c]` lists unit indices in within-cluster order j = 0..J-1, which is
    the order of first appearance in the input file.
    """

    cluster_ids: tuple[str, ...]
    members: tuple[tuple[int, ...], ...]

    @property
    def size(self) -> int:
        return len(self.members[0]) if self.members else 0

    @property
    def n_clusters(self) -> int:
        return len(self.members)

    def cluster_of(self, unit: int) -> int:
        for c, group in enumerate(self.members):
            if unit in group:
                return c
        raise KeyError(unit)

    def member_matrix(self) -> np.ndarray:
        return np.asarray(self.members, dtype=np.int64)


@dataclass(frozen=True, slots=True, eq=False)
class NetworkGraph:
    """Undirected graph over dense unit indices, optionally with planar coordinates (km)."""

    adjacency: tuple[tuple[int, ...], ...]
    coordinates: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.coordinates is not None:
            object.__setattr__(
                self, "coordinates", _frozen(np.asarray(self.coordinates, dtype=float))
            )

    @property
    def n_nodes(self) -> int:
        return len(self.adjacency)

    @property
    def n_edges(self) -> int:
        return sum(len(nbrs) for nbrs in self.adjacency) // 2

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def with_coordinates(self, coordinates: np.ndarray) -> NetworkGraph:
        return NetworkGraph(adjacency=self.adjacency, coordinates=coordinates)


Structure = ClusterMap | NetworkGraph | None


@dataclass(frozen=True, slots=True, eq=False)
class PanelDataset:
    """Balanced long panel held as dense (unit, time) arrays.

    exposure:   (n, tau+1)      A_{i,m}; the column at tau is carried but never used
    covariates: (n, tau+1, q)   L_{i,m}
    outcome:    (n, tau+1)      Y_{i,k}
    """

    unit_ids: tuple[str, ...]
    exposure: np.ndarray
    covariates: np.ndarray
    outcome: np.ndarray
    structure: Structure = None
    covariate_names: tuple[str, ...] = ()
    coordinates: np.ndarray | None = None

    def __post_init__(self) -> None:
        exposure = np.asarray(self.exposure, dtype=float)
        outcome = np.asarray(self.outcome, dtype=float)
        covariates = np.asarray(self.covariates, dtype=float)
        if covariates.ndim == 2:
            covariates = covariates.reshape(*covariates.shape, 0)
        object.__setattr__(self, "exposure", _frozen(exposure))
        object.__setattr__(self, "outcome", _frozen(outcome))
        object.__setattr__(self, "covariates", _frozen(covariates))
        if self.coordinates is not None:
            object.__setattr__(
                self, "coordinates", _frozen(np.asarray(self.coordinates, dtype=float))
            )

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def tau(self) -> int:
        return int(self.outcome.shape[1]) - 1

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[2])

    @property
    def kind(self) -> StructureKind:
        if isinstance(self.structure, ClusterMap):
            return StructureKind.CLUSTER
        if isinstance(self.structure, NetworkGraph):
            return StructureKind.NETWORK
        return StructureKind.NONE

    @property
    def graph(self) -> NetworkGraph | None:
        return self.structure if isinstance(self.structure, NetworkGraph) else None

    @property
    def clusters(self) -> ClusterMap | None:
        return self.structure if isinstance(self.structure, ClusterMap) else None

    def index_of(self, unit_id: str) -> int:
        return self.unit_ids.index(unit_id)

    def evolve(self, **changes: object) -> PanelDataset:
        return replace(self, **changes)  # type: ignore[arg-type]


@dataclass(frozen=True, slots=True)
class Issue:
    code: str
    message: str
    location: str = ""


@dataclass(slots=True)
class ValidationReport:
    errors: list[Issue] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return not self.errors

    def error(self, code: str, message: str, location: str = "") -> None:
        self.errors.append(Issue(code, message, location))

    def warn(self, code: str, message: str, location: str = "") -> None:
        self.warnings.append(Issue(code, message, location))

    def to_dict(self) -> dict[str, object]:
        return {
            "accepted": self.accepted,
            "errors": [vars_of(i) for i in self.errors],
            "warnings": [vars_of(i) for i in self.warnings],
        }


def vars_of(issue: Issue) -> dict[str, str]:
    return {"code": issue.code, "message": issue.message, "location": issue.location}
