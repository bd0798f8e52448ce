"""
Panel, graph and cluster ingestion.

- Panels are long-format delimited text, one row per (unit, time).
- Unit ids are opaque strings mapped to dense indices in order of first
  appearance; cluster member order j follows the same rule.
- Loading raises on the first hard error; `validate_panel` collects every
  issue into a ValidationReport instead.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import IO

import numpy as np
import pandas as pd

from app.core.exceptions import (
    DimensionMismatch,
    ParseError,
    SelfLoop,
    UnbalancedPanel,
    UnknownUnit,
)
from app.core.types import ClusterMap, NetworkGraph, PanelDataset, ValidationReport
from app.panel.graphs import from_edges

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class PanelSchema:
    """Column-role declaration for a panel file."""

    unit: str = "unit"
    time: str = "time"
    exposure: str = "exposure"
    outcome: str = "outcome"
    covariates: tuple[str, ...] = ()
    cluster: str | None = None
    x_km: str | None = None
    y_km: str | None = None
    delimiter: str = ","
    alphabet: tuple[float, ...] | None = None

    @property
    def numeric_columns(self) -> tuple[str, ...]:
        cols = (self.exposure, self.outcome, *self.covariates)
        if self.x_km and self.y_km:
            cols = (*cols, self.x_km, self.y_km)
        return cols


def _numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column].str.strip()
    missing = raw == ""
    if missing.any():
        row = int(np.flatnonzero(missing.to_numpy())[0])
        raise ParseError(
            f"Missing cell in column '{column}' at data row {row + 1}",
            row=row + 1,
            column=column,
        )
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(
            f"Non-numeric value {raw.iloc[row]!r} in column '{column}' at data row {row + 1}",
            row=row + 1,
            column=column,
        )
    return values.to_numpy(dtype=float)


def _per_unit_constant(
    values: np.ndarray, unit_index: np.ndarray, n_units: int, column: str
) -> np.ndarray:
    out = np.full(n_units, np.nan)
    out[unit_index] = values
    for idx, value in zip(unit_index, values, strict=True):
        if out[idx] != value:
            raise ParseError(f"Column '{column}' must be constant within a unit", column=column)
    return out


def load_panel(source: str | IO[str], schema: PanelSchema) -> PanelDataset:
    """Read a balanced long panel. Raises UnbalancedPanel / ParseError."""
    frame = pd.read_csv(
        source, sep=schema.delimiter, dtype=str, keep_default_na=False, skipinitialspace=True
    )
    required = [schema.unit, schema.time, *schema.numeric_columns]
    if schema.cluster:
        required.append(schema.cluster)
    absent = [c for c in required if c not in frame.columns]
    if absent:
        raise ParseError(f"Missing required column(s): {', '.join(absent)}", columns=absent)

    units_raw = frame[schema.unit].str.strip()
    if (units_raw == "").any():
        row = int(np.flatnonzero((units_raw == "").to_numpy())[0])
        raise ParseError(f"Missing unit id at data row {row + 1}", row=row + 1, column=schema.unit)
    unit_ids = tuple(dict.fromkeys(units_raw.tolist()))
    unit_pos = {u: i for i, u in enumerate(unit_ids)}
    unit_index = units_raw.map(unit_pos).to_numpy(dtype=np.int64)

    times_f = _numeric(frame, schema.time)
    if not np.all(times_f == np.round(times_f)):
        raise ParseError("Time column must hold integers", column=schema.time)
    times = times_f.astype(np.int64)
    distinct = np.unique(times)
    if distinct[0] != 0 or not np.array_equal(distinct, np.arange(distinct.size)):
        raise UnbalancedPanel(
            f"Time indices must be consecutive integers starting at 0, got {distinct.tolist()}"
        )
    n_units, n_times = len(unit_ids), int(distinct.size)
    tau = n_times - 1
    if tau < 1:
        raise UnbalancedPanel("A panel needs at least two time points")

    seen = np.zeros((n_units, n_times), dtype=np.int64)
    np.add.at(seen, (unit_index, times), 1)
    if (seen > 1).any():
        u, t = np.argwhere(seen > 1)[0]
        raise UnbalancedPanel(
            f"Duplicate row for unit {unit_ids[u]!r} at time {t}", unit=unit_ids[u], time=int(t)
        )
    if (seen == 0).any():
        u, t = np.argwhere(seen == 0)[0]
        raise UnbalancedPanel(
            f"Unit {unit_ids[u]!r} has no row for time {t}", unit=unit_ids[u], time=int(t)
        )

    exposure = np.empty((n_units, n_times))
    outcome = np.empty((n_units, n_times))
    exposure[unit_index, times] = _numeric(frame, schema.exposure)
    outcome[unit_index, times] = _numeric(frame, schema.outcome)
    covariates = np.empty((n_units, n_times, len(schema.covariates)))
    for c, name in enumerate(schema.covariates):
        covariates[unit_index, times, c] = _numeric(frame, name)

    if schema.alphabet is not None:
        allowed = np.asarray(schema.alphabet, dtype=float)
        outside = ~np.isin(exposure, allowed)
        if outside.any():
            u, t = np.argwhere(outside)[0]
            raise ParseError(
                f"Exposure {exposure[u, t]!r} for unit {unit_ids[u]!r} at time {t} "
                f"is outside the declared alphabet {list(schema.alphabet)}",
                column=schema.exposure,
            )

    coordinates = None
    if schema.x_km and schema.y_km:
        xs = _per_unit_constant(_numeric(frame, schema.x_km), unit_index, n_units, schema.x_km)
        ys = _per_unit_constant(_numeric(frame, schema.y_km), unit_index, n_units, schema.y_km)
        coordinates = np.column_stack([xs, ys])

    structure: ClusterMap | None = None
    if schema.cluster:
        labels = frame[schema.cluster].str.strip().tolist()
        structure = _clusters_from_pairs(
            ((unit_ids[u], lab) for u, lab in zip(unit_index, labels, strict=True)), unit_ids
        )

    panel = PanelDataset(
        unit_ids=unit_ids,
        exposure=exposure,
        covariates=covariates,
        outcome=outcome,
        structure=structure,
        covariate_names=tuple(schema.covariates),
        coordinates=coordinates,
    )
    logger.info(
        "panel.loaded units=%d tau=%d covariates=%d clusters=%s",
        n_units,
        tau,
        len(schema.covariates),
        structure.n_clusters if structure else "-",
    )
    return panel


def write_panel(panel: PanelDataset, stream: IO[str], schema: PanelSchema) -> None:
    """Serialise a panel in the layout `load_panel` reads."""
    n, n_times = panel.exposure.shape
    unit_col = np.repeat(np.asarray(panel.unit_ids, dtype=object), n_times)
    time_col = np.tile(np.arange(n_times), n)
    data: dict[str, object] = {
        schema.unit: unit_col,
        schema.time: time_col,
        schema.exposure: panel.exposure.reshape(-1),
        schema.outcome: panel.outcome.reshape(-1),
    }
    for c, name in enumerate(schema.covariates):
        data[name] = panel.covariates[:, :, c].reshape(-1)
    if schema.cluster and panel.clusters is not None:
        label = np.empty(n, dtype=object)
        for cid, members in zip(panel.clusters.cluster_ids, panel.clusters.members, strict=True):
            label[list(members)] = cid
        data[schema.cluster] = np.repeat(label, n_times)
    if schema.x_km and schema.y_km and panel.coordinates is not None:
        data[schema.x_km] = np.repeat(panel.coordinates[:, 0], n_times)
        data[schema.y_km] = np.repeat(panel.coordinates[:, 1], n_times)
    pd.DataFrame(data).to_csv(stream, sep=schema.delimiter, index=False)


def _read_pairs(source: str | IO[str]) -> Iterable[tuple[int, list[str]]]:
    if isinstance(source, str):
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = source.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].replace(",", " ").strip()
        if text:
            yield lineno, text.split()


def load_graph(source: str | IO[str], units: Sequence[str]) -> NetworkGraph:
    """Read a whitespace-separated edge list; edges are symmetrised and de-duplicated."""
    index = {u: i for i, u in enumerate(units)}
    edges: list[tuple[int, int]] = []
    for lineno, fields in _read_pairs(source):
        if len(fields) != 2:
            raise ParseError(f"Edge list line {lineno} must hold two unit ids", row=lineno)
        a, b = fields
        for u in (a, b):
            if u not in index:
                raise UnknownUnit(f"Unknown unit id {u!r} on edge list line {lineno}", unit=u)
        if a == b:
            raise SelfLoop(f"Self-loop on unit {a!r} at edge list line {lineno}", unit=a)
        edges.append((index[a], index[b]))
    graph = from_edges(len(units), edges)
    logger.info("graph.loaded nodes=%d edges=%d", graph.n_nodes, graph.n_edges)
    return graph


def _clusters_from_pairs(
    pairs: Iterable[tuple[str, str]], units: Sequence[str]
) -> ClusterMap:
    index = {u: i for i, u in enumerate(units)}
    members: dict[str, list[int]] = {}
    assigned: dict[int, str] = {}
    for unit, cluster in pairs:
        if unit not in index:
            raise UnknownUnit(f"Unknown unit id {unit!r} in cluster map", unit=unit)
        i = index[unit]
        if i in assigned:
            if assigned[i] != cluster:
                raise ParseError(f"Unit {unit!r} is assigned to more than one cluster", unit=unit)
            continue
        assigned[i] = cluster
        members.setdefault(cluster, []).append(i)
    missing = [u for u, i in index.items() if i not in assigned]
    if missing:
        raise ParseError(f"Units without a cluster: {missing[:5]}", units=missing[:5])
    sizes = {len(m) for m in members.values()}
    if len(sizes) != 1:
        raise DimensionMismatch(
            f"All clusters must have the same size, got sizes {sorted(sizes)}", sizes=sorted(sizes)
        )
    return ClusterMap(
        cluster_ids=tuple(members), members=tuple(tuple(m) for m in members.values())
    )


def load_clusters(source: str | IO[str], units: Sequence[str]) -> ClusterMap:
    """Read a two-column `unit cluster` file into a ClusterMap."""
    pairs = []
    for lineno, fields in _read_pairs(source):
        if len(fields) != 2:
            raise ParseError(f"Cluster map line {lineno} must hold 'unit cluster'", row=lineno)
        pairs.append((fields[0], fields[1]))
    # Tolerate a header line.
    if pairs and pairs[0][0] not in units:
        pairs = pairs[1:]
    return _clusters_from_pairs(pairs, units)


def validate_panel(
    panel: PanelDataset, alphabet: Sequence[float] | None = None
) -> ValidationReport:
    """Collect every structural issue without raising."""
    report = ValidationReport()
    for name, arr in (
        ("exposure", panel.exposure),
        ("outcome", panel.outcome),
        ("covariates", panel.covariates),
    ):
        if arr.size and not np.isfinite(arr).all():
            report.error("non_finite", f"{name} holds non-finite values", name)
    if alphabet is not None:
        outside = ~np.isin(panel.exposure, np.asarray(alphabet, dtype=float))
        for u, t in np.argwhere(outside)[:10]:
            report.error(
                "alphabet",
                f"exposure {panel.exposure[u, t]!r} outside alphabet",
                f"unit={panel.unit_ids[u]} time={t}",
            )
    if panel.tau < 1:
        report.error("too_short", "panel needs at least two time points")

    clusters = panel.clusters
    if clusters is not None:
        flat = sorted(i for m in clusters.members for i in m)
        if flat != list(range(panel.n_units)):
            report.error("cluster_partition", "clusters do not partition the unit set")
        if len({len(m) for m in clusters.members}) > 1:
            report.error("cluster_size", "clusters have unequal sizes")

    graph = panel.graph
    if graph is not None:
        if graph.n_nodes != panel.n_units:
            report.error(
                "graph_size", f"graph has {graph.n_nodes} nodes but panel has {panel.n_units} units"
            )
        for i, nbrs in enumerate(graph.adjacency):
            if i in nbrs:
                report.error("self_loop", "self-loop", f"unit={panel.unit_ids[i]}")
            for j in nbrs:
                if j >= len(graph.adjacency) or i not in graph.adjacency[j]:
                    report.error("asymmetric", f"edge {i}->{j} has no reverse edge")
        isolated = sum(1 for nbrs in graph.adjacency if not nbrs)
        if isolated:
            report.warn("isolated_units", f"{isolated} unit(s) have no neighbours")

    if panel.coordinates is None:
        report.warn("no_coordinates", "no coordinates; spatial bootstrap unavailable")
    return report


def write_graph(graph: NetworkGraph, stream: IO[str], units: Sequence[str]) -> None:
    """One `unit unit` line per undirected edge, in the format `load_graph` reads."""
    for i, nbrs in enumerate(graph.adjacency):
        for j in nbrs:
            if i < j:
                stream.write(f"{units[i]} {units[j]}\n")
