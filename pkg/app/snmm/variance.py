"""
Analytic variance estimators for psi-hat: cluster sandwich and network HAC.

Bootstrap estimators live in ``app.snmm.bootstrap`` and return the same
VarianceEstimate type.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import networkx as nx
import numpy as np
from scipy import linalg, sparse, stats

from app.config import settings
from app.core.exceptions import BootstrapError, DimensionMismatch, JacobianSingular, StructureMissing
from app.core.types import NetworkGraph, StructureKind
from app.panel.graphs import to_networkx
from app.snmm.estimator import EstimationResult

logger = logging.getLogger(__name__)


def _bartlett(u: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - np.abs(u), 0.0, None)


def _parzen(u: np.ndarray) -> np.ndarray:
    a = np.abs(u)
    return np.where(a <= 0.5, 1 - 6 * a**2 + 6 * a**3, np.where(a <= 1.0, 2 * (1 - a) ** 3, 0.0))


def _truncated(u: np.ndarray) -> np.ndarray:
    return (np.abs(u) <= 1.0).astype(float)


def _quadratic_spectral(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    x = 6 * np.pi * u / 5
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 25 / (12 * np.pi**2 * u**2) * (np.sin(x) / x - np.cos(x))
    return np.where(u == 0, 1.0, val)


KERNELS = {
    "bartlett": (_bartlett, 1.0),
    "parzen": (_parzen, 1.0),
    "truncated": (_truncated, 1.0),
    "quadratic_spectral": (_quadratic_spectral, math.inf),
}


def kernel_weights(kernel: str, lags: np.ndarray | list[int], bandwidth: float) -> np.ndarray:
    """kappa(s / b_n) for each lag s."""
    try:
        fn, _ = KERNELS[kernel]
    except KeyError:
        raise ValueError(f"Unknown kernel {kernel!r}; choose from {sorted(KERNELS)}") from None
    return fn(np.asarray(lags, dtype=float) / bandwidth)


@dataclass(slots=True, eq=False)
class VarianceEstimate:
    covariance: np.ndarray
    method: str
    labels: tuple[str, ...]
    psi_hat: np.ndarray
    tuning: dict[str, Any] = field(default_factory=dict)
    replicates: np.ndarray | None = None  # (B, P) bootstrap psi draws
    estimand_draws: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def is_bootstrap(self) -> bool:
        return self.replicates is not None

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def wald_intervals(self, level: float = settings.CI_LEVEL) -> np.ndarray:
        z = stats.norm.ppf(0.5 + level / 2)
        se = self.standard_errors()
        return np.column_stack([self.psi_hat - z * se, self.psi_hat + z * se])

    def percentile_intervals(self, level: float = settings.CI_LEVEL) -> np.ndarray:
        if self.replicates is None:
            raise BootstrapError(f"Percentile intervals need bootstrap draws; method is {self.method!r}")
        alpha = 1 - level
        lo, hi = np.quantile(self.replicates, [alpha / 2, 1 - alpha / 2], axis=0)
        return np.column_stack([lo, hi])

    def intervals(self, level: float = settings.CI_LEVEL) -> np.ndarray:
        """Percentile intervals for bootstrap estimates, Wald otherwise."""
        return self.percentile_intervals(level) if self.is_bootstrap else self.wald_intervals(level)

    def linear_combination_se(self, weights: np.ndarray) -> float:
        w = np.asarray(weights, dtype=float)
        return float(np.sqrt(max(float(w @ self.covariance @ w), 0.0)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "labels": list(self.labels),
            "covariance": self.covariance.tolist(),
            "se": self.standard_errors().tolist(),
            "tuning": self.tuning,
        }


def psd_project(matrix: np.ndarray, what: str = "covariance") -> tuple[np.ndarray, float]:
    """Symmetrise and clip negative eigenvalues; returns (matrix, clipped magnitude)."""
    sym = (matrix + matrix.T) / 2
    if sym.size == 0:
        return sym, 0.0
    eigval, eigvec = linalg.eigh(sym)
    clipped = float(-eigval[eigval < 0].sum())
    if clipped > 0:
        logger.warning(
            "variance.psd_clipped what=%s negative_eigenvalues=%s",
            what,
            np.array2string(eigval[eigval < 0], precision=3),
        )
        sym = (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
        sym = (sym + sym.T) / 2
    return sym, clipped


def influence(result: EstimationResult) -> np.ndarray:
    """S_i = A^{-1} g_i(psi-hat) per sampling group, shape (G, P)."""
    A = result.jacobian
    sv = linalg.svdvals(A)
    if sv.size < A.shape[1] or sv.min() <= settings.RANK_TOLERANCE * max(sv.max(), 1e-300):
        raise JacobianSingular("Score Jacobian is singular; cannot form the sandwich")
    if A.shape[0] == A.shape[1]:
        return linalg.solve(A, result.scores.T).T
    return result.scores @ linalg.pinv(A).T


def sandwich_cluster(result: EstimationResult) -> VarianceEstimate:
    """V = (1/N^2) sum_i S_i S_i^T with sampling units = groups."""
    S = influence(result)
    N = S.shape[0]
    V = S.T @ S / N**2
    V, clipped = psd_project(V)
    return VarianceEstimate(
        covariance=V,
        method="sandwich",
        labels=result.labels,
        psi_hat=result.psi_hat,
        tuning={"n_groups": N, "psd_clipped": clipped},
    )


def _graph_for(result: EstimationResult, graph: NetworkGraph | None) -> NetworkGraph:
    graph = graph if graph is not None else result.mapped.panel.graph
    if graph is None:
        raise StructureMissing("Network HAC needs a graph over the sampling units")
    if result.mapped.mode is StructureKind.CLUSTER:
        raise DimensionMismatch("Network HAC is defined over units, not clusters")
    if graph.n_nodes != result.n_groups:
        raise DimensionMismatch(f"Graph has {graph.n_nodes} nodes for {result.n_groups} units")
    return graph


def ring_weight_matrix(graph: NetworkGraph, kernel: str, bandwidth: float, max_lag: int) -> sparse.csr_matrix:
    """K[i, j] = kappa(d(i, j) / b_n) for 1 <= d(i, j) <= max_lag."""
    rows: list[int] = []
    cols: list[int] = []
    dists: list[int] = []
    if max_lag >= 1:
        for i, lengths in nx.all_pairs_shortest_path_length(to_networkx(graph), cutoff=max_lag):
            for j, d in lengths.items():
                if d >= 1:
                    rows.append(i)
                    cols.append(j)
                    dists.append(d)
    weights = kernel_weights(kernel, dists, bandwidth) if dists else np.zeros(0)
    n = graph.n_nodes
    return sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))


def effective_max_lag(kernel: str, bandwidth: float, max_lag: int | None, graph: NetworkGraph) -> int:
    """Largest lag with possibly non-zero weight, capped by the graph diameter."""
    _, support = KERNELS[kernel]
    cap = max_lag
    if math.isfinite(support):
        bound = math.floor(support * bandwidth)
        # kappa vanishes at the edge of compact support except for the truncated kernel
        if kernel != "truncated" and bound == support * bandwidth:
            bound -= 1
        cap = bound if cap is None else min(cap, bound)
    if cap is None:
        g = to_networkx(graph)
        cap = max(
            (nx.diameter(g.subgraph(comp)) for comp in nx.connected_components(g)),
            default=0,
        )
    return max(int(cap), 0)


def network_hac(
    result: EstimationResult,
    graph: NetworkGraph | None = None,
    kernel: str = "bartlett",
    bandwidth: float | None = None,
    max_lag: int | None = None,
) -> VarianceEstimate:
    """V = (1/n) G^{-1} Sigma G^{-T}, Sigma = sum_s kappa(s/b_n) Omega(s) over graph-distance rings."""
    if kernel not in KERNELS:
        raise ValueError(f"Unknown kernel {kernel!r}; choose from {sorted(KERNELS)}")
    graph = _graph_for(result, graph)
    if bandwidth is None:
        bandwidth = float(result.mapped.dependence_radius + 1)
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    if max_lag is not None and max_lag < 0:
        raise ValueError(f"max_lag must be >= 0, got {max_lag}")
    lag = effective_max_lag(kernel, bandwidth, max_lag, graph)

    S = influence(result)
    n = S.shape[0]
    K = ring_weight_matrix(graph, kernel, bandwidth, lag)
    Z = S * float(kernel_weights(kernel, [0], bandwidth)[0]) + K @ S
    V = S.T @ Z / n**2
    V, clipped = psd_project(V, what="hac")
    logger.info("variance.hac kernel=%s bandwidth=%g max_lag=%d clipped=%.3e", kernel, bandwidth, lag, clipped)
    return VarianceEstimate(
        covariance=V,
        method="hac",
        labels=result.labels,
        psi_hat=result.psi_hat,
        tuning={
            "kernel": kernel,
            "bandwidth": bandwidth,
            "max_lag": lag,
            "n_units": n,
            "psd_clipped": clipped,
        },
    )
