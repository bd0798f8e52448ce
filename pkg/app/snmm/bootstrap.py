"""
Block bootstraps for psi-hat and derived estimands.

Each replicate resamples whole sampling groups, re-fits both nuisance models and
re-solves the estimating equations. Replicate r, attempt t draws from the RNG
stream keyed by (seed, r, t), so results do not depend on the thread count.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from app.config import settings
from app.core.exceptions import BootstrapError, EstimationError, InvalidSize, StructureMissing
from app.snmm.estimands import EstimandSpec, evaluate_estimand
from app.snmm.estimator import EstimationResult
from app.snmm.exposure_map import MappedPanel
from app.snmm.variance import VarianceEstimate, psd_project
from app.utils.concurrency import ordered_map
from app.utils.seeding import rng_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class BlockPlan:
    """Candidate blocks of group indices; a replicate draws blocks from this list."""

    blocks: tuple[np.ndarray, ...]
    replicate_count: int
    seed: int
    kind: str
    draws_per_replicate: int
    n_groups: int
    block_length: int | None = None
    meta: dict[str, object] = field(default_factory=dict)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        picks = rng.integers(0, len(self.blocks), size=self.draws_per_replicate)
        idx = np.concatenate([self.blocks[p] for p in picks])
        if self.kind == "mbb":
            idx = idx[: self.n_groups]
        return np.sort(idx)


def mbb_plan(n_groups: int, block_length: int, replicates: int, seed: int) -> BlockPlan:
    """Circular overlapping blocks of consecutive indices, ceil(N/L) per replicate."""
    if block_length < 1 or block_length > n_groups:
        raise InvalidSize(f"block length must be in 1..{n_groups}, got {block_length}", n=block_length)
    if replicates < 2:
        raise InvalidSize(f"need at least 2 bootstrap replicates, got {replicates}", n=replicates)
    offsets = np.arange(block_length)
    blocks = tuple((start + offsets) % n_groups for start in range(n_groups))
    return BlockPlan(
        blocks=blocks,
        replicate_count=replicates,
        seed=seed,
        kind="mbb",
        draws_per_replicate=math.ceil(n_groups / block_length),
        n_groups=n_groups,
        block_length=block_length,
    )


def assign_hexagons(
    coordinates: np.ndarray, width: float, anchor: tuple[float, float] | None = None
) -> tuple[np.ndarray, tuple[float, float]]:
    """Flat-top hexagon containing each point, as integer axial (q, r) pairs.

    ``width`` is the vertex-to-vertex width; the grid is anchored at the
    bounding-box minimum corner unless ``anchor`` is given.
    """
    if width <= 0:
        raise ValueError(f"hexagon width must be > 0, got {width}")
    xy = np.asarray(coordinates, dtype=float)
    if anchor is None:
        anchor = (float(xy[:, 0].min()), float(xy[:, 1].min()))
    size = width / 2
    x = xy[:, 0] - anchor[0]
    y = xy[:, 1] - anchor[1]
    q = (2.0 / 3.0) * x / size
    r = (-x / 3.0 + math.sqrt(3) / 3.0 * y) / size
    # cube rounding
    cx, cz = q, r
    cy = -cx - cz
    rx, ry, rz = np.round(cx), np.round(cy), np.round(cz)
    dx, dy, dz = np.abs(rx - cx), np.abs(ry - cy), np.abs(rz - cz)
    fix_x = (dx > dy) & (dx > dz)
    fix_y = ~fix_x & (dy > dz)
    rx = np.where(fix_x, -ry - rz, rx)
    rz = np.where(~fix_x & ~fix_y, -rx - ry, rz)
    return np.column_stack([rx, rz]).astype(np.int64), anchor


def group_coordinates(mapped: MappedPanel) -> np.ndarray:
    coords = mapped.panel.coordinates
    if coords is None and mapped.panel.graph is not None:
        coords = mapped.panel.graph.coordinates
    if coords is None:
        raise StructureMissing("Spatial block bootstrap needs coordinates for every unit")
    coords = np.asarray(coords, dtype=float)
    if np.isnan(coords).any():
        raise StructureMissing("Some units have no coordinates")
    return coords[mapped.groups].mean(axis=1)


def spatial_plan(
    mapped: MappedPanel, hex_width_km: float, replicates: int, seed: int
) -> BlockPlan:
    if replicates < 2:
        raise InvalidSize(f"need at least 2 bootstrap replicates, got {replicates}", n=replicates)
    cells, anchor = assign_hexagons(group_coordinates(mapped), hex_width_km)
    _, block_ids = np.unique(cells, axis=0, return_inverse=True)
    block_ids = block_ids.reshape(-1)
    n_blocks = int(block_ids.max()) + 1
    blocks = tuple(np.flatnonzero(block_ids == b) for b in range(n_blocks))
    degenerate = n_blocks == 1
    if degenerate:
        logger.warning("bootstrap.spatial_degenerate hex_width_km=%g blocks=1", hex_width_km)
    return BlockPlan(
        blocks=blocks,
        replicate_count=replicates,
        seed=seed,
        kind="spatial",
        draws_per_replicate=n_blocks,
        n_groups=mapped.n_groups,
        meta={"anchor": list(anchor), "n_blocks": n_blocks, "degenerate": degenerate},
    )


@dataclass(slots=True)
class _Replicate:
    psi: np.ndarray
    estimands: dict[str, float]
    attempts: int


def _run_replicate(
    result: EstimationResult,
    plan: BlockPlan,
    estimands: Sequence[EstimandSpec],
    r: int,
    max_retries: int,
) -> _Replicate:
    last: EstimationError | None = None
    for attempt in range(max_retries + 1):
        rng = rng_for(plan.seed, r, attempt)
        idx = plan.sample(rng)
        resampled = result.mapped.take(idx)
        try:
            fit = result.refit(resampled)
        except EstimationError as exc:
            last = exc
            logger.debug("bootstrap.replicate_retry r=%d attempt=%d code=%s", r, attempt, exc.code)
            continue
        values = {spec.name: evaluate_estimand(fit, spec) for spec in estimands}
        return _Replicate(psi=fit.psi_hat, estimands=values, attempts=attempt + 1)
    raise BootstrapError(
        f"Bootstrap replicate {r} failed {max_retries + 1} times; last error: {last}",
        replicate=r,
        last_code=getattr(last, "code", None),
    )


def run_bootstrap(
    result: EstimationResult,
    plan: BlockPlan,
    estimands: Sequence[EstimandSpec] = (),
    threads: int | None = None,
    max_retries: int = settings.BOOTSTRAP_MAX_RETRIES,
) -> VarianceEstimate:
    reps = ordered_map(
        lambda r: _run_replicate(result, plan, estimands, r, max_retries),
        range(plan.replicate_count),
        threads,
    )
    draws = np.vstack([rep.psi for rep in reps])
    cov = np.atleast_2d(np.cov(draws, rowvar=False, ddof=1))
    cov, clipped = psd_project(cov, what=plan.kind)
    retries = sum(rep.attempts - 1 for rep in reps)
    tuning: dict[str, object] = {
        "replicates": plan.replicate_count,
        "seed": plan.seed,
        "retries": retries,
        "psd_clipped": clipped,
        **plan.meta,
    }
    if plan.block_length is not None:
        tuning["block_length"] = plan.block_length
    logger.info("bootstrap.done kind=%s replicates=%d retries=%d", plan.kind, plan.replicate_count, retries)
    return VarianceEstimate(
        covariance=cov,
        method=plan.kind,
        labels=result.labels,
        psi_hat=result.psi_hat,
        tuning=tuning,
        replicates=draws,
        estimand_draws={spec.name: np.array([rep.estimands[spec.name] for rep in reps]) for spec in estimands},
    )


def moving_block_bootstrap(
    result: EstimationResult,
    block_length: int,
    replicates: int,
    seed: int = settings.DEFAULT_SEED,
    estimands: Sequence[EstimandSpec] = (),
    threads: int | None = None,
) -> VarianceEstimate:
    """Moving block bootstrap over the group order (e.g. position on a line network)."""
    plan = mbb_plan(result.n_groups, block_length, replicates, seed)
    return run_bootstrap(result, plan, estimands, threads)


def spatial_block_bootstrap(
    result: EstimationResult,
    hex_width_km: float,
    replicates: int,
    seed: int = settings.DEFAULT_SEED,
    estimands: Sequence[EstimandSpec] = (),
    threads: int | None = None,
) -> VarianceEstimate:
    """Resample hexagonal spatial blocks with replacement."""
    plan = spatial_plan(result.mapped, hex_width_km, replicates, seed)
    estimate = run_bootstrap(result, plan, estimands, threads)
    estimate.tuning["hex_width_km"] = hex_width_km
    return estimate
