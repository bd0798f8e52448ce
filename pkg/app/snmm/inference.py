"""Choose and run one of the four variance estimators from a single config object."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass

from app.config import settings
from app.core.exceptions import ConfigError
from app.snmm.bootstrap import moving_block_bootstrap, spatial_block_bootstrap
from app.snmm.estimands import EstimandEstimate, EstimandSpec, estimate_estimand
from app.snmm.estimator import EstimationResult
from app.snmm.variance import KERNELS, VarianceEstimate, network_hac, sandwich_cluster
from app.utils.validation import check_choice

logger = logging.getLogger(__name__)

VARIANCE_METHODS = ("sandwich", "hac", "mbb", "spatial", "none")


@dataclass(frozen=True, slots=True)
class VarianceConfig:
    method: str = "sandwich"
    kernel: str = "bartlett"
    bandwidth: float | None = None
    max_lag: int | None = None
    block_length: int | None = None
    replicates: int = 200
    hex_width_km: float | None = None
    seed: int = settings.DEFAULT_SEED

    def __post_init__(self) -> None:
        check_choice(self.method, VARIANCE_METHODS, "variance.method")
        check_choice(self.kernel, tuple(KERNELS), "variance.kernel")
        if self.method == "mbb" and self.block_length is None:
            raise ConfigError("variance.block_length is required for the moving block bootstrap")
        if self.method == "spatial" and self.hex_width_km is None:
            raise ConfigError("variance.hex_width_km is required for the spatial block bootstrap")
        if self.method in ("mbb", "spatial") and self.replicates < 2:
            raise ConfigError(f"variance.replicates must be >= 2, got {self.replicates}")

    @property
    def is_bootstrap(self) -> bool:
        return self.method in ("mbb", "spatial")

    def with_seed(self, seed: int) -> VarianceConfig:
        return VarianceConfig(**{**asdict(self), "seed": seed})


def compute_variance(
    result: EstimationResult,
    config: VarianceConfig,
    estimands: Sequence[EstimandSpec] = (),
    threads: int | None = None,
) -> VarianceEstimate | None:
    if config.method == "sandwich":
        return sandwich_cluster(result)
    if config.method == "hac":
        return network_hac(result, kernel=config.kernel, bandwidth=config.bandwidth, max_lag=config.max_lag)
    if config.method == "mbb":
        assert config.block_length is not None
        return moving_block_bootstrap(
            result, config.block_length, config.replicates, config.seed, estimands, threads
        )
    if config.method == "spatial":
        assert config.hex_width_km is not None
        return spatial_block_bootstrap(
            result, config.hex_width_km, config.replicates, config.seed, estimands, threads
        )
    return None


def infer(
    result: EstimationResult,
    config: VarianceConfig,
    estimands: Sequence[EstimandSpec] = (),
    threads: int | None = None,
    level: float = settings.CI_LEVEL,
) -> tuple[VarianceEstimate | None, list[EstimandEstimate]]:
    """Variance of psi-hat plus point estimate and interval for every estimand."""
    variance = compute_variance(result, config, estimands, threads)
    rows = [estimate_estimand(result, spec, variance, level) for spec in estimands]
    method = variance.method if variance is not None else "none"
    logger.info("inference.done method=%s n_estimands=%d level=%g", method, len(rows), level)
    return variance, rows
