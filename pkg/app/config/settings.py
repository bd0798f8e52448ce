from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

# Basic env loading; run-specific options live in the TOML run config.


def _get(name: str, default: str | None = None, required: bool = False) -> str:
    val = os.getenv(name, default)
    if required and (val is None or val == ""):
        raise RuntimeError(f"Missing required environment variable: {name}")
    return val or ""


BASE_DIR = Path(os.getenv("APP_BASE_DIR", Path.cwd()))
OUTPUT_BASE_DIR = Path(_get("SNMM_OUTPUT_DIR", str(BASE_DIR / "runs")))

LOG_LEVEL = _get("LOG_LEVEL", "INFO")
LOG_JSON = _get("LOG_JSON", "0") in {"1", "true", "True"}

# 0 means "all available cores"
THREADS = int(_get("SNMM_THREADS", "0"))
DEFAULT_SEED = int(_get("SNMM_SEED", "20240601"))

# Numerical tolerances
SCORE_TOLERANCE = 1e-10
RANK_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-12

# Bootstrap / Monte Carlo guard rails
BOOTSTRAP_MAX_RETRIES = 10
MONTE_CARLO_MAX_FAILURE_RATE = 0.05
CI_LEVEL = 0.95


@dataclass(slots=True)
class AppSettings:
    output_dir: Path = OUTPUT_BASE_DIR
    log_level: str = LOG_LEVEL
    log_json: bool = LOG_JSON
    threads: int = THREADS
    seed: int = DEFAULT_SEED

    score_tolerance: float = SCORE_TOLERANCE
    rank_tolerance: float = RANK_TOLERANCE
    bootstrap_max_retries: int = BOOTSTRAP_MAX_RETRIES
    monte_carlo_max_failure_rate: float = MONTE_CARLO_MAX_FAILURE_RATE
    ci_level: float = CI_LEVEL

    def __post_init__(self) -> None:
        if self.threads <= 0:
            self.threads = os.cpu_count() or 1
