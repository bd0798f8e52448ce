from __future__ import annotations

import math
from collections.abc import Collection

from app.core.exceptions import ConfigError


def check_probability(value: float, name: str) -> float:
    """Open-interval check: 0 < value < 1."""
    if not (isinstance(value, (int, float)) and 0.0 < value < 1.0):
        raise ConfigError(f"{name} must lie in (0, 1), got {value!r}", key=name)
    return float(value)


def check_positive(value: float, name: str, *, allow_zero: bool = False) -> float:
    ok = value >= 0 if allow_zero else value > 0
    if not ok or not math.isfinite(value):
        bound = ">= 0" if allow_zero else "> 0"
        raise ConfigError(f"{name} must be {bound}, got {value!r}", key=name)
    return value


def check_choice(value: str, choices: Collection[str], name: str) -> str:
    if value not in choices:
        raise ConfigError(f"{name} must be one of {sorted(choices)}, got {value!r}", key=name)
    return value


def check_level(level: float) -> float:
    """Confidence level for intervals."""
    return check_probability(level, "level")
