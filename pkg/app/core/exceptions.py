from __future__ import annotations

from typing import Any


class SnmmError(Exception):
    """Base error. `code` is stable and machine-readable."""

    code = "snmm_error"

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": str(self), "details": self.details}


# --- data ---------------------------------------------------------------


class DataError(SnmmError):
    code = "data_error"


class UnbalancedPanel(DataError):
    code = "unbalanced_panel"


class ParseError(DataError):
    code = "parse_error"


class UnknownUnit(DataError):
    code = "unknown_unit"


class SelfLoop(DataError):
    code = "self_loop"


class InvalidSize(DataError):
    code = "invalid_size"


class NotAbsorbing(DataError):
    code = "not_absorbing"


class StructureMissing(DataError):
    code = "structure_missing"


class DimensionMismatch(DataError):
    code = "dimension_mismatch"


# --- blip model specification --------------------------------------------


class ModelSpecError(SnmmError):
    code = "model_spec_error"


class SpecParseError(ModelSpecError):
    code = "spec_parse_error"


class LeakageError(ModelSpecError):
    code = "leakage_error"


class ZeroConstraintViolation(ModelSpecError):
    code = "zero_constraint_violation"


# --- estimation -----------------------------------------------------------


class EstimationError(SnmmError):
    code = "estimation_error"


class IdentificationError(EstimationError):
    code = "identification_error"


class PositivityViolation(EstimationError):
    code = "positivity_violation"


class JacobianSingular(EstimationError):
    code = "jacobian_singular"


class EmptySubgroup(EstimationError):
    code = "empty_subgroup"


class BootstrapError(EstimationError):
    code = "bootstrap_error"


class MonteCarloError(EstimationError):
    code = "monte_carlo_error"


# --- configuration --------------------------------------------------------


class ConfigError(SnmmError):
    code = "config_error"
