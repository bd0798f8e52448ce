from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from app.config import settings
from app.core.exceptions import IdentificationError
from app.snmm.blip import BlipModel, check_model, parse_blip_spec, unit_features
from app.snmm.exposure_map import MappedPanel

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class SFunctionSet:
    """Estimating functions s_m(k, D_m, L_m): the blip features, optionally extended.

    ``extra`` terms are written in the blip language but need not vanish at the
    zero exposure; with extras the system is over-identified.
    """

    model: BlipModel
    extra: BlipModel | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        extra = tuple(f"s:{label}" for label in self.extra.labels) if self.extra else ()
        return self.model.labels + extra

    @property
    def dim(self) -> int:
        return len(self.labels)

    @property
    def over_identified(self) -> bool:
        return self.extra is not None and self.extra.n_params > 0

    def values(self, mapped: MappedPanel, m: int, k: int) -> np.ndarray:
        """s_m(k, ...) per unit, shape (n, dim)."""
        base = unit_features(self.model, mapped, m, k)
        if not self.over_identified:
            return base
        assert self.extra is not None
        return np.hstack([base, unit_features(self.extra, mapped, m, k)])


def default_s_functions(model: BlipModel, extra_s: str | None = None) -> SFunctionSet:
    extra = parse_blip_spec(extra_s, require_zero=False) if extra_s else None
    return SFunctionSet(model=model, extra=extra)


def null_space_labels(matrix: np.ndarray, labels: tuple[str, ...], tol: float) -> list[list[str]]:
    """Labels involved in each null-space direction of ``matrix``."""
    basis = linalg.null_space(matrix, rcond=tol)
    directions = []
    for vec in basis.T:
        involved = [labels[i] for i in np.flatnonzero(np.abs(vec) > 1e-8)]
        directions.append(involved)
    return directions


@dataclass(slots=True)
class MomentInputs:
    """Per-(m, k) ingredients of the score, arranged by sampling group.

    s[(m,k)]:  (G, J, Q)  estimating functions
    dy[(m,k)]: (G, J)     Y_k - Y_{k-1}
    F[(m,k)]:  (G, J, P)  so that H_{m,k} - H_{m,k-1} = dy - F @ psi
    """

    pairs: list[tuple[int, int]]
    s: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    dy: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    F: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


def moment_inputs(mapped: MappedPanel, model: BlipModel, sset: SFunctionSet) -> MomentInputs:
    check_model(model, mapped)
    if sset.extra is not None:
        check_model(sset.extra, mapped)
    tau = mapped.tau
    groups = mapped.groups
    feats = {(t, k): unit_features(model, mapped, t, k) for k in range(1, tau + 1) for t in range(k)}
    Y = mapped.outcome
    zero = np.zeros((mapped.n_units, model.n_params))
    inputs = MomentInputs(pairs=[(m, k) for m in range(tau) for k in range(m + 1, tau + 1)])
    for m, k in inputs.pairs:
        current = sum((feats[(t, k)] for t in range(m, k)), zero)
        previous = sum((feats[(t, k - 1)] for t in range(m, k - 1)), zero)
        inputs.F[(m, k)] = (current - previous)[groups]
        inputs.dy[(m, k)] = (Y[:, k] - Y[:, k - 1])[groups]
        if sset.over_identified:
            inputs.s[(m, k)] = sset.values(mapped, m, k)[groups]
        else:
            inputs.s[(m, k)] = feats[(m, k)][groups]
    return inputs


def check_s_rank(inputs: MomentInputs, labels: tuple[str, ...], tol: float | None = None) -> None:
    """E[s s^T] over all (m, k) and units must be non-singular."""
    tol = settings.RANK_TOLERANCE if tol is None else tol
    stacked = np.concatenate([inputs.s[p].reshape(-1, len(labels)) for p in inputs.pairs])
    gram = stacked.T @ stacked / max(len(stacked), 1)
    scale = float(np.max(np.abs(gram))) if gram.size else 0.0
    sv = linalg.svdvals(gram) if gram.size else np.zeros(0)
    if scale == 0.0 or sv.min() <= tol * sv.max():
        directions = null_space_labels(gram, labels, tol)
        logger.debug("sfunctions.rank_deficient dim=%d", len(labels))
        raise IdentificationError(
            f"Estimating functions are rank deficient on the observed data; null directions: {directions}",
            null_space=directions,
        )
