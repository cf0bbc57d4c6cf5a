"""Empirical orthogonal function decomposition of repeated geophysical surveys.

Repeated soil-water-content or electrical-conductivity maps of one field are
decomposed into time-invariant spatial patterns and per-survey expansion
coefficients. Each cell's temporal mean is removed first, so the patterns
describe how the field departs from its average survey. Downstream modules
consume only the first pattern, which concentrates the persistent spatial
structure while shedding single-survey noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .grid import FieldRaster

_DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class EofDecomposition:
    """Leading spatial patterns, their expansion coefficients, and the
    fraction of anomaly variance each explains.

    ``patterns[k]`` is a unit-norm raster; ``expansion_coefficients`` is
    (n_surveys, k); reconstructing survey ``t`` as
    ``sum_k EC[t, k] * pattern_k`` recovers its anomaly field.
    """

    patterns: tuple[FieldRaster, ...]
    expansion_coefficients: np.ndarray
    variance_fraction: np.ndarray


def compute_eofs(surveys: list[FieldRaster], k: int) -> EofDecomposition:
    """Decompose a survey stack into its leading ``k`` spatial patterns.

    Cells missing in any survey are excluded from the decomposition and
    come back as missing in the patterns. The sign of each pattern is fixed
    so its largest-magnitude cell is positive.
    """
    if len(surveys) < 2:
        raise ValidationError("EOF analysis needs at least 2 surveys")
    if not 1 <= k <= len(surveys):
        raise ValidationError(f"k must be in [1, {len(surveys)}], got {k}")
    geo = surveys[0].geometry
    for s in surveys[1:]:
        if not geo.matches(s.geometry):
            raise ValidationError(f"survey {s.time_label} is on a different grid")

    stack = np.stack([s.values for s in surveys])           # (n_surveys, rows, cols)
    valid = np.all(~np.isnan(stack), axis=0)
    if not valid.any():
        raise ValidationError("no cell is present in every survey")
    cells = stack[:, valid].T                                # (n_cells, n_surveys)
    anomalies = cells - cells.mean(axis=1, keepdims=True)
    if np.abs(anomalies).max() < _DEGENERATE_TOL:
        raise NumericalError("degenerate anomaly: surveys are identical up to a constant")

    u, s, vt = np.linalg.svd(anomalies, full_matrices=False)
    total = float(np.sum(s**2))

    patterns = []
    ecs = np.empty((len(surveys), k))
    for j in range(k):
        pat = u[:, j]
        ec = s[j] * vt[j, :]
        peak = np.argmax(np.abs(pat))
        if pat[peak] < 0:
            pat = -pat
            ec = -ec
        full = np.full(valid.shape, np.nan)
        full[valid] = pat
        patterns.append(FieldRaster(
            variable_name=f"{surveys[0].variable_name}_eof{j + 1}",
            time_label=f"eof{j + 1}",
            origin_x=geo.origin_x,
            origin_y=geo.origin_y,
            cell_size=geo.cell_size,
            values=full,
        ))
        ecs[:, j] = ec

    return EofDecomposition(
        patterns=tuple(patterns),
        expansion_coefficients=ecs,
        variance_fraction=s[:k] ** 2 / total,
    )
