"""Field-level trend on annual mean log yield, detrending, back-transform.

The trend regresses each year's field-average log yield on calendar year
and July-August weather (rainfall total, potential ET, storm depth, storm
arrival rate). Candidate predictor subsets are scored by leave-one-out
cross-validated MSE, with ties going to the smaller subset; in-sample MSE
is recorded alongside for the report. Subtracting the fitted value for
each year from the grouped panel gives the normalized yield the
autoregressive model consumes; adding the predicted trend back and
exponentiating returns forecasts to the Mg/Ha scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .aggregate import GroupedPanel
from .errors import ValidationError
from .grid import WeatherTable

TREND_PREDICTORS = ("year", "rt", "pet", "sd", "sa")


@dataclass(frozen=True)
class TrendModel:
    """Selected OLS trend: predictors, coefficients, per-year fit, scores.

    ``coefficients`` holds the intercept first, then one slope per entry of
    ``predictors``. ``scores`` maps each evaluated candidate subset to
    ``(loocv_mse, insample_mse)``; rank-deficient candidates score inf.
    """

    predictors: tuple[str, ...]
    coefficients: np.ndarray
    years: tuple[int, ...]
    fitted: dict[int, float]
    scores: dict[tuple[str, ...], tuple[float, float]]

    def predict(self, year: int, weather: WeatherTable) -> float:
        """Trend value for any year with a weather row (gap or future years too)."""
        x = [1.0]
        for name in self.predictors:
            x.append(float(year) if name == "year" else weather.row(year)[name])
        return float(np.dot(self.coefficients, x))


@dataclass(frozen=True)
class NormalizedPanel:
    """Grouped log yield with the fitted yearly trend removed (``Z``)."""

    values: np.ndarray
    years: tuple[int, ...]
    gap_years: tuple[int, ...]
    trend: TrendModel | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != len(self.years):
            raise ValidationError("normalized panel must be (n_groups, n_years)")
        object.__setattr__(self, "values", vals)

    @property
    def n_groups(self) -> int:
        return self.values.shape[0]

    @property
    def gap_indices(self) -> tuple[int, ...]:
        return tuple(self.years.index(y) for y in self.gap_years)

    def last_observed(self) -> np.ndarray:
        """Z for the final (observed) year of the panel."""
        if self.years[-1] in self.gap_years:
            raise ValidationError("final panel year is a gap year")
        return self.values[:, -1].copy()


def _design(years: list[int], weather: WeatherTable, predictors: tuple[str, ...]) -> np.ndarray:
    cols = [np.ones(len(years))]
    for name in predictors:
        if name == "year":
            cols.append(np.asarray(years, dtype=float))
        else:
            cols.append(np.asarray([weather.row(y)[name] for y in years]))
    return np.column_stack(cols)


def _ols_with_loocv(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float, float] | None:
    """Fit OLS; return (beta, loocv_mse, insample_mse), or None if rank-deficient."""
    if np.linalg.matrix_rank(x) < x.shape[1]:
        return None
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    # Leave-one-out residuals via the hat matrix: e_i / (1 - h_ii).
    h = np.einsum("ij,jk,ik->i", x, np.linalg.inv(x.T @ x), x)
    if np.any(h >= 1 - 1e-10):
        return beta, np.inf, float(np.mean(resid**2))
    loo = resid / (1 - h)
    return beta, float(np.mean(loo**2)), float(np.mean(resid**2))


def default_candidates() -> list[tuple[str, ...]]:
    """Every subset of the five trend predictors, intercept-only included."""
    subsets: list[tuple[str, ...]] = []
    for size in range(len(TREND_PREDICTORS) + 1):
        subsets.extend(combinations(TREND_PREDICTORS, size))
    return subsets


def fit_trend(grouped: GroupedPanel, weather: WeatherTable,
              candidates: list[tuple[str, ...]] | None = None) -> TrendModel:
    """Select and fit the yearly trend on field-average log yield.

    The response is the across-group mean of the grouped panel at each
    observed year. Candidates whose design would leave no residual degree
    of freedom are skipped; the winner minimizes LOOCV MSE with ties broken
    toward fewer predictors.
    """
    years = list(grouped.observed_years)
    if len(years) < 4:
        raise ValidationError(f"trend fitting needs >= 4 observed years, got {len(years)}")
    weather.require_years(years)
    obs_cols = [grouped.years.index(y) for y in years]
    response = grouped.values[:, obs_cols].mean(axis=0)

    if candidates is None:
        candidates = default_candidates()
    if not candidates:
        raise ValidationError("no candidate predictor subsets given")
    for cand in candidates:
        unknown = set(cand) - set(TREND_PREDICTORS)
        if unknown:
            raise ValidationError(f"unknown trend predictors {sorted(unknown)}")

    scores: dict[tuple[str, ...], tuple[float, float]] = {}
    best: tuple[float, int, tuple[str, ...], np.ndarray] | None = None
    # Evaluate small subsets first so a strict comparison breaks ties
    # toward fewer predictors.
    for cand in sorted(set(candidates), key=lambda c: (len(c), c)):
        cand = tuple(cand)
        if len(years) - (len(cand) + 1) < 1:
            scores[cand] = (np.inf, np.inf)
            continue
        x = _design(years, weather, cand)
        fit = _ols_with_loocv(x, response)
        if fit is None:
            scores[cand] = (np.inf, np.inf)
            continue
        beta, loocv, insample = fit
        scores[cand] = (loocv, insample)
        if best is None or loocv < best[0]:
            best = (loocv, len(cand), cand, beta)

    if best is None:
        raise ValidationError("every candidate subset is rank-deficient or too large")
    _, _, predictors, beta = best
    x = _design(years, weather, predictors)
    fitted = dict(zip(years, (x @ beta).tolist()))
    return TrendModel(
        predictors=predictors,
        coefficients=beta,
        years=tuple(years),
        fitted=fitted,
        scores=scores,
    )


def detrend(grouped: GroupedPanel, model: TrendModel) -> NormalizedPanel:
    """Subtract the fitted yearly trend from every group's series."""
    if tuple(grouped.observed_years) != model.years:
        raise ValidationError(
            f"trend model fitted on years {model.years}, panel has {grouped.observed_years}")
    z = grouped.values.copy()
    for j, year in enumerate(grouped.years):
        if year in grouped.gap_years:
            continue
        z[:, j] -= model.fitted[year]
    return NormalizedPanel(values=z, years=grouped.years,
                           gap_years=grouped.gap_years, trend=model)


def retrend(forecast_z: np.ndarray, model: TrendModel, target_year: int,
            weather: WeatherTable) -> np.ndarray:
    """Back-transform normalized-yield forecasts to Mg/Ha.

    Adds the predicted trend for ``target_year`` and exponentiates;
    broadcasts over a (draws, groups) array so each posterior draw is
    back-transformed individually.
    """
    pred = model.predict(target_year, weather)
    return np.exp(np.asarray(forecast_z, dtype=float) + pred)
