"""Gridded field data: rasters, multi-year panels, and weather tables.

A raster lives on a regular square-celled grid in projected (UTM, meters)
coordinates. Internally values are stored as a dense ``(n_rows, n_cols)``
float array in row-major order with row 0 at the southern edge; missing
cells carry NaN and are tracked through the boolean ``mask`` property.
Rasters are immutable after construction and safe to share across threads.

File format (long-form CSV): header ``x,y,value``, one row per cell,
coordinates at cell centers in meters, an empty value field marking a
missing cell. ``write_raster`` emits cell centers with three decimals and
values with ``repr`` (shortest round-trip) precision, so files it writes
reload and re-write byte-identically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

# Relative tolerance for snapping file coordinates onto the inferred grid.
_SNAP_TOL = 1e-6


@dataclass(frozen=True)
class GridGeometry:
    """Placement of a regular grid: south-west corner, cell size, dimensions."""

    origin_x: float
    origin_y: float
    cell_size: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValidationError(f"cell_size must be positive, got {self.cell_size}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValidationError("grid must have at least one row and one column")

    @property
    def x_centers(self) -> np.ndarray:
        return self.origin_x + (np.arange(self.n_cols) + 0.5) * self.cell_size

    @property
    def y_centers(self) -> np.ndarray:
        return self.origin_y + (np.arange(self.n_rows) + 0.5) * self.cell_size

    def matches(self, other: "GridGeometry", rel_tol: float = 1e-9) -> bool:
        scale = max(abs(self.cell_size), 1.0)
        return (
            self.n_rows == other.n_rows
            and self.n_cols == other.n_cols
            and math.isclose(self.cell_size, other.cell_size, rel_tol=rel_tol)
            and abs(self.origin_x - other.origin_x) <= rel_tol * max(abs(self.origin_x), scale)
            and abs(self.origin_y - other.origin_y) <= rel_tol * max(abs(self.origin_y), scale)
        )


@dataclass(frozen=True)
class FieldRaster:
    """One variable on a regular grid at one time (a yield year or a survey).

    ``values`` is ``(n_rows, n_cols)`` float64; NaN marks a missing cell,
    every stored value is finite. The array is made read-only on
    construction.
    """

    variable_name: str
    time_label: int | str
    origin_x: float
    origin_y: float
    cell_size: float
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float, copy=True)
        if arr.ndim != 2:
            raise ValidationError(f"raster values must be 2-D, got shape {arr.shape}")
        if self.cell_size <= 0:
            raise ValidationError(f"cell_size must be positive, got {self.cell_size}")
        if np.isinf(arr).any():
            raise ValidationError("raster values must be finite or NaN (missing)")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Boolean presence flag per cell (True where a value is stored)."""
        return ~np.isnan(self.values)

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.origin_x, self.origin_y, self.cell_size,
                            self.n_rows, self.n_cols)

    def with_values(self, values: np.ndarray, variable_name: str | None = None,
                    time_label: int | str | None = None) -> "FieldRaster":
        """Copy of this raster with new cell values on the same grid."""
        return FieldRaster(
            variable_name=self.variable_name if variable_name is None else variable_name,
            time_label=self.time_label if time_label is None else time_label,
            origin_x=self.origin_x,
            origin_y=self.origin_y,
            cell_size=self.cell_size,
            values=values,
        )


def _infer_spacing(coords: np.ndarray, axis_name: str) -> float:
    """Cell spacing from sorted unique center coordinates along one axis."""
    if coords.size < 2:
        return 0.0
    diffs = np.diff(coords)
    step = diffs.min()
    if step <= 0:
        raise ValidationError(f"degenerate {axis_name} coordinates")
    if not np.allclose(diffs, np.round(diffs / step) * step, rtol=0, atol=_SNAP_TOL * step):
        raise ValidationError(f"inconsistent coordinates: irregular {axis_name} spacing")
    return float(step)


def load_grid_table(path: str | Path, value_column: str = "value"
                    ) -> tuple[GridGeometry, np.ndarray]:
    """Parse a long-form ``x,y,<value>`` CSV into a grid.

    The geometry (origin, cell size, dimensions) is inferred from the
    coordinate spacing. Every cell of the bounding rectangle must appear
    exactly once; a missing value is an empty value field, not an absent
    row. Errors name the offending line number. Returns the geometry and a
    (n_rows, n_cols) float array with NaN at missing cells.
    """
    path = Path(path)
    xs: list[float] = []
    ys: list[float] = []
    vals: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["x", "y", value_column]
        if header is None or [h.strip().lower() for h in header] != expected:
            raise ValidationError(f"{path}: expected header '{','.join(expected)}', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ValidationError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            try:
                x = float(row[0])
                y = float(row[1])
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: malformed coordinate") from None
            v_field = row[2].strip()
            if v_field == "":
                v = math.nan
            else:
                try:
                    v = float(v_field)
                except ValueError:
                    raise ValidationError(f"{path}: line {lineno}: malformed value {row[2]!r}") from None
                if not math.isfinite(v):
                    raise ValidationError(f"{path}: line {lineno}: non-finite value {row[2]!r}")
            xs.append(x)
            ys.append(y)
            vals.append(v)
    if not xs:
        raise ValidationError(f"{path}: no data rows")

    x_arr = np.asarray(xs)
    y_arr = np.asarray(ys)
    ux = np.unique(x_arr)
    uy = np.unique(y_arr)
    step_x = _infer_spacing(ux, "x")
    step_y = _infer_spacing(uy, "y")
    if step_x and step_y:
        if not math.isclose(step_x, step_y, rel_tol=_SNAP_TOL):
            raise ValidationError(
                f"{path}: cells are not square (x spacing {step_x}, y spacing {step_y})")
        cell = 0.5 * (step_x + step_y)
    else:
        cell = step_x or step_y
        if cell == 0.0:
            raise ValidationError(f"{path}: cannot infer cell size from a single cell")

    n_cols = int(round((ux[-1] - ux[0]) / cell)) + 1
    n_rows = int(round((uy[-1] - uy[0]) / cell)) + 1
    if n_rows * n_cols != len(xs):
        raise ValidationError(
            f"{path}: non-rectangular grid: expected {n_rows}x{n_cols}="
            f"{n_rows * n_cols} cells, found {len(xs)} rows")

    values = np.full((n_rows, n_cols), np.nan)
    seen = np.zeros((n_rows, n_cols), dtype=bool)
    for lineno_off, (x, y, v) in enumerate(zip(xs, ys, vals)):
        jc = (x - ux[0]) / cell
        ir = (y - uy[0]) / cell
        j = int(round(jc))
        i = int(round(ir))
        if abs(jc - j) > _SNAP_TOL or abs(ir - i) > _SNAP_TOL:
            raise ValidationError(
                f"{path}: line {lineno_off + 2}: inconsistent coordinates "
                f"({x}, {y}) not on the inferred grid")
        if seen[i, j]:
            raise ValidationError(f"{path}: line {lineno_off + 2}: duplicate cell ({x}, {y})")
        seen[i, j] = True
        values[i, j] = v

    geometry = GridGeometry(
        origin_x=float(ux[0] - cell / 2),
        origin_y=float(uy[0] - cell / 2),
        cell_size=float(cell),
        n_rows=n_rows,
        n_cols=n_cols,
    )
    return geometry, values


def load_raster(path: str | Path, variable_name: str,
                time_label: int | str | None = None) -> FieldRaster:
    """Read a long-form ``x,y,value`` CSV into a validated FieldRaster."""
    geometry, values = load_grid_table(path, "value")
    return FieldRaster(
        variable_name=variable_name,
        time_label=Path(path).stem if time_label is None else time_label,
        origin_x=geometry.origin_x,
        origin_y=geometry.origin_y,
        cell_size=geometry.cell_size,
        values=values,
    )


def write_raster(raster: FieldRaster, path: str | Path) -> None:
    """Write a raster in canonical long-form CSV (row-major, south row first)."""
    xc = raster.geometry.x_centers
    yc = raster.geometry.y_centers
    with open(path, "w", newline="") as fh:
        fh.write("x,y,value\n")
        for i in range(raster.n_rows):
            for j in range(raster.n_cols):
                v = raster.values[i, j]
                v_str = "" if math.isnan(v) else repr(float(v))
                fh.write(f"{xc[j]:.3f},{yc[i]:.3f},{v_str}\n")


@dataclass(frozen=True)
class YieldPanel:
    """Yearly rasters on one shared grid, with gap years made explicit.

    ``rasters`` are ordered by year; ``gap_years`` are years inside the
    observed range with no raster (e.g. a season with no yield map).
    """

    rasters: tuple[FieldRaster, ...]
    years: tuple[int, ...]
    gap_years: tuple[int, ...]

    def __post_init__(self):
        if len(self.rasters) != len(self.years):
            raise ValidationError("one raster per year required")
        if any(b <= a for a, b in zip(self.years, self.years[1:])):
            raise ValidationError(f"years must be strictly increasing, got {self.years}")
        if set(self.gap_years) & set(self.years):
            raise ValidationError("gap_years must be disjoint from observed years")
        geo = self.rasters[0].geometry
        for r in self.rasters[1:]:
            if not geo.matches(r.geometry):
                raise ValidationError(f"raster for {r.time_label} is on a different grid")

    @property
    def geometry(self) -> GridGeometry:
        return self.rasters[0].geometry

    @property
    def all_years(self) -> tuple[int, ...]:
        """Observed and gap years merged, ascending."""
        return tuple(sorted(set(self.years) | set(self.gap_years)))

    def raster_for(self, year: int) -> FieldRaster:
        try:
            return self.rasters[self.years.index(year)]
        except ValueError:
            raise ValidationError(f"no raster for year {year}") from None

    def drop_year(self, year: int) -> "YieldPanel":
        """Panel without the given observed year (it does not become a gap)."""
        if year not in self.years:
            raise ValidationError(f"year {year} not in panel")
        keep = [(y, r) for y, r in zip(self.years, self.rasters) if y != year]
        return YieldPanel(
            rasters=tuple(r for _, r in keep),
            years=tuple(y for y, _ in keep),
            gap_years=self.gap_years,
        )


def align_panel(rasters: Sequence[FieldRaster]) -> YieldPanel:
    """Assemble yearly rasters into a panel, inferring gap years.

    All rasters must share one grid geometry and carry integer year
    ``time_label``s. Years absent from the min..max range become
    ``gap_years``.
    """
    if len(rasters) < 2:
        raise ValidationError("a panel needs at least 2 rasters")
    years = []
    for r in rasters:
        try:
            years.append(int(r.time_label))
        except (TypeError, ValueError):
            raise ValidationError(
                f"raster time_label {r.time_label!r} is not a year") from None
    if len(set(years)) != len(years):
        raise ValidationError("duplicate years in panel")
    order = np.argsort(years)
    rasters = [rasters[i] for i in order]
    years = [years[i] for i in order]
    geo = rasters[0].geometry
    for r in rasters[1:]:
        if not geo.matches(r.geometry):
            raise ValidationError(
                f"geometry mismatch: raster for {r.time_label} does not match "
                f"raster for {rasters[0].time_label}")
    gap = tuple(y for y in range(years[0], years[-1] + 1) if y not in years)
    return YieldPanel(rasters=tuple(rasters), years=tuple(years), gap_years=gap)


def log_transform(panel: YieldPanel) -> YieldPanel:
    """Natural-log transform of every yield value; missing cells pass through."""
    out = []
    for year, raster in zip(panel.years, panel.rasters):
        vals = raster.values
        bad = (vals <= 0) & raster.mask
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValidationError(
                f"nonpositive yield {vals[i, j]} at cell ({i}, {j}) in year {year}")
        with np.errstate(invalid="ignore"):
            out.append(raster.with_values(np.log(vals)))
    return YieldPanel(rasters=tuple(out), years=panel.years, gap_years=panel.gap_years)


WEATHER_COLUMNS = ("rt", "pet", "sd", "sa")


@dataclass(frozen=True)
class WeatherTable:
    """July-August season weather per year: rainfall total, potential
    evapotranspiration, storm depth, storm arrival rate."""

    rows: Mapping[int, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        for year, row in self.rows.items():
            missing = [c for c in WEATHER_COLUMNS if c not in row]
            if missing:
                raise ValidationError(f"weather row {year} missing columns {missing}")

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(sorted(self.rows))

    def row(self, year: int) -> dict[str, float]:
        try:
            return self.rows[year]
        except KeyError:
            raise ValidationError(f"no weather row for year {year}") from None

    def require_years(self, years: Iterable[int]) -> None:
        missing = sorted(set(years) - set(self.rows))
        if missing:
            raise ValidationError(f"weather table missing years {missing}")


def load_weather(path: str | Path) -> WeatherTable:
    """Read a ``year,rt,pet,sd,sa`` CSV."""
    path = Path(path)
    rows: dict[int, dict[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["year", *WEATHER_COLUMNS]
        if header is None or [h.strip().lower() for h in header] != expected:
            raise ValidationError(f"{path}: expected header {','.join(expected)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise ValidationError(f"{path}: line {lineno}: expected 5 fields")
            try:
                year = int(row[0])
                values = [float(f) for f in row[1:]]
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: malformed row") from None
            if year in rows:
                raise ValidationError(f"{path}: line {lineno}: duplicate year {year}")
            rows[year] = dict(zip(WEATHER_COLUMNS, values))
    return WeatherTable(rows=rows)


def write_weather(table: WeatherTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("year," + ",".join(WEATHER_COLUMNS) + "\n")
        for year in table.years:
            row = table.rows[year]
            fh.write(f"{year}," + ",".join(repr(float(row[c])) for c in WEATHER_COLUMNS) + "\n")
