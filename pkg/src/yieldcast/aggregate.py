"""Spatial aggregation: blocking, k-means clustering, and neighbor graphs.

Aggregation turns a noisy high-resolution panel into a small set of group
time series. Blocking tiles the field into equal rectangles; clustering
groups cells that look alike in a chosen feature space (soil conductivity,
recent yield). Either way the groups feed the downstream autoregressive
model, which needs a neighborhood matrix ``R``: neighbor counts on the
diagonal, -1 for each neighboring pair, rows summing to zero. For blocks
neighbors come from the lattice (queen adjacency); for clusters they come
from an epsilon-threshold on average cross-cluster separation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError
from .grid import FieldRaster, GridGeometry, YieldPanel

KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300
KMEANS_RESTARTS = 10


@dataclass(frozen=True)
class FeatureSpace:
    """Clustering feature names with the standardization constants applied."""

    names: tuple[str, ...]
    means: np.ndarray
    stds: np.ndarray

    def transform(self, raw: np.ndarray) -> np.ndarray:
        """Map raw feature rows into the standardized space."""
        return (np.asarray(raw, dtype=float) - self.means) / self.stds


@dataclass(frozen=True)
class GroupAssignment:
    """Per-cell group labels from blocking or clustering.

    ``labels`` is (n_rows, n_cols) int; -1 marks cells outside every group
    (missing in the clustering features). ``blocks_shape`` is set only for
    blocking and gives the block lattice dimensions; ``feature_space`` is
    set only for clustering.
    """

    method: str
    n_groups: int
    labels: np.ndarray
    geometry: GridGeometry
    feature_space: FeatureSpace | None = None
    blocks_shape: tuple[int, int] | None = None

    def __post_init__(self):
        labels = np.array(self.labels, dtype=int, copy=True)
        if self.method not in ("blocking", "clustering"):
            raise ValidationError(f"unknown aggregation method {self.method!r}")
        if labels.shape != (self.geometry.n_rows, self.geometry.n_cols):
            raise ValidationError("labels shape does not match geometry")
        if labels.max() >= self.n_groups or labels.min() < -1:
            raise ValidationError("labels out of range")
        sizes = np.bincount(labels[labels >= 0], minlength=self.n_groups)
        if (sizes == 0).any():
            empty = np.flatnonzero(sizes == 0).tolist()
            raise ValidationError(f"empty groups: {empty}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_groups)

    def members(self, group: int) -> np.ndarray:
        """Row-major flat indices of the cells in one group."""
        return np.flatnonzero(self.labels.ravel() == group)


@dataclass(frozen=True)
class GroupedPanel:
    """Groups-by-years matrix of aggregated (log-scale) yield.

    Columns cover the full year range including gap years, which hold NaN.
    ``covariates`` maps a covariate name to its per-group aggregate.
    """

    values: np.ndarray
    years: tuple[int, ...]
    gap_years: tuple[int, ...]
    group_sizes: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != len(self.years):
            raise ValidationError("grouped panel must be (n_groups, n_years)")
        gap_cols = [self.years.index(y) for y in self.gap_years]
        obs_cols = [j for j in range(len(self.years)) if j not in gap_cols]
        if not np.isfinite(vals[:, obs_cols]).all():
            raise ValidationError("non-finite aggregate outside gap years")
        object.__setattr__(self, "values", vals)

    @property
    def n_groups(self) -> int:
        return self.values.shape[0]

    @property
    def observed_years(self) -> tuple[int, ...]:
        return tuple(y for y in self.years if y not in self.gap_years)


@dataclass(frozen=True)
class SeparationMatrix:
    """Average cross-group dissimilarity ``D``; the diagonal is unused."""

    values: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.values, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValidationError("separation matrix must be square")
        if not np.allclose(d, d.T):
            raise ValidationError("separation matrix must be symmetric")
        off = d[~np.eye(d.shape[0], dtype=bool)]
        if off.size and off.min() < 0:
            raise ValidationError("separation distances must be nonnegative")
        object.__setattr__(self, "values", d)

    @property
    def n_groups(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NeighborMatrix:
    """CAR neighborhood matrix ``R`` plus the pair list that produced it.

    ``epsilon`` records how neighbors were defined: a float threshold for
    clustering, or the markers ``"spatial"`` / ``"exchangeable"``.
    ``isolated`` lists groups with zero neighbors (allowed, but worth a
    warning downstream).
    """

    R: np.ndarray
    epsilon: float | str
    pairs: tuple[tuple[int, int], ...] = ()
    isolated: tuple[int, ...] = ()

    def __post_init__(self):
        r = np.array(self.R, dtype=int, copy=True)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValidationError("R must be square")
        if not np.array_equal(r, r.T):
            raise ValidationError("R must be symmetric")
        off = r[~np.eye(r.shape[0], dtype=bool)]
        if off.size and not np.isin(off, (0, -1)).all():
            raise ValidationError("off-diagonal entries of R must be 0 or -1")
        if not np.array_equal(np.diag(r), (r == -1).sum(axis=1)):
            raise ValidationError("diagonal of R must count the row's neighbors")
        if (r.sum(axis=1) != 0).any():
            raise ValidationError("rows of R must sum to zero")
        r.setflags(write=False)
        object.__setattr__(self, "R", r)

    @property
    def n_groups(self) -> int:
        return self.R.shape[0]


def _assemble_R(adj: np.ndarray, epsilon: float | str) -> NeighborMatrix:
    adj = adj & ~np.eye(adj.shape[0], dtype=bool)
    adj = adj | adj.T
    r = -adj.astype(int)
    np.fill_diagonal(r, adj.sum(axis=1))
    pairs = tuple((int(i), int(j)) for i, j in np.argwhere(np.triu(adj, 1)))
    isolated = tuple(int(i) for i in np.flatnonzero(adj.sum(axis=1) == 0))
    return NeighborMatrix(R=r, epsilon=epsilon, pairs=pairs, isolated=isolated)


def block_partition(geometry: GridGeometry, blocks_per_side: int) -> GroupAssignment:
    """Tile the grid into ``blocks_per_side``² rectangular blocks.

    When the grid dimension is not an exact multiple, the remainder is
    absorbed into the blocks on the far border. Labels are row-major over
    the block lattice.
    """
    b = blocks_per_side
    if b < 1:
        raise ValidationError("blocks_per_side must be >= 1")
    if b > geometry.n_rows or b > geometry.n_cols:
        raise ValidationError(
            f"blocks_per_side {b} larger than grid dimension "
            f"({geometry.n_rows}x{geometry.n_cols})")
    base_r = geometry.n_rows // b
    base_c = geometry.n_cols // b
    rows = np.minimum(np.arange(geometry.n_rows) // base_r, b - 1)
    cols = np.minimum(np.arange(geometry.n_cols) // base_c, b - 1)
    labels = rows[:, None] * b + cols[None, :]
    return GroupAssignment(
        method="blocking",
        n_groups=b * b,
        labels=labels,
        geometry=geometry,
        blocks_shape=(b, b),
    )


def _kmeans_once(x: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float] | None:
    """One k-means++ initialized Lloyd run; None if a cluster empties."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            return None
        centers[j] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, np.sum((x - centers[j]) ** 2, axis=1))

    inertia = np.inf
    labels = np.zeros(n, dtype=int)
    for _ in range(KMEANS_MAX_ITER):
        d2 = cdist(x, centers, "sqeuclidean")
        labels = d2.argmin(axis=1)
        new_inertia = float(d2[np.arange(n), labels].sum())
        counts = np.bincount(labels, minlength=k)
        if (counts == 0).any():
            return None
        for j in range(k):
            centers[j] = x[labels == j].mean(axis=0)
        if inertia - new_inertia <= KMEANS_TOL * max(abs(inertia), 1e-300):
            inertia = new_inertia
            break
        inertia = new_inertia
    return labels, centers, inertia


def kmeans(x: np.ndarray, k: int, seed: int, n_restarts: int = KMEANS_RESTARTS
           ) -> tuple[np.ndarray, np.ndarray, float]:
    """Best-of-``n_restarts`` k-means on a prepared feature matrix.

    Restarts that end with an empty cluster are discarded and re-seeded
    (up to 3x the restart budget); ties between restarts keep the earliest.
    Returns (labels, centers, inertia).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError("features must be a 2-D array")
    if not np.isfinite(x).all():
        raise ValidationError("features must be finite")
    if k < 2:
        raise ValidationError("k must be >= 2")
    if np.unique(x, axis=0).shape[0] < k:
        raise ValidationError(f"fewer than k={k} distinct points")

    seeds = np.random.SeedSequence(seed).spawn(3 * n_restarts)
    best = None
    successes = 0
    for child in seeds:
        result = _kmeans_once(x, k, np.random.default_rng(child))
        if result is None:
            continue
        successes += 1
        if best is None or result[2] < best[2]:
            best = result
        if successes == n_restarts:
            break
    if best is None:
        raise NumericalError("all k-means restarts produced an empty cluster")
    return best


def build_features(rasters: Sequence[FieldRaster], standardize: bool = True
                   ) -> tuple[np.ndarray, np.ndarray, FeatureSpace]:
    """Stack rasters into per-cell feature rows.

    Only cells present in every raster enter the matrix. Returns
    ``(features, valid_mask, feature_space)`` where rows follow row-major
    order over the True cells of ``valid_mask``.
    """
    if not rasters:
        raise ValidationError("at least one feature raster required")
    geo = rasters[0].geometry
    for r in rasters[1:]:
        if not geo.matches(r.geometry):
            raise ValidationError(f"feature raster {r.variable_name} is on a different grid")
    stack = np.stack([r.values for r in rasters], axis=-1)    # (rows, cols, d)
    valid = np.all(~np.isnan(stack), axis=-1)
    if not valid.any():
        raise ValidationError("no cell is present in every feature raster")
    x = stack[valid]
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)   # constant feature: center only
    if not standardize:
        means = np.zeros_like(means)
        stds = np.ones_like(stds)
    space = FeatureSpace(
        names=tuple(r.variable_name for r in rasters),
        means=means,
        stds=stds,
    )
    return (x - means) / stds, valid, space


def kmeans_cluster(feature_rasters: Sequence[FieldRaster], k: int, seed: int = 0,
                   standardize: bool = True, n_restarts: int = KMEANS_RESTARTS
                   ) -> GroupAssignment:
    """Cluster cells by their feature vectors into ``k`` groups.

    Features are standardized to zero mean and unit variance before
    distances are computed (toggle with ``standardize``). Cells missing in
    any feature raster stay unassigned (label -1).
    """
    x, valid, space = build_features(feature_rasters, standardize=standardize)
    labels_flat, _, _ = kmeans(x, k, seed, n_restarts=n_restarts)
    labels = np.full(valid.shape, -1, dtype=int)
    labels[valid] = labels_flat
    return GroupAssignment(
        method="clustering",
        n_groups=k,
        labels=labels,
        geometry=feature_rasters[0].geometry,
        feature_space=space,
    )


def aggregate_raster(raster: FieldRaster, assignment: GroupAssignment) -> np.ndarray:
    """Per-group mean of one raster; NaN for a group with no data."""
    if not raster.geometry.matches(assignment.geometry):
        raise ValidationError("raster geometry does not match assignment")
    labels = assignment.labels.ravel()
    vals = raster.values.ravel()
    ok = (labels >= 0) & ~np.isnan(vals)
    sums = np.bincount(labels[ok], weights=vals[ok], minlength=assignment.n_groups)
    counts = np.bincount(labels[ok], minlength=assignment.n_groups)
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def aggregate_groups(panel: YieldPanel, assignment: GroupAssignment) -> GroupedPanel:
    """Average the (log-scale) panel within each group, year by year.

    Gap years stay missing. A group with no observed cell in some observed
    year is an error: it cannot contribute a time series.
    """
    if not panel.geometry.matches(assignment.geometry):
        raise ValidationError("panel geometry does not match assignment")
    all_years = panel.all_years
    values = np.full((assignment.n_groups, len(all_years)), np.nan)
    for j, year in enumerate(all_years):
        if year in panel.gap_years:
            continue
        means = aggregate_raster(panel.raster_for(year), assignment)
        bad = np.flatnonzero(np.isnan(means))
        if bad.size:
            raise ValidationError(
                f"group {bad[0]} has no observed cells in year {year}")
        values[:, j] = means
    return GroupedPanel(
        values=values,
        years=all_years,
        gap_years=panel.gap_years,
        group_sizes=assignment.group_sizes,
    )


def separation_matrix(features: np.ndarray, assignment: GroupAssignment) -> SeparationMatrix:
    """Average Euclidean distance between all cross-group point pairs.

    ``features`` must be the standardized clustering feature matrix, one
    row per assigned cell in row-major order (as returned by
    ``build_features``). The diagonal is filled with zeros and never used.
    """
    features = np.asarray(features, dtype=float)
    labels = assignment.labels.ravel()
    labels = labels[labels >= 0]
    if features.shape[0] != labels.size:
        raise ValidationError(
            f"feature rows ({features.shape[0]}) do not match assigned cells ({labels.size})")
    n = assignment.n_groups
    members = [features[labels == g] for g in range(n)]
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = float(cdist(members[i], members[j]).mean())
    return SeparationMatrix(values=d)


def auto_epsilon(separation: SeparationMatrix) -> float:
    """Smallest threshold granting every group at least one neighbor."""
    d = separation.values.copy()
    np.fill_diagonal(d, np.inf)
    return float(d.min(axis=1).max()) + 1e-9


def epsilon_neighbors(separation: SeparationMatrix, epsilon: float) -> NeighborMatrix:
    """Groups closer than ``epsilon`` in average separation become neighbors.

    Isolated groups are allowed; they are listed on the result and flagged
    with a warning.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    adj = separation.values < epsilon
    nm = _assemble_R(adj, epsilon=float(epsilon))
    if nm.isolated:
        warnings.warn(
            f"groups with no neighbors at epsilon={epsilon}: {list(nm.isolated)}",
            stacklevel=2)
    return nm


def block_neighbors(assignment: GroupAssignment) -> NeighborMatrix:
    """Queen adjacency on the block lattice (shared edge or corner)."""
    if assignment.method != "blocking" or assignment.blocks_shape is None:
        raise ValidationError("block_neighbors needs a blocking assignment")
    br, bc = assignment.blocks_shape
    n = br * bc
    adj = np.zeros((n, n), dtype=bool)
    for r in range(br):
        for c in range(bc):
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < br and 0 <= cc < bc:
                        adj[r * bc + c, rr * bc + cc] = True
    return _assemble_R(adj, epsilon="spatial")


def exchangeable_neighbors(n_groups: int) -> NeighborMatrix:
    """Complete graph: every group is every other group's neighbor."""
    if n_groups < 2:
        raise ValidationError("exchangeable structure needs at least 2 groups")
    adj = np.ones((n_groups, n_groups), dtype=bool)
    return _assemble_R(adj, epsilon="exchangeable")
