"""CSV readers/writers for pipeline artifacts.

All artifact formats are plain CSV so downstream tooling stays
language-neutral: normalized panels in long form (``group,year,z`` with an
empty field at gap years), neighborhood matrices as bare integer grids,
posterior draws in long form (``chain,iter,parameter,value``), and group
assignments as ``x,y,group`` point lists on the raster grid.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .aggregate import GroupAssignment, NeighborMatrix, SeparationMatrix
from .errors import ValidationError
from .grid import load_grid_table
from .metrics import MetricReport
from .svar import Forecast, SvarConfig, SvarPosterior
from .trend import NormalizedPanel, TrendModel


def write_normalized_panel(panel: NormalizedPanel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("group,year,z\n")
        for i in range(panel.n_groups):
            for j, year in enumerate(panel.years):
                v = panel.values[i, j]
                fh.write(f"{i},{year},{'' if np.isnan(v) else repr(float(v))}\n")


def load_normalized_panel(path: str | Path) -> NormalizedPanel:
    path = Path(path)
    cells: dict[tuple[int, int], float] = {}
    groups: set[int] = set()
    years: set[int] = set()
    gap_pairs: set[tuple[int, int]] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["group", "year", "z"]:
            raise ValidationError(f"{path}: expected header 'group,year,z'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ValidationError(f"{path}: line {lineno}: expected 3 fields")
            try:
                g = int(row[0])
                y = int(row[1])
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: malformed row") from None
            groups.add(g)
            years.add(y)
            if row[2].strip() == "":
                gap_pairs.add((g, y))
            else:
                cells[(g, y)] = float(row[2])
    year_list = sorted(years)
    group_list = sorted(groups)
    if group_list != list(range(len(group_list))):
        raise ValidationError(f"{path}: group ids must be 0..n-1")
    values = np.full((len(group_list), len(year_list)), np.nan)
    for (g, y), v in cells.items():
        values[g, year_list.index(y)] = v
    gap_years = tuple(sorted({y for _, y in gap_pairs}))
    return NormalizedPanel(values=values, years=tuple(year_list), gap_years=gap_years)


def write_neighbor_matrix(nm: NeighborMatrix, path: str | Path) -> None:
    np.savetxt(path, nm.R, fmt="%d", delimiter=",")


def load_neighbor_matrix(path: str | Path, epsilon: float | str = "file") -> NeighborMatrix:
    r = np.loadtxt(path, delimiter=",", dtype=int, ndmin=2)
    return NeighborMatrix(R=r, epsilon=epsilon)


def write_separation_matrix(sep: SeparationMatrix, path: str | Path) -> None:
    np.savetxt(path, sep.values, fmt="%.12g", delimiter=",")


def write_assignment(assignment: GroupAssignment, path: str | Path) -> None:
    geo = assignment.geometry
    xc = geo.x_centers
    yc = geo.y_centers
    with open(path, "w", newline="") as fh:
        fh.write("x,y,group\n")
        for i in range(geo.n_rows):
            for j in range(geo.n_cols):
                g = assignment.labels[i, j]
                fh.write(f"{xc[j]:.3f},{yc[i]:.3f},{'' if g < 0 else g}\n")


def load_assignment(path: str | Path, method: str = "clustering",
                    blocks_shape: tuple[int, int] | None = None) -> GroupAssignment:
    """Rebuild an assignment from an ``x,y,group`` file (geometry inferred)."""
    geometry, values = load_grid_table(path, "group")
    labels = np.where(np.isnan(values), -1, values).astype(int)
    n_groups = int(labels.max()) + 1
    return GroupAssignment(method=method, n_groups=n_groups, labels=labels,
                           geometry=geometry, blocks_shape=blocks_shape)


def write_posterior(post: SvarPosterior, path: str | Path) -> None:
    """Long-form draw file: one row per (chain, retained iteration, parameter)."""
    n = post.n_groups
    with open(path, "w", newline="") as fh:
        fh.write("chain,iter,parameter,value\n")
        per_chain = post.n_draws // len(np.unique(post.chain_id))
        for k in range(post.n_draws):
            chain = int(post.chain_id[k])
            it = k % per_chain
            rows = [("sigma2", post.sigma2[k]), ("tau2", post.tau2[k]),
                    ("lambda", post.lam[k])]
            rows += [(f"rho[{i}]", post.rho[k, i]) for i in range(n)]
            rows += [(f"eta[{i}]", post.eta[k, i]) for i in range(n)]
            if post.z_missing is not None:
                rows += [(f"z_missing[{i}]", post.z_missing[k, i]) for i in range(n)]
            for name, value in rows:
                fh.write(f"{chain},{it},{name},{repr(float(value))}\n")


def load_posterior(path: str | Path, seed: int = 0) -> SvarPosterior:
    """Rebuild a posterior container from a long-form draw file.

    Diagnostics are not stored in the file; the returned container carries
    empty acceptance/rhat maps and a minimal config holding ``seed`` for
    the predictive noise stream.
    """
    path = Path(path)
    records: dict[tuple[int, int], dict[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != [
                "chain", "iter", "parameter", "value"]:
            raise ValidationError(f"{path}: expected header 'chain,iter,parameter,value'")
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            chain, it, name, value = int(row[0]), int(row[1]), row[2], float(row[3])
            records.setdefault((chain, it), {})[name] = value
    if not records:
        raise ValidationError(f"{path}: no draws")
    keys = sorted(records)
    first = records[keys[0]]
    n = sum(1 for k in first if k.startswith("rho["))
    has_gap = any(k.startswith("z_missing[") for k in first)
    m = len(keys)
    rho = np.empty((m, n))
    eta = np.empty((m, n))
    sigma2 = np.empty(m)
    tau2 = np.empty(m)
    lam = np.empty(m)
    zmiss = np.empty((m, n)) if has_gap else None
    chain_id = np.empty(m, dtype=int)
    for k, key in enumerate(keys):
        rec = records[key]
        chain_id[k] = key[0]
        sigma2[k] = rec["sigma2"]
        tau2[k] = rec["tau2"]
        lam[k] = rec["lambda"]
        for i in range(n):
            rho[k, i] = rec[f"rho[{i}]"]
            eta[k, i] = rec[f"eta[{i}]"]
            if has_gap:
                zmiss[k, i] = rec[f"z_missing[{i}]"]
    n_chains = len(np.unique(chain_id))
    per_chain = m // n_chains
    config = SvarConfig(n_iter=per_chain, burn_in=0, thin=1,
                        n_chains=n_chains, seed=seed)
    return SvarPosterior(eta=eta, rho=rho, sigma2=sigma2, tau2=tau2, lam=lam,
                         z_missing=zmiss, chain_id=chain_id,
                         acceptance={}, rhat={}, config=config)


def write_forecast_summary(fc: Forecast, path: str | Path,
                           yield_scale: np.ndarray | None = None) -> None:
    """Per-group forecast summary; optionally with back-transformed yield draws."""
    with open(path, "w", newline="") as fh:
        cols = ["group", "z_mean", "z_median", "z_lower95", "z_upper95"]
        if yield_scale is not None:
            cols += ["yield_mean", "yield_median", "yield_lower95", "yield_upper95"]
        fh.write(",".join(cols) + "\n")
        for i in range(fc.n_groups):
            row = [str(i), repr(float(fc.mean[i])), repr(float(fc.median[i])),
                   repr(float(fc.lower95[i])), repr(float(fc.upper95[i]))]
            if yield_scale is not None:
                yd = yield_scale[:, i]
                row += [repr(float(yd.mean())), repr(float(np.median(yd))),
                        repr(float(np.quantile(yd, 0.025))),
                        repr(float(np.quantile(yd, 0.975)))]
            fh.write(",".join(row) + "\n")


def write_metrics(reports: list[MetricReport], path: str | Path) -> None:
    label_keys = sorted({k for r in reports for k in r.labels})
    with open(path, "w", newline="") as fh:
        fh.write(",".join(label_keys + ["r2", "mspe", "mape", "predicted_average", "n"]) + "\n")
        for r in reports:
            cells = [r.labels.get(k, "") for k in label_keys]
            cells += [repr(float(r.r2)), repr(float(r.mspe)), repr(float(r.mape)),
                      repr(float(r.predicted_average)), str(r.n)]
            fh.write(",".join(cells) + "\n")


def write_trend_report(model: TrendModel, outdir: str | Path) -> dict[str, Path]:
    outdir = Path(outdir)
    paths = {}
    coef_path = outdir / "trend_coefficients.csv"
    with open(coef_path, "w", newline="") as fh:
        fh.write("term,coefficient\n")
        fh.write(f"intercept,{repr(float(model.coefficients[0]))}\n")
        for name, c in zip(model.predictors, model.coefficients[1:]):
            fh.write(f"{name},{repr(float(c))}\n")
    paths["coefficients"] = coef_path

    fitted_path = outdir / "trend_fitted.csv"
    with open(fitted_path, "w", newline="") as fh:
        fh.write("year,fitted\n")
        for year in model.years:
            fh.write(f"{year},{repr(float(model.fitted[year]))}\n")
    paths["fitted"] = fitted_path

    scores_path = outdir / "trend_scores.csv"
    with open(scores_path, "w", newline="") as fh:
        fh.write("predictors,loocv_mse,insample_mse,selected\n")
        for cand in sorted(model.scores, key=lambda c: (len(c), c)):
            loocv, insample = model.scores[cand]
            sel = "yes" if cand == model.predictors else ""
            fh.write(f"{'+'.join(cand) or 'intercept'},{loocv!r},{insample!r},{sel}\n")
    paths["scores"] = scores_path
    return paths
