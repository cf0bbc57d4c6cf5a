"""End-to-end forecasting runs: ingest, aggregate, fit, forecast, evaluate.

A run holds out the final panel year, fits everything on the years before
it, forecasts one year ahead, and scores the forecast against the held-out
observations. The held-out raster is never loaded until the evaluation
phase, so no fitting stage can touch it. All randomness (k-means restarts,
the sampler, predictive noise) flows from one root seed through named
substreams, and every run directory gets a manifest sufficient to repeat
the run bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as ycio
from .aggregate import (GroupAssignment, GroupedPanel, NeighborMatrix,
                        SeparationMatrix, aggregate_groups, aggregate_raster,
                        auto_epsilon, block_neighbors, block_partition,
                        build_features, epsilon_neighbors,
                        exchangeable_neighbors, kmeans, separation_matrix)
from .errors import ValidationError
from .grid import (FieldRaster, WeatherTable, YieldPanel, align_panel,
                   load_raster, load_weather, log_transform, write_raster)
from .metrics import MetricReport, comparison_table, compute_metrics
from .svar import SvarConfig, SvarPosterior, disaggregate, forecast, mcmc_run
from .trend import NormalizedPanel, TrendModel, detrend, fit_trend, retrend

# Substream keys: one root seed, one named lane per consumer of randomness.
_SEED_KEYS = {"kmeans": 1, "mcmc": 2, "forecast": 3}


def derive_seed(root_seed: int, name: str) -> int:
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=(_SEED_KEYS[name],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class PipelineConfig:
    """One forecasting run, fully specified.

    ``epsilon`` is ``"auto"``, a number, or ``"exchangeable"`` for
    clustering; ``"spatial"`` or ``"exchangeable"`` for blocking.
    ``features`` names clustering inputs: covariate names plus the special
    ``"current_yield"`` (log yield of the last training year).
    """

    panel_manifest: Path
    weather: Path
    target_year: int
    output_dir: Path
    aggregation: str = "clustering"
    n_groups: int = 25
    covariates: dict[str, Path] = field(default_factory=dict)
    features: tuple[str, ...] = ("deep_ec", "current_yield")
    epsilon: str | float = "auto"
    trend_candidates: tuple[tuple[str, ...], ...] | None = None
    standardize_features: bool = True
    cell_metrics: bool = False
    seed: int = 0
    svar: SvarConfig = field(default_factory=SvarConfig)

    def __post_init__(self):
        if self.aggregation not in ("clustering", "blocking"):
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")
        if self.n_groups < 2:
            raise ValidationError("n_groups must be >= 2")
        if self.aggregation == "blocking":
            if self.epsilon not in ("spatial", "exchangeable", "auto"):
                raise ValidationError(
                    f"blocking accepts epsilon 'spatial' or 'exchangeable', got {self.epsilon!r}")
        elif not (self.epsilon in ("auto", "exchangeable")
                  or isinstance(self.epsilon, (int, float))):
            raise ValidationError(f"bad epsilon policy {self.epsilon!r}")


def _parse_scalar(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    """Parse a flat ``key = value`` config file.

    Covariates use dotted keys (``covariate.deep_ec = path``), sampler
    settings likewise (``svar.n_iter = 20000``). Relative paths resolve
    against the config file's directory. Trend candidates are
    ``|``-separated comma lists.
    """
    path = Path(path)
    base = path.parent
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()

    def pop(key, default=None):
        return raw.pop(key, default)

    required = {}
    for key in ("panel_manifest", "weather", "target_year", "output_dir"):
        value = pop(key)
        if value is None:
            raise ValidationError(f"{path}: missing required key {key!r}")
        required[key] = value

    covariates = {}
    svar_kwargs = {}
    for key in list(raw):
        if key.startswith("covariate."):
            covariates[key.split(".", 1)[1]] = base / raw.pop(key)
        elif key.startswith("svar."):
            name = key.split(".", 1)[1]
            value = _parse_scalar(raw.pop(key))
            if name == "prior_only":
                value = str(value).lower() in ("1", "true", "yes")
            svar_kwargs[name] = value

    features = tuple(f.strip() for f in pop("features", "deep_ec,current_yield").split(","))
    candidates_text = pop("trend_candidates")
    candidates = None
    if candidates_text:
        candidates = tuple(
            tuple(p.strip() for p in group.split(",") if p.strip())
            for group in candidates_text.split("|"))

    epsilon = _parse_scalar(pop("epsilon", "auto"))
    config = PipelineConfig(
        panel_manifest=base / required["panel_manifest"],
        weather=base / required["weather"],
        target_year=int(required["target_year"]),
        output_dir=base / required["output_dir"],
        aggregation=pop("aggregation", "clustering"),
        n_groups=int(pop("n_groups", 25)),
        covariates=covariates,
        features=features,
        epsilon=epsilon,
        trend_candidates=candidates,
        standardize_features=str(pop("standardize_features", "true")).lower()
        in ("1", "true", "yes"),
        cell_metrics=str(pop("cell_metrics", "false")).lower() in ("1", "true", "yes"),
        seed=int(pop("seed", 0)),
        svar=SvarConfig(**svar_kwargs),
    )
    if raw:
        raise ValidationError(f"{path}: unknown keys {sorted(raw)}")
    return config


def read_panel_manifest(path: str | Path) -> list[tuple[int, Path]]:
    path = Path(path)
    pairs = []
    lines = path.read_text().splitlines()
    if not lines or [h.strip().lower() for h in lines[0].split(",")] != ["year", "path"]:
        raise ValidationError(f"{path}: expected header 'year,path'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        year_text, _, raster_path = line.partition(",")
        try:
            year = int(year_text)
        except ValueError:
            raise ValidationError(f"{path}: line {lineno}: bad year {year_text!r}") from None
        pairs.append((year, path.parent / raster_path.strip()))
    if not pairs:
        raise ValidationError(f"{path}: empty manifest")
    return sorted(pairs)


class PipelineRun:
    """Staged execution of one configured run.

    ``prepare`` loads training inputs only (the held-out raster path is
    recorded, never read); ``aggregate_stage``/``fit_stage``/
    ``forecast_stage`` do the modeling; ``evaluate_stage`` finally reads
    the held-out year and scores; ``write`` emits all artifacts.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.training_panel: YieldPanel | None = None
        self.log_panel: YieldPanel | None = None
        self.weather: WeatherTable | None = None
        self.covariate_rasters: dict[str, FieldRaster] = {}
        self.target_path: Path | None = None
        self.assignment: GroupAssignment | None = None
        self.neighbors: NeighborMatrix | None = None
        self.separation: SeparationMatrix | None = None
        self.grouped: GroupedPanel | None = None
        self.trend: TrendModel | None = None
        self.normalized: NormalizedPanel | None = None
        self.posterior: SvarPosterior | None = None
        self.z_forecast = None
        self.yield_draws: np.ndarray | None = None
        self.predicted_raster: FieldRaster | None = None
        self.report: MetricReport | None = None
        self.cell_report: MetricReport | None = None

    # ------------------------------------------------------------------
    def prepare(self) -> None:
        cfg = self.config
        entries = read_panel_manifest(cfg.panel_manifest)
        years = [y for y, _ in entries]
        if cfg.target_year != years[-1]:
            raise ValidationError(
                f"target year {cfg.target_year} must be the final manifest year ({years[-1]})")
        self.target_path = dict(entries)[cfg.target_year]
        training = [(y, p) for y, p in entries if y != cfg.target_year]
        rasters = [load_raster(p, "yield", time_label=y) for y, p in training]
        self.training_panel = align_panel(rasters)
        self.log_panel = log_transform(self.training_panel)
        self.weather = load_weather(cfg.weather)
        self.weather.require_years(list(self.training_panel.all_years) + [cfg.target_year])
        self.covariate_rasters = {
            name: load_raster(p, name) for name, p in sorted(cfg.covariates.items())
        }

    # ------------------------------------------------------------------
    def _feature_rasters(self) -> list[FieldRaster]:
        out = []
        for name in self.config.features:
            if name == "current_yield":
                last_year = self.log_panel.years[-1]
                out.append(self.log_panel.raster_for(last_year).with_values(
                    self.log_panel.raster_for(last_year).values,
                    variable_name="current_yield"))
            elif name in self.covariate_rasters:
                out.append(self.covariate_rasters[name])
            else:
                raise ValidationError(
                    f"feature {name!r} is not a configured covariate "
                    f"(have {sorted(self.covariate_rasters)})")
        return out

    def aggregate_stage(self) -> None:
        cfg = self.config
        if cfg.aggregation == "blocking":
            import math
            b = math.isqrt(cfg.n_groups)
            if b * b != cfg.n_groups:
                raise ValidationError("blocking requires a square n_groups")
            self.assignment = block_partition(self.log_panel.geometry, b)
            if cfg.epsilon == "exchangeable":
                self.neighbors = exchangeable_neighbors(cfg.n_groups)
            else:
                self.neighbors = block_neighbors(self.assignment)
        else:
            feats = self._feature_rasters()
            x, valid, space = build_features(feats, standardize=cfg.standardize_features)
            labels_flat, _, _ = kmeans(x, cfg.n_groups, derive_seed(cfg.seed, "kmeans"))
            labels = np.full(valid.shape, -1, dtype=int)
            labels[valid] = labels_flat
            self.assignment = GroupAssignment(
                method="clustering", n_groups=cfg.n_groups, labels=labels,
                geometry=feats[0].geometry, feature_space=space)
            self.separation = separation_matrix(x, self.assignment)
            if cfg.epsilon == "exchangeable":
                self.neighbors = exchangeable_neighbors(cfg.n_groups)
            else:
                eps = auto_epsilon(self.separation) if cfg.epsilon == "auto" \
                    else float(cfg.epsilon)
                self.neighbors = epsilon_neighbors(self.separation, eps)

        self.grouped = aggregate_groups(self.log_panel, self.assignment)
        covs = {name: aggregate_raster(r, self.assignment)
                for name, r in self.covariate_rasters.items()}
        self.grouped = replace(self.grouped, covariates=covs)

    # ------------------------------------------------------------------
    def fit_stage(self) -> None:
        cfg = self.config
        candidates = list(cfg.trend_candidates) if cfg.trend_candidates else None
        self.trend = fit_trend(self.grouped, self.weather, candidates)
        self.normalized = detrend(self.grouped, self.trend)
        svar_config = replace(cfg.svar, seed=derive_seed(cfg.seed, "mcmc"))
        self.posterior = mcmc_run(self.normalized, self.neighbors, svar_config)

    def forecast_stage(self) -> None:
        cfg = self.config
        z_last = self.normalized.last_observed()
        self.z_forecast = forecast(self.posterior, z_last,
                                   seed=derive_seed(cfg.seed, "forecast"))
        self.yield_draws = retrend(self.z_forecast.draws, self.trend,
                                   cfg.target_year, self.weather)
        yield_mean = self.yield_draws.mean(axis=0)
        self.predicted_raster = disaggregate(
            yield_mean, self.assignment,
            variable_name="predicted_yield", time_label=cfg.target_year)

    # ------------------------------------------------------------------
    def evaluate_stage(self) -> None:
        cfg = self.config
        observed_raster = load_raster(self.target_path, "yield",
                                      time_label=cfg.target_year)
        if not observed_raster.geometry.matches(self.training_panel.geometry):
            raise ValidationError("held-out raster is on a different grid")
        observed = aggregate_raster(observed_raster, self.assignment)
        if np.isnan(observed).any():
            raise ValidationError("a group has no observed cells in the held-out year")
        predicted = self.yield_draws.mean(axis=0)
        labels = {
            "aggregation": cfg.aggregation,
            "model": "SVAR",
            "groups": str(cfg.n_groups),
            "epsilon": str(self.neighbors.epsilon),
        }
        if self.neighbors.isolated:
            labels["flag"] = "isolated clusters present"
        self.report = compute_metrics(observed, predicted, labels)
        if cfg.cell_metrics:
            both = self.predicted_raster.mask & observed_raster.mask
            self.cell_report = compute_metrics(
                observed_raster.values[both], self.predicted_raster.values[both],
                {**labels, "level": "cell"})

    # ------------------------------------------------------------------
    def write(self) -> dict[str, Path]:
        cfg = self.config
        outdir = Path(cfg.output_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths: dict[str, Path] = {}

        ycio.write_assignment(self.assignment, outdir / "assignment.csv")
        paths["assignment"] = outdir / "assignment.csv"
        if self.separation is not None:
            ycio.write_separation_matrix(self.separation, outdir / "separation_matrix.csv")
            paths["separation_matrix"] = outdir / "separation_matrix.csv"
        ycio.write_neighbor_matrix(self.neighbors, outdir / "R_matrix.csv")
        paths["R_matrix"] = outdir / "R_matrix.csv"

        with open(outdir / "neighbor_report.csv", "w") as fh:
            fh.write("group,n_neighbors\n")
            for i in range(self.neighbors.n_groups):
                fh.write(f"{i},{self.neighbors.R[i, i]}\n")
        paths["neighbor_report"] = outdir / "neighbor_report.csv"

        paths.update(ycio.write_trend_report(self.trend, outdir))
        ycio.write_normalized_panel(self.normalized, outdir / "normalized_panel.csv")
        paths["normalized_panel"] = outdir / "normalized_panel.csv"

        ycio.write_posterior(self.posterior, outdir / "posterior_draws.csv")
        paths["posterior_draws"] = outdir / "posterior_draws.csv"
        with open(outdir / "diagnostics.csv", "w") as fh:
            fh.write("quantity,value\n")
            for key, value in self.posterior.acceptance.items():
                fh.write(f"acceptance_{key},{value!r}\n")
            for key, value in self.posterior.rhat.items():
                fh.write(f"rhat_{key},{value!r}\n")
        paths["diagnostics"] = outdir / "diagnostics.csv"

        ycio.write_forecast_summary(self.z_forecast, outdir / "forecast_summary.csv",
                                    yield_scale=self.yield_draws)
        paths["forecast_summary"] = outdir / "forecast_summary.csv"
        write_raster(self.predicted_raster, outdir / "predicted_raster.csv")
        paths["predicted_raster"] = outdir / "predicted_raster.csv"

        reports = [self.report] + ([self.cell_report] if self.cell_report else [])
        ycio.write_metrics(reports, outdir / "metrics.csv")
        paths["metrics"] = outdir / "metrics.csv"
        (outdir / "comparison_table.txt").write_text(comparison_table(reports) + "\n")
        paths["comparison_table"] = outdir / "comparison_table.txt"

        manifest = {
            "config": {
                "panel_manifest": str(cfg.panel_manifest),
                "weather": str(cfg.weather),
                "covariates": {k: str(v) for k, v in cfg.covariates.items()},
                "aggregation": cfg.aggregation,
                "n_groups": cfg.n_groups,
                "features": list(cfg.features),
                "epsilon": cfg.epsilon,
                "trend_candidates": (
                    [list(c) for c in cfg.trend_candidates]
                    if cfg.trend_candidates else None),
                "standardize_features": cfg.standardize_features,
                "cell_metrics": cfg.cell_metrics,
                "target_year": cfg.target_year,
                "seed": cfg.seed,
                "svar": {k: getattr(cfg.svar, k) for k in (
                    "n_iter", "burn_in", "thin", "n_chains", "step_eta",
                    "step_lambda", "step_tau2", "a_sigma", "b_sigma", "a_tau",
                    "b_tau", "adapt_interval", "accept_low", "accept_high",
                    "prior_only")},
            },
            "derived_seeds": {k: derive_seed(cfg.seed, k) for k in _SEED_KEYS},
            "held_out_year": cfg.target_year,
            "held_out_raster": str(self.target_path),
        }
        (outdir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        paths["run_manifest"] = outdir / "run_manifest.json"
        return paths

    # ------------------------------------------------------------------
    def execute(self) -> dict[str, Path]:
        stages = [
            ("prepare", self.prepare),
            ("aggregate", self.aggregate_stage),
            ("fit", self.fit_stage),
            ("forecast", self.forecast_stage),
            ("evaluate", self.evaluate_stage),
        ]
        for name, step in stages:
            try:
                step()
            except Exception as exc:
                raise type(exc)(f"[stage {name}] {exc}") from exc
        return self.write()


def run_pipeline(config: PipelineConfig) -> dict[str, Path]:
    """Execute the full chain and return the artifact paths."""
    return PipelineRun(config).execute()


def epsilon_sweep(config: PipelineConfig, epsilons: list[str | float]
                  ) -> tuple[list[MetricReport], str]:
    """One full fit per neighborhood definition, merged into one table.

    For clustering, each entry of ``epsilons`` (``"auto"`` or a value) is
    fitted along with the exchangeable (complete-graph) variant. For
    blocking, the spatial and exchangeable structures are compared.
    Returns the reports and the rendered comparison table; a CSV and the
    table are also written to the run's output directory.
    """
    if config.aggregation == "clustering":
        policies: list[str | float] = list(epsilons)
        if "exchangeable" not in policies:
            policies.append("exchangeable")
    else:
        policies = ["spatial", "exchangeable"]

    reports = []
    for policy in policies:
        sub = replace(config, epsilon=policy,
                      output_dir=Path(config.output_dir) / f"eps_{policy}")
        run = PipelineRun(sub)
        run.execute()
        reports.append(run.report)

    table = comparison_table(reports)
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    ycio.write_metrics(reports, outdir / "sweep_metrics.csv")
    (outdir / "sweep_table.txt").write_text(table + "\n")
    return reports, table
