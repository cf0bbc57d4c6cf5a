"""Command-line interface.

Subcommands mirror the pipeline stages so each step can also run on its
own: ``ingest``, ``eof``, ``block``, ``cluster``, ``trend``, ``fit``,
``forecast``, ``evaluate``, ``synth``, ``run``, and ``sweep``. Exit codes:
0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as ycio
from .aggregate import (aggregate_raster, auto_epsilon, block_neighbors,
                        block_partition, build_features, epsilon_neighbors,
                        exchangeable_neighbors, kmeans, separation_matrix,
                        GroupAssignment)
from .eof import compute_eofs
from .errors import NumericalError, ValidationError
from .grid import align_panel, load_raster, load_weather, log_transform, write_raster
from .metrics import compute_metrics, comparison_table
from .pipeline import (epsilon_sweep, load_pipeline_config,
                       read_panel_manifest, run_pipeline)
from .svar import SvarConfig, disaggregate, forecast, mcmc_run
from .synth import SynthSpec, generate, inhomogeneous_spec, write_dataset
from .trend import fit_trend


def _cmd_ingest(args):
    entries = read_panel_manifest(args.manifest)
    rasters = [load_raster(p, "yield", time_label=y) for y, p in entries]
    panel = align_panel(rasters)
    geo = panel.geometry
    print(f"panel: {len(panel.years)} years {panel.years[0]}..{panel.years[-1]}, "
          f"gap years {list(panel.gap_years) or 'none'}")
    print(f"grid: {geo.n_rows}x{geo.n_cols} cells of {geo.cell_size} m "
          f"at origin ({geo.origin_x}, {geo.origin_y})")
    log_transform(panel)
    print("log-transform: ok (all values positive)")


def _cmd_eof(args):
    entries = read_panel_manifest(args.manifest)
    surveys = [load_raster(p, args.variable, time_label=y) for y, p in entries]
    decomp = compute_eofs(surveys, args.k)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    for j, pattern in enumerate(decomp.patterns, start=1):
        write_raster(pattern, outdir / f"{args.variable}_eof{j}.csv")
    with open(outdir / "variance_report.csv", "w") as fh:
        fh.write("pattern,variance_fraction\n")
        for j, vf in enumerate(decomp.variance_fraction, start=1):
            fh.write(f"{j},{vf!r}\n")
    print(f"wrote {len(decomp.patterns)} patterns to {outdir}; "
          f"EOF1 explains {decomp.variance_fraction[0]:.1%} of variance")


def _write_groups(assignment, neighbors, separation, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ycio.write_assignment(assignment, outdir / "assignment.csv")
    ycio.write_neighbor_matrix(neighbors, outdir / "R_matrix.csv")
    if separation is not None:
        ycio.write_separation_matrix(separation, outdir / "separation_matrix.csv")
    with open(outdir / "neighbor_report.csv", "w") as fh:
        fh.write("group,n_neighbors\n")
        for i in range(neighbors.n_groups):
            fh.write(f"{i},{neighbors.R[i, i]}\n")


def _cmd_block(args):
    raster = load_raster(args.raster, "yield")
    assignment = block_partition(raster.geometry, args.blocks_per_side)
    neighbors = (exchangeable_neighbors(assignment.n_groups) if args.exchangeable
                 else block_neighbors(assignment))
    _write_groups(assignment, neighbors, None, args.output)
    print(f"{assignment.n_groups} blocks; block sizes "
          f"{sorted(set(assignment.group_sizes.tolist()))}")


def _cmd_cluster(args):
    rasters = [load_raster(p, Path(p).stem) for p in args.features]
    x, valid, space = build_features(rasters, standardize=not args.no_standardize)
    labels_flat, _, inertia = kmeans(x, args.k, args.seed)
    labels = np.full(valid.shape, -1, dtype=int)
    labels[valid] = labels_flat
    assignment = GroupAssignment(method="clustering", n_groups=args.k, labels=labels,
                                 geometry=rasters[0].geometry, feature_space=space)
    separation = separation_matrix(x, assignment)
    if args.exchangeable:
        neighbors = exchangeable_neighbors(args.k)
    else:
        eps = auto_epsilon(separation) if args.epsilon is None else args.epsilon
        neighbors = epsilon_neighbors(separation, eps)
    _write_groups(assignment, neighbors, separation, args.output)
    print(f"k-means: k={args.k}, inertia={inertia:.4f}, epsilon={neighbors.epsilon}")
    if neighbors.isolated:
        print(f"warning: isolated groups {list(neighbors.isolated)}")


def _cmd_trend(args):
    entries = read_panel_manifest(args.manifest)
    rasters = [load_raster(p, "yield", time_label=y) for y, p in entries]
    panel = log_transform(align_panel(rasters))
    weather = load_weather(args.weather)
    assignment = block_partition(panel.geometry, 1)
    from .aggregate import aggregate_groups
    grouped = aggregate_groups(panel, assignment)
    model = fit_trend(grouped, weather)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    ycio.write_trend_report(model, outdir)
    print(f"selected trend: log(yield) ~ {' + '.join(model.predictors) or '1'}")


def _cmd_fit(args):
    panel = ycio.load_normalized_panel(args.panel)
    neighbors = ycio.load_neighbor_matrix(args.R)
    kwargs = {}
    if args.config:
        text = Path(args.config).read_text()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            key = key.strip().removeprefix("svar.")
            value = value.strip()
            if key == "prior_only":
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif key in ("step_eta", "step_lambda", "step_tau2", "a_sigma",
                         "b_sigma", "a_tau", "b_tau", "accept_low", "accept_high"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
    if args.seed is not None:
        kwargs["seed"] = args.seed
    config = SvarConfig(**kwargs)
    posterior = mcmc_run(panel, neighbors, config)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    ycio.write_posterior(posterior, outdir / "posterior_draws.csv")
    with open(outdir / "diagnostics.csv", "w") as fh:
        fh.write("quantity,value\n")
        for key, value in posterior.acceptance.items():
            fh.write(f"acceptance_{key},{value!r}\n")
        for key, value in posterior.rhat.items():
            fh.write(f"rhat_{key},{value!r}\n")
    worst = max(v for v in posterior.rhat.values() if np.isfinite(v))
    print(f"{posterior.n_draws} draws; acceptance {posterior.acceptance}; "
          f"max split-Rhat {worst:.3f}")


def _cmd_forecast(args):
    posterior = ycio.load_posterior(args.posterior, seed=args.seed)
    panel = ycio.load_normalized_panel(args.panel)
    fc = forecast(posterior, panel.last_observed(), seed=args.seed)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    yield_draws = None
    if args.trend_value is not None:
        yield_draws = np.exp(fc.draws + args.trend_value)
    ycio.write_forecast_summary(fc, outdir / "forecast_summary.csv",
                                yield_scale=yield_draws)
    if args.assignment:
        assignment = ycio.load_assignment(args.assignment)
        values = (yield_draws if yield_draws is not None else fc.draws).mean(axis=0)
        raster = disaggregate(values, assignment, variable_name="predicted_yield")
        write_raster(raster, outdir / "predicted_raster.csv")
    print(f"forecast written for {fc.n_groups} groups")


def _cmd_evaluate(args):
    observed = load_raster(args.observed, "yield")
    predicted = load_raster(args.predicted, "predicted")
    assignment = ycio.load_assignment(args.assignment)
    obs_g = aggregate_raster(observed, assignment)
    pred_g = aggregate_raster(predicted, assignment)
    report = compute_metrics(obs_g, pred_g, {"aggregation": assignment.method,
                                             "model": "SVAR",
                                             "groups": str(assignment.n_groups)})
    reports = [report]
    if args.cell_level:
        both = observed.mask & predicted.mask
        reports.append(compute_metrics(observed.values[both], predicted.values[both],
                                       {"level": "cell"}))
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    ycio.write_metrics(reports, outdir / "metrics.csv")
    table = comparison_table([report])
    (outdir / "comparison_table.txt").write_text(table + "\n")
    print(table)


def _cmd_synth(args):
    if args.preset == "inhomogeneous":
        spec = inhomogeneous_spec(seed=args.seed, n_groups=args.groups)
    else:
        spec = SynthSpec(seed=args.seed, n_groups=args.groups,
                         gap_year=args.gap_year)
    dataset = generate(spec)
    paths = write_dataset(dataset, args.output)
    print(f"synthetic dataset in {args.output}: "
          f"{len(dataset.panel.years)} years, {spec.n_groups} groups "
          f"({spec.layout} layout)")
    print(f"manifest: {paths['panel_manifest']}")


def _cmd_run(args):
    config = load_pipeline_config(args.config)
    paths = run_pipeline(config)
    print(f"run complete; artifacts in {config.output_dir}")
    print((Path(paths["comparison_table"])).read_text().rstrip())


def _cmd_sweep(args):
    config = load_pipeline_config(args.config)
    epsilons: list[str | float] = []
    for item in args.epsilon or ["auto"]:
        epsilons.append(item if item in ("auto", "exchangeable") else float(item))
    _, table = epsilon_sweep(config, epsilons)
    print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yieldcast",
        description="Site-specific yield forecasting from short series of yield maps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a panel manifest and its rasters")
    p.add_argument("manifest")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("eof", help="EOF decomposition of repeated surveys")
    p.add_argument("manifest", help="survey manifest (year,path)")
    p.add_argument("-k", type=int, default=1, help="number of patterns to keep")
    p.add_argument("--variable", default="survey")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_eof)

    p = sub.add_parser("block", help="partition the field into equal blocks")
    p.add_argument("raster", help="any raster on the target grid")
    p.add_argument("blocks_per_side", type=int)
    p.add_argument("--exchangeable", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_block)

    p = sub.add_parser("cluster", help="k-means clustering of feature rasters")
    p.add_argument("features", nargs="+", help="feature raster CSVs")
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=None,
                   help="neighbor threshold (default: auto)")
    p.add_argument("--exchangeable", action="store_true")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("trend", help="fit and select the yearly trend model")
    p.add_argument("manifest")
    p.add_argument("weather")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_trend)

    p = sub.add_parser("fit", help="run the MCMC sampler on a normalized panel")
    p.add_argument("panel", help="normalized panel CSV (group,year,z)")
    p.add_argument("R", help="neighborhood matrix CSV")
    p.add_argument("--config", help="flat key=value sampler settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("forecast", help="one-year-ahead posterior predictive")
    p.add_argument("posterior", help="posterior draws CSV")
    p.add_argument("panel", help="normalized panel CSV (for the last year's Z)")
    p.add_argument("--assignment", help="assignment CSV for the predicted raster")
    p.add_argument("--trend-value", type=float, default=None,
                   help="trend prediction for the target year (enables Mg/Ha output)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_forecast)

    p = sub.add_parser("evaluate", help="score a predicted raster against observations")
    p.add_argument("observed")
    p.add_argument("predicted")
    p.add_argument("assignment")
    p.add_argument("--cell-level", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known truth")
    p.add_argument("--preset", choices=["plain", "inhomogeneous"], default="plain")
    p.add_argument("--groups", type=int, default=25)
    p.add_argument("--gap-year", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="epsilon sensitivity sweep")
    p.add_argument("config")
    p.add_argument("--epsilon", nargs="*", help="auto, exchangeable, or numbers")
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
