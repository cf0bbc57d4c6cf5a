"""Site-specific yield forecasting from short series of yield maps.

Two-stage method: spatial aggregation (blocking or feature-space k-means
clustering) reduces a noisy high-resolution panel to group time series;
a Bayesian spatially varying AR(1) with a Gaussian-copula/CAR prior then
forecasts each group one year ahead, and the group forecasts are broadcast
back onto the grid as a fine-resolution predicted yield map.
"""

from .aggregate import (GroupAssignment, GroupedPanel, NeighborMatrix,
                        SeparationMatrix, aggregate_groups, aggregate_raster,
                        auto_epsilon, block_neighbors, block_partition,
                        epsilon_neighbors, exchangeable_neighbors, kmeans,
                        kmeans_cluster, separation_matrix)
from .eof import EofDecomposition, compute_eofs
from .errors import NumericalError, ValidationError, YieldcastError
from .grid import (FieldRaster, GridGeometry, WeatherTable, YieldPanel,
                   align_panel, load_raster, load_weather, log_transform,
                   write_raster)
from .metrics import MetricReport, comparison_table, compute_metrics
from .pipeline import (PipelineConfig, PipelineRun, epsilon_sweep,
                       load_pipeline_config, run_pipeline)
from .svar import (CarModel, Forecast, SvarConfig, SvarPosterior,
                   car_covariance, copula_transform, disaggregate, forecast,
                   impute_missing, impute_params, log_likelihood, mcmc_run)
from .synth import SynthSpec, SynthDataset, generate, inhomogeneous_spec
from .trend import (NormalizedPanel, TrendModel, detrend, fit_trend, retrend)

__version__ = "0.1.0"
