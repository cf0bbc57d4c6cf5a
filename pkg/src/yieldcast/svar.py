"""Bayesian spatially varying AR(1) for grouped normalized yield.

Each group follows its own first-order autoregression

    Z[i, t] = rho_i * Z[i, t-1] + eps[i, t],   eps ~ N(0, sigma2),

with the first year conditioned on. The per-group coefficients share a
Gaussian copula prior: a latent field eta ~ N(0, Omega) is pushed through
the normal CDF and the Uniform(-1, 1) quantile, so every rho_i lands in
(-1, 1) while neighboring groups stay correlated. Omega follows the
Leroux-style conditional autoregression

    Omega = tau2 * Q^{-1},   Q = (1 - lambda) * I + lambda * R,

where R is the neighborhood matrix (neighbor counts on the diagonal, -1
per neighboring pair). Hyperpriors: sigma2 and tau2 inverse-gamma(0.01,
0.01), lambda uniform on (0, 1).

Estimation is Metropolis-within-Gibbs (see ``_mcmc``); a missing interior
year is imputed each sweep from its exact conditional, which for this
model reduces per group to

    Z[i, m] | rest ~ N( rho_i (Z[i,m-1] + Z[i,m+1]) / (1 + rho_i^2),
                        sigma2 / (1 + rho_i^2) ).

One-year-ahead forecasts are drawn from the posterior predictive by
forward sampling: Zhat_i = rho_i * Z[i, T] + eps_i per retained draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import ndtr

from . import _mcmc
from .aggregate import GroupAssignment, NeighborMatrix
from .errors import NumericalError, ValidationError
from .grid import FieldRaster
from .trend import NormalizedPanel

_FORECAST_SPAWN_KEY = 104729  # distinct substream for predictive noise


@dataclass(frozen=True)
class SvarConfig:
    """Sampler settings and prior hyperparameters.

    ``(n_iter - burn_in)`` must be divisible by ``thin`` so that the
    retained draw count is exactly ``n_chains * (n_iter - burn_in) / thin``.
    Step sizes are relative scales; they adapt during burn-in toward the
    ``accept_low``..``accept_high`` window and are frozen afterwards.
    ``prior_only`` switches the likelihood off, leaving the sampler
    targeting the prior (used to validate the copula/CAR machinery).
    """

    n_iter: int = 20_000
    burn_in: int = 10_000
    thin: int = 10
    n_chains: int = 4
    seed: int = 0
    step_eta: float = 0.5
    step_lambda: float = 0.5
    step_tau2: float = 0.5
    a_sigma: float = 0.01
    b_sigma: float = 0.01
    a_tau: float = 0.01
    b_tau: float = 0.01
    adapt_interval: int = 100
    accept_low: float = 0.20
    accept_high: float = 0.45
    prior_only: bool = False

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValidationError("need n_iter > burn_in >= 0")
        if self.thin < 1 or (self.n_iter - self.burn_in) % self.thin:
            raise ValidationError("(n_iter - burn_in) must be divisible by thin")
        if min(self.step_eta, self.step_lambda, self.step_tau2) <= 0:
            raise ValidationError("proposal step sizes must be positive")
        if self.n_chains < 1:
            raise ValidationError("n_chains must be >= 1")
        if min(self.a_sigma, self.b_sigma, self.a_tau, self.b_tau) <= 0:
            raise ValidationError("prior hyperparameters must be positive")

    @property
    def n_draws(self) -> int:
        return self.n_chains * (self.n_iter - self.burn_in) // self.thin


class CarModel:
    """CAR covariance machinery for one neighborhood matrix.

    The eigendecomposition of R is computed once and reused: precision,
    covariance, and log-determinant for any (tau2, lambda) then cost no
    further factorization.
    """

    def __init__(self, R: NeighborMatrix | np.ndarray):
        r = R.R if isinstance(R, NeighborMatrix) else np.asarray(R, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValidationError("R must be a square matrix")
        self.R = np.asarray(r, dtype=float)
        self.n = r.shape[0]
        self.eigvals, self.eigvecs = np.linalg.eigh(self.R)

    def _check(self, tau2: float, lam: float) -> None:
        if tau2 <= 0:
            raise ValidationError(f"tau2 must be positive, got {tau2}")
        if not 0 <= lam < 1:
            raise ValidationError(f"lambda must be in [0, 1), got {lam}")

    def precision_eigvals(self, lam: float) -> np.ndarray:
        return (1 - lam) + lam * self.eigvals

    def precision(self, lam: float) -> np.ndarray:
        d = self.precision_eigvals(lam)
        return (self.eigvecs * d) @ self.eigvecs.T

    def covariance(self, tau2: float, lam: float) -> np.ndarray:
        self._check(tau2, lam)
        if lam == 0:
            return tau2 * np.eye(self.n)
        d = self.precision_eigvals(lam)
        if d.min() <= 0:
            raise NumericalError(f"CAR precision singular at lambda={lam}")
        return tau2 * (self.eigvecs / d) @ self.eigvecs.T

    def covariance_diag(self, tau2: float, lam: float) -> np.ndarray:
        self._check(tau2, lam)
        d = self.precision_eigvals(lam)
        if d.min() <= 0:
            raise NumericalError(f"CAR precision singular at lambda={lam}")
        return tau2 * (self.eigvecs**2) @ (1.0 / d)


def car_covariance(tau2: float, lam: float, R: NeighborMatrix | np.ndarray) -> np.ndarray:
    """Covariance ``tau2 * ((1-lambda) I + lambda R)^{-1}``.

    ``lambda = 0`` returns ``tau2 * I`` exactly. A numerically singular
    precision (possible only in degenerate limits) raises NumericalError.
    """
    r = R.R if isinstance(R, NeighborMatrix) else np.asarray(R, dtype=float)
    if tau2 <= 0:
        raise ValidationError(f"tau2 must be positive, got {tau2}")
    if not 0 <= lam < 1:
        raise ValidationError(f"lambda must be in [0, 1), got {lam}")
    n = r.shape[0]
    if lam == 0:
        return tau2 * np.eye(n)
    q = (1 - lam) * np.eye(n) + lam * np.asarray(r, dtype=float)
    try:
        chol = cho_factor(q, lower=True)
    except LinAlgError as exc:
        raise NumericalError(f"CAR precision singular: {exc}") from None
    return tau2 * cho_solve(chol, np.eye(n))


def copula_transform(eta: np.ndarray, omega_diag: np.ndarray) -> np.ndarray:
    """Map latent Gaussian coordinates to AR coefficients in (-1, 1).

    ``rho_i = 2 * Phi(eta_i / sqrt(omega_ii)) - 1``: the standard-normal
    CDF pushes each standardized coordinate to a uniform, and the
    Uniform(-1, 1) quantile places it on the AR-coefficient scale.
    """
    eta = np.asarray(eta, dtype=float)
    omega_diag = np.asarray(omega_diag, dtype=float)
    if (omega_diag <= 0).any():
        raise ValidationError("omega diagonal must be positive")
    return 2.0 * ndtr(eta / np.sqrt(omega_diag)) - 1.0


def log_likelihood(Z: np.ndarray, rho: np.ndarray, sigma2: float) -> float:
    """Transition log-likelihood of a complete panel.

    Sums ``log N(Z[i,t]; rho_i Z[i,t-1], sigma2)`` over every group and
    every transition; the first column is conditioned on.
    """
    Z = np.asarray(Z, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if sigma2 <= 0:
        raise ValidationError(f"sigma2 must be positive, got {sigma2}")
    if not np.isfinite(Z).all():
        raise ValidationError("panel must be complete (impute the gap year first)")
    n, T = Z.shape
    resid = Z[:, 1:] - rho[:, None] * Z[:, :-1]
    return float(-0.5 * n * (T - 1) * np.log(2 * np.pi * sigma2)
                 - 0.5 * np.sum(resid**2) / sigma2)


def impute_params(Z: np.ndarray, rho: np.ndarray, sigma2: float, gap_index: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the missing-year conditional, per group.

    Requires the gap to be strictly interior. The conditional follows from
    the two transition terms that touch year ``m``; it coincides with the
    generic multivariate-normal conditioning of the full joint.
    """
    Z = np.asarray(Z, dtype=float)
    rho = np.asarray(rho, dtype=float)
    n, T = Z.shape
    if not 1 <= gap_index <= T - 2:
        raise ValidationError(
            f"gap year must be strictly interior (index {gap_index} of {T} years); "
            "boundary extrapolation is unsupported")
    denom = 1.0 + rho**2
    mean = rho * (Z[:, gap_index - 1] + Z[:, gap_index + 1]) / denom
    var = sigma2 / denom
    return mean, np.broadcast_to(var, mean.shape).copy()


def impute_missing(Z: np.ndarray, rho: np.ndarray, sigma2: float, gap_index: int,
                   rng: np.random.Generator) -> np.ndarray:
    """One draw of the missing year from its conditional distribution."""
    mean, var = impute_params(Z, rho, sigma2, gap_index)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class SvarPosterior:
    """Retained draws plus sampler diagnostics.

    Row ``k`` of each array is one retained state; ``chain_id[k]`` says
    which chain produced it. ``z_missing`` is None when the panel had no
    gap year. ``acceptance`` holds post-burn-in Metropolis acceptance
    rates; ``rhat`` the split-Rhat of every scalar parameter.
    """

    eta: np.ndarray
    rho: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    lam: np.ndarray
    z_missing: np.ndarray | None
    chain_id: np.ndarray
    acceptance: dict[str, float]
    rhat: dict[str, float]
    config: SvarConfig

    @property
    def n_draws(self) -> int:
        return self.rho.shape[0]

    @property
    def n_groups(self) -> int:
        return self.rho.shape[1]

    def rho_mean(self) -> np.ndarray:
        return self.rho.mean(axis=0)

    def rho_interval(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        a = (1 - level) / 2
        return (np.quantile(self.rho, a, axis=0),
                np.quantile(self.rho, 1 - a, axis=0))


def split_rhat(chains: np.ndarray) -> float:
    """Split-Rhat of one scalar parameter from (n_chains, n_draws) samples."""
    chains = np.asarray(chains, dtype=float)
    half = chains.shape[1] // 2
    if half < 2:
        return np.nan
    seqs = np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)
    within = seqs.var(axis=1, ddof=1).mean()
    if within == 0:
        return 1.0
    between = half * seqs.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * within + between / half
    return float(np.sqrt(var_plus / within))


def mcmc_run(panel: NormalizedPanel, R: NeighborMatrix, config: SvarConfig) -> SvarPosterior:
    """Estimate the model by Metropolis-within-Gibbs MCMC.

    Chains run with independent seeded streams and identical settings; the
    result is deterministic given ``(panel, R, config)``. The panel's years
    must be consecutive; at most one (strictly interior) gap year is
    supported and is imputed within the sampler.
    """
    years = panel.years
    if tuple(range(years[0], years[-1] + 1)) != tuple(years):
        raise ValidationError("panel years must be consecutive (gap years included)")
    gaps = panel.gap_indices
    if len(gaps) > 1:
        raise ValidationError(f"at most one gap year supported, got {panel.gap_years}")
    gap_idx = gaps[0] if gaps else -1
    n, T = panel.values.shape
    if T - len(gaps) < 3:
        raise ValidationError("need at least 3 observed years")
    if R.n_groups != n:
        raise ValidationError(f"R is {R.n_groups}x{R.n_groups} but panel has {n} groups")
    if gap_idx in (0, T - 1):
        raise ValidationError("gap year at the series boundary is unsupported")

    Z0 = panel.values.copy()
    obs = np.ones(T, dtype=bool)
    if gap_idx >= 0:
        obs[gap_idx] = False
    if not np.isfinite(Z0[:, obs]).all():
        raise NumericalError("non-finite values in the observed panel")

    car = CarModel(R)
    v2 = car.eigvecs**2

    chain_seeds = [
        int(ss.generate_state(1, dtype=np.uint32)[0])
        for ss in np.random.SeedSequence(config.seed).spawn(config.n_chains)
    ]

    parts = []
    acc = np.zeros(3)
    for seed in chain_seeds:
        out = _mcmc.run_chain(
            np.ascontiguousarray(Z0), gap_idx,
            np.ascontiguousarray(car.eigvecs), np.ascontiguousarray(v2),
            np.ascontiguousarray(car.eigvals),
            config.n_iter, config.burn_in, config.thin,
            config.a_sigma, config.b_sigma, config.a_tau, config.b_tau,
            config.step_eta, config.step_lambda, config.step_tau2,
            config.adapt_interval, config.accept_low, config.accept_high,
            config.prior_only, seed,
        )
        parts.append(out[:6])
        acc += np.array(out[6:])
    acc /= config.n_chains

    eta = np.concatenate([p[0] for p in parts])
    rho = np.concatenate([p[1] for p in parts])
    sigma2 = np.concatenate([p[2] for p in parts])
    tau2 = np.concatenate([p[3] for p in parts])
    lam = np.concatenate([p[4] for p in parts])
    zmiss = np.concatenate([p[5] for p in parts]) if gap_idx >= 0 else None
    per_chain = parts[0][0].shape[0]
    chain_id = np.repeat(np.arange(config.n_chains), per_chain)

    def _stack(x):
        return x.reshape(config.n_chains, per_chain, -1)

    rhat: dict[str, float] = {
        "sigma2": split_rhat(_stack(sigma2)[:, :, 0]),
        "tau2": split_rhat(np.log(_stack(tau2)[:, :, 0])),
        "lambda": split_rhat(_stack(lam)[:, :, 0]),
    }
    rho_c = _stack(rho)
    for i in range(n):
        rhat[f"rho[{i}]"] = split_rhat(rho_c[:, :, i])

    return SvarPosterior(
        eta=eta, rho=rho, sigma2=sigma2, tau2=tau2, lam=lam,
        z_missing=zmiss, chain_id=chain_id,
        acceptance={"eta": float(acc[0]), "lambda": float(acc[1]), "tau2": float(acc[2])},
        rhat=rhat,
        config=config,
    )


@dataclass(frozen=True)
class Forecast:
    """Posterior predictive draws of next-year Z, with summaries per group."""

    draws: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.draws.shape[1]


def forecast(posterior: SvarPosterior, z_last: np.ndarray, horizon: int = 1,
             seed: int | None = None) -> Forecast:
    """Forward-sample the posterior predictive one year ahead.

    Per retained draw: ``Zhat_i = rho_i * z_last_i + N(0, sigma2)``. The
    predictive noise stream is derived from the sampler seed unless
    ``seed`` overrides it.
    """
    if horizon != 1:
        raise ValidationError("only one-year-ahead forecasting is supported")
    if posterior.n_draws == 0:
        raise ValidationError("posterior has no retained draws")
    z_last = np.asarray(z_last, dtype=float)
    if z_last.shape != (posterior.n_groups,):
        raise ValidationError(
            f"z_last must have {posterior.n_groups} entries, got {z_last.shape}")
    entropy = posterior.config.seed if seed is None else seed
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=entropy, spawn_key=(_FORECAST_SPAWN_KEY,)))
    eps = rng.standard_normal(posterior.rho.shape)
    draws = posterior.rho * z_last[None, :] + np.sqrt(posterior.sigma2)[:, None] * eps
    return Forecast(
        draws=draws,
        mean=draws.mean(axis=0),
        median=np.median(draws, axis=0),
        lower95=np.quantile(draws, 0.025, axis=0),
        upper95=np.quantile(draws, 0.975, axis=0),
    )


def disaggregate(values_per_group: np.ndarray, assignment: GroupAssignment,
                 variable_name: str = "forecast", time_label: int | str = "forecast"
                 ) -> FieldRaster:
    """Broadcast per-group values back onto the grid.

    Every cell receives its group's value; unassigned cells stay missing.
    """
    values_per_group = np.asarray(values_per_group, dtype=float)
    if values_per_group.shape != (assignment.n_groups,):
        raise ValidationError(
            f"expected {assignment.n_groups} group values, got {values_per_group.shape}")
    padded = np.append(values_per_group, np.nan)
    grid = padded[assignment.labels]     # label -1 picks the NaN pad
    geo = assignment.geometry
    return FieldRaster(
        variable_name=variable_name,
        time_label=time_label,
        origin_x=geo.origin_x,
        origin_y=geo.origin_y,
        cell_size=geo.cell_size,
        values=grid,
    )
