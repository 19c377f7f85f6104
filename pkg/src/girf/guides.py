"""Guide functions: approximate forecast likelihoods that steer resampling.

A guide value at grid time t approximates the likelihood of the next B
observations given the current latent state.  The general simulation-based
construction forecasts each particle with the model's deterministic skeleton,
estimates forecast variability from a handful of random forecast simulations
(re-estimated at the first sub-step of each observation interval and rescaled
linearly in the remaining time in between), and evaluates each future
observation under the measurement family with the inflated variability.
Fractional powers that grow as the forecast interval shrinks temper how fast
future observations enter the weights.

Degenerate configurations recover classical filters: a guide equal to the
current measurement density with one sub-step per interval is the bootstrap
filter, and a one-step lookahead through a point forecast is the auxiliary
particle filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DomainError, NonFiniteGuide
from .pomp import PompModel, TimeGrid

__all__ = [
    "GuideSpec",
    "ForecastCache",
    "lookahead_power",
    "forecast_moments",
    "rescale_variability",
    "guide_value",
    "Guide",
    "SimulationGuide",
    "BootstrapGuide",
    "ApfGuide",
    "AnalyticForecastGuide",
    "configure_bootstrap",
    "configure_apf",
]

_XI_FLOOR = 1e-12  # numerical guard against zero-variance densities


@dataclass(frozen=True)
class GuideSpec:
    """Configuration of the simulation-based guide.

    B lookahead observations enter the guide; the power schedule is either
    ``"linear-fraction"`` (powers proportional to the elapsed fraction of the
    forecast window) or ``"all-ones"`` (untempered).  Forecast variability
    uses ``n_variability_sims`` random forecasts, refreshed per
    ``refresh_policy`` (``"every-s1"`` or ``"every-step"``).  For
    quantile-calibrated measurement families the inter-quartile distance is
    inflated by ``variance_inflation`` (default ``1 + 2/sqrt(n_sims)``).
    """

    B: int = 1
    power_schedule: str = "linear-fraction"
    n_variability_sims: int = 40
    refresh_policy: str = "every-s1"
    variance_inflation: Optional[float] = None

    def __post_init__(self):
        if self.B < 1:
            raise DomainError("lookahead B must be >= 1")
        if self.n_variability_sims < 2:
            raise DomainError("need at least 2 variability simulations")
        if self.power_schedule not in ("linear-fraction", "all-ones"):
            raise DomainError(f"unknown power schedule {self.power_schedule!r}")
        if self.refresh_policy not in ("every-s1", "every-step"):
            raise DomainError(f"unknown refresh policy {self.refresh_policy!r}")
        if self.variance_inflation is not None and self.variance_inflation < 1.0:
            raise DomainError("variance_inflation must be >= 1")

    @property
    def inflation(self) -> float:
        if self.variance_inflation is not None:
            return self.variance_inflation
        return 1.0 + 2.0 / math.sqrt(self.n_variability_sims)


@dataclass
class ForecastCache:
    """Per-particle forecast moments anchored at one grid time.

    ``mu[b-1]`` holds the skeleton forecasts of the latent state at horizon
    b and ``xi[b-1]`` the per-coordinate forecast variability on the
    observation scale.  Rows follow particle order; after resampling the
    cache must be gathered by the ancestor indices so children inherit their
    ancestor's entries.
    """

    anchor_time: float
    anchor_step: int
    horizon_obs: tuple            # 1-based observation indices
    horizon_times: np.ndarray     # (B_eff,)
    mu: np.ndarray                # (B_eff, J, dim_latent)
    xi: np.ndarray                # (B_eff, J, dim_obs)

    def gather(self, ancestors) -> "ForecastCache":
        return ForecastCache(self.anchor_time, self.anchor_step, self.horizon_obs,
                             self.horizon_times, self.mu[:, ancestors], self.xi[:, ancestors])


def lookahead_power(grid: TimeGrid, t_now: float, obs_index: int, B: int,
                    schedule: str = "linear-fraction") -> float:
    """Fractional power applied to the forecast factor for observation ``obs_index``.

    Under the linear-fraction schedule the complement of the power is
    proportional to the remaining forecast interval: the power is 0 when the
    full window [t_{max(obs_index-B,0)}, t_obs] remains and reaches 1 at the
    target time.
    """
    if schedule == "all-ones":
        return 1.0
    t_target = float(grid.obs_times[obs_index - 1])
    base = obs_index - B
    t_base = grid.t0 if base <= 0 else float(grid.obs_times[base - 1])
    eta = 1.0 - (t_target - t_now) / (t_target - t_base)
    return min(max(eta, 0.0), 1.0)


def _tile_view(params, reps: int):
    """Repeat per-particle parameter arrays for stacked forecast simulations."""
    out = {}
    for key, val in params.items():
        arr = np.asarray(val)
        out[key] = np.tile(arr, reps) if arr.ndim else val
    return out


def forecast_moments(model: PompModel, params, states, grid: TimeGrid, k: int,
                     B: int, spec: GuideSpec, rng) -> ForecastCache:
    """Skeleton forecasts and forecast variability anchored at grid step k.

    The skeleton forecast chains ``skeleton_step`` over the grid sub-steps to
    each of the next ``min(B, N - n)`` observation times.  Variability comes
    from ``spec.n_variability_sims`` random forecasts reduced per coordinate
    on the observation scale: the sample variance for variance-type families,
    or ``0.55 * (inflated inter-quartile distance)**2`` for quantile-type
    families.
    """
    n, s, t_now = grid.step_info(k)
    b_eff = min(B, grid.n_obs - n)
    horizon_obs = tuple(n + b for b in range(1, b_eff + 1))
    horizon_steps = [grid.obs_step(m) for m in horizon_obs]
    horizon_times = np.array([grid.obs_times[m - 1] for m in horizon_obs])
    J = states.shape[0]

    mu = np.empty((b_eff, J, model.dim_latent))
    x = states
    kk = k
    for i, h in enumerate(horizon_steps):
        while kk < h:
            x = model.skeleton_step(params, grid.times[kk], grid.times[kk + 1], x)
            kk += 1
        mu[i] = x

    n_sims = spec.n_variability_sims
    tiled = _tile_view(params, n_sims)
    sims = np.tile(states, (n_sims, 1))
    xi = np.empty((b_eff, J, model.dim_obs))
    kk = k
    for i, h in enumerate(horizon_steps):
        while kk < h:
            sims = model.transition_sample(tiled, grid.times[kk], grid.times[kk + 1],
                                           sims, rng.child(kk))
            kk += 1
        family = model.measurement_family(params, horizon_obs[i])
        obs_scale = family.mean(tiled, sims).reshape(n_sims, J, model.dim_obs)
        if family.variability == "quantile":
            q25, q75 = np.quantile(obs_scale, [0.25, 0.75], axis=0)
            xi[i] = 0.55 * ((q75 - q25) * spec.inflation) ** 2
        else:
            xi[i] = obs_scale.var(axis=0, ddof=1)
    return ForecastCache(t_now, k, horizon_obs, horizon_times, mu, xi)


def rescale_variability(cache: ForecastCache, t_now: float) -> np.ndarray:
    """Variability at t_now, linear in the remaining time to each horizon."""
    remaining = cache.horizon_times - t_now
    full = cache.horizon_times - cache.anchor_time
    factors = np.where(full > 0, remaining / np.where(full > 0, full, 1.0), 1.0)
    return cache.xi * factors[:, None, None]


def guide_value(model: PompModel, params, states, data, grid: TimeGrid, k: int,
                cache: ForecastCache, spec: GuideSpec):
    """Log guide values at grid step k for every particle.

    Returns ``(log_u, log_g)`` where ``log_g`` is the exact measurement log
    density when step k is an observation time (it enters the guide as the
    b = 1 factor with power one) and None otherwise.  Each remaining factor
    evaluates observation n+b under the measurement family centered at the
    skeleton forecast from the particle's current state with total
    variability = rescaled forecast variability + measurement variance at
    the forecast.

    Raises
    ------
    NonFiniteGuide
        If any factor evaluates to NaN.
    """
    n, s, t_now = grid.step_info(k)
    xi_now = rescale_variability(cache, t_now)
    J = states.shape[0]
    log_u = np.zeros(J)
    log_g = None
    x = states
    kk = k
    for i, m in enumerate(cache.horizon_obs):
        y = data[m - 1]
        if i == 0 and s == grid.S:
            log_g = model.measurement_logdensity(params, m, y, states)
            log_u = log_u + log_g
            continue
        h = grid.obs_step(m)
        while kk < h:
            x = model.skeleton_step(params, grid.times[kk], grid.times[kk + 1], x)
            kk += 1
        family = model.measurement_family(params, m)
        center = family.mean(params, x)
        sigma = xi_now[i] + _XI_FLOOR + family.meas_var(params, x)
        eta = lookahead_power(grid, t_now, m, spec.B, spec.power_schedule)
        log_u = log_u + eta * family.log_density(y, center, sigma).sum(axis=-1)
    if np.any(np.isnan(log_u)):
        raise NonFiniteGuide(f"guide produced NaN at grid step {k}")
    return log_u, log_g


# ---------------------------------------------------------------------------
# Guide strategy objects used by the filtering engine
# ---------------------------------------------------------------------------

class Guide:
    """Per-sub-step guide evaluation with an ancestry-tracked cache.

    ``evaluate`` returns ``(log_u, log_g, cache)``; ``log_g`` must be the
    exact measurement log density whenever the step lands on an observation
    time.  ``gather`` propagates cached per-particle values through
    resampling.  The engine pins the boundary conditions: the guide at t0 is
    identically one, and at the final time the guide must coincide with the
    measurement density of the last observation.
    """

    requires_single_step = False
    label = "guide"

    def start(self, model, params, states, rng):
        return None

    def evaluate(self, model, params, states, data, grid, k, cache, rng):
        raise NotImplementedError

    def gather(self, cache, ancestors):
        return cache


class SimulationGuide(Guide):
    """The general simulation-based guide driven by a :class:`GuideSpec`."""

    label = "simulation"

    def __init__(self, spec: GuideSpec):
        self.spec = spec

    def evaluate(self, model, params, states, data, grid, k, cache, rng):
        n, s, _ = grid.step_info(k)
        if cache is None or s == 1 or self.spec.refresh_policy == "every-step":
            cache = forecast_moments(model, params, states, grid, k, self.spec.B,
                                     self.spec, rng)
        log_u, log_g = guide_value(model, params, states, data, grid, k, cache, self.spec)
        return log_u, log_g, cache

    def gather(self, cache, ancestors):
        return cache.gather(ancestors) if cache is not None else None


class BootstrapGuide(Guide):
    """Degenerate guide equal to the current measurement density (S = 1)."""

    requires_single_step = True
    label = "bootstrap"

    def evaluate(self, model, params, states, data, grid, k, cache, rng):
        n, s, _ = grid.step_info(k)
        m = n + 1
        log_g = model.measurement_logdensity(params, m, data[m - 1], states)
        return log_g, log_g, None


class ApfGuide(Guide):
    """One-observation lookahead through a point forecast (S = 1).

    The guide multiplies the current measurement density by the next
    observation's density at a forecast of the next state; the final
    observation time falls back to the plain measurement density.  The
    forecast is the deterministic skeleton by default, or one random draw
    when ``stochastic`` is set.
    """

    requires_single_step = True
    label = "apf"

    def __init__(self, stochastic: bool = False):
        self.stochastic = stochastic

    def evaluate(self, model, params, states, data, grid, k, cache, rng):
        n, s, t_now = grid.step_info(k)
        m = n + 1
        log_g = model.measurement_logdensity(params, m, data[m - 1], states)
        if m == grid.n_obs:
            return log_g, log_g, None
        t_next = grid.obs_times[m]
        if self.stochastic:
            forecast = model.transition_sample(params, t_now, t_next, states, rng.child(0))
        else:
            forecast = model.skeleton_step(params, t_now, t_next, states)
        log_u = log_g + model.measurement_logdensity(params, m + 1, data[m], forecast)
        return log_u, log_g, None


class AnalyticForecastGuide(Guide):
    """Exact forecast-likelihood guide for models that can evaluate it.

    The model must expose ``forecast_loglik_<variant>(params, states, gap, y)``
    returning the log forecast likelihood of an observation ``gap`` time
    units ahead.  Used by the correlated Brownian motion model with variants
    ``"exact"`` (full covariance) and ``"diag"`` (diagonal approximation).
    """

    def __init__(self, variant: str = "exact", B: int = 2,
                 power_schedule: str = "all-ones"):
        if variant not in ("exact", "diag"):
            raise DomainError(f"unknown analytic guide variant {variant!r}")
        if power_schedule not in ("all-ones", "linear-fraction"):
            raise DomainError(f"unknown power schedule {power_schedule!r}")
        self.variant = variant
        self.B = int(B)
        self.power_schedule = power_schedule
        self.label = f"analytic-{variant}"

    def evaluate(self, model, params, states, data, grid, k, cache, rng):
        n, s, t_now = grid.step_info(k)
        fn = getattr(model, f"forecast_loglik_{self.variant}")
        b_eff = min(self.B, grid.n_obs - n)
        log_u = np.zeros(states.shape[0])
        log_g = None
        for b in range(1, b_eff + 1):
            m = n + b
            if b == 1 and s == grid.S:
                log_g = model.measurement_logdensity(params, m, data[m - 1], states)
                log_u = log_u + log_g
                continue
            gap = grid.obs_times[m - 1] - t_now
            eta = lookahead_power(grid, t_now, m, self.B, self.power_schedule)
            log_u = log_u + eta * fn(params, states, gap, data[m - 1])
        if np.any(np.isnan(log_u)):
            raise NonFiniteGuide(f"guide produced NaN at grid step {k}")
        return log_u, log_g, None


def configure_bootstrap(model: PompModel) -> BootstrapGuide:
    """Bootstrap-filter guide; the grid must use S = 1."""
    return BootstrapGuide()


def configure_apf(model: PompModel, stochastic: bool = False) -> ApfGuide:
    """Auxiliary-particle-filter guide; the grid must use S = 1."""
    return ApfGuide(stochastic=stochastic)
