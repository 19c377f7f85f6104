"""Guided intermediate resampling filters for high-dimensional POMP models.

The toolkit filters partially observed Markov processes by resampling at
intermediate times between observations, steered by guide functions that
approximate forecast likelihoods.  It bundles the filtering engine with
island parallelism, iterated filtering for likelihood maximization, Monte
Carlo adjusted profile confidence intervals, exact Kalman oracles, an
ensemble Kalman filter baseline, and three benchmark model families.
"""

from .engine import (
    FilterOutput,
    GirfConfig,
    configure_apf,
    configure_bootstrap,
    girf_filter,
    girf_weight,
    run_islands,
)
from .errors import GirfError
from .guides import (
    AnalyticForecastGuide,
    ApfGuide,
    BootstrapGuide,
    ForecastCache,
    GuideSpec,
    SimulationGuide,
    forecast_moments,
    guide_value,
    lookahead_power,
    rescale_variability,
)
from .igirf import (
    IgirfConfig,
    IgirfResult,
    ParamSwarm,
    alternating_igirf,
    estimate_ivps,
    igirf_run,
    perturb_params,
)
from .mcap import ProfilePoints, local_smooth, mcap_interval, quadratic_fit_with_covariance
from .oracles import LinearGaussianSpec, enkf_filter, kalman_filter, kalman_guided_oracle
from .pomp import (
    MeasurementFamily,
    ParamEntry,
    ParamVector,
    ParticleSwarm,
    PompModel,
    TimeGrid,
    build_time_grid,
    inverse_transform_from_estimation_scale,
    simulate_pomp,
    transform_to_estimation_scale,
)
from .resampling import ResampleScheme, ess, normalize_log_weights, resample_ancestors
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "FilterOutput", "GirfConfig", "configure_apf", "configure_bootstrap",
    "girf_filter", "girf_weight", "run_islands", "GirfError",
    "AnalyticForecastGuide", "ApfGuide", "BootstrapGuide", "ForecastCache",
    "GuideSpec", "SimulationGuide", "forecast_moments", "guide_value",
    "lookahead_power", "rescale_variability",
    "IgirfConfig", "IgirfResult", "ParamSwarm", "alternating_igirf",
    "estimate_ivps", "igirf_run", "perturb_params",
    "ProfilePoints", "local_smooth", "mcap_interval", "quadratic_fit_with_covariance",
    "LinearGaussianSpec", "enkf_filter", "kalman_filter", "kalman_guided_oracle",
    "MeasurementFamily", "ParamEntry", "ParamVector", "ParticleSwarm", "PompModel",
    "TimeGrid", "build_time_grid", "inverse_transform_from_estimation_scale",
    "simulate_pomp", "transform_to_estimation_scale",
    "ResampleScheme", "ess", "normalize_log_weights", "resample_ancestors",
    "RngStream", "__version__",
]
