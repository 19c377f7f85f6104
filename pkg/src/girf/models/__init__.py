"""Built-in benchmark models and the name-based model registry."""

from __future__ import annotations

from ..errors import ConfigError
from .cbm import CorrelatedBrownianMotion
from .lorenz96 import StochasticLorenz96
from .measles import (
    BIWEEK,
    CityNetwork,
    MeaslesNetwork,
    discrete_normal_logpmf,
    load_cases,
    load_network,
    overdispersed_increment,
    synthetic_network,
    write_cases_csv,
    write_network_csv,
)

__all__ = [
    "CorrelatedBrownianMotion",
    "StochasticLorenz96",
    "MeaslesNetwork",
    "CityNetwork",
    "BIWEEK",
    "discrete_normal_logpmf",
    "overdispersed_increment",
    "synthetic_network",
    "load_network",
    "load_cases",
    "write_cases_csv",
    "write_network_csv",
    "register_model",
    "build_model",
]


def _build_cbm(config):
    return CorrelatedBrownianMotion(d=int(config["d"]), alpha=float(config.get("alpha", 0.0)))


def _build_lorenz(config):
    return StochasticLorenz96(
        d=int(config["d"]),
        euler_dt=float(config.get("euler_dt", 0.01)),
        skeleton_method=config.get("skeleton_method", "euler"),
    )


def _build_measles(config):
    if "coords_csv" in config:
        network = load_network(config["coords_csv"], config["births_csv"],
                               config.get("distances_csv"))
    else:
        network = synthetic_network(
            K=int(config.get("cities", 5)),
            seed=int(config.get("network_seed", 0)),
            start_year=int(config.get("start_year", 1950)),
            n_years=int(config.get("n_years", 6)),
        )
    t0 = float(config.get("t0", config.get("start_year", 1950)))
    return MeaslesNetwork(network, t0=t0,
                          obs_interval=float(config.get("obs_interval", BIWEEK)))


_REGISTRY = {
    "cbm": _build_cbm,
    "lorenz96": _build_lorenz,
    "measles": _build_measles,
}


def register_model(name: str, builder) -> None:
    """Register a model builder callable under a config name."""
    _REGISTRY[name] = builder


def build_model(config: dict):
    """Construct (model, params) from a model config block.

    ``config["params"]`` overrides default parameter values; names listed in
    ``config["fixed"]`` are pinned to fixed kind for estimation runs.
    """
    name = config.get("name")
    if name not in _REGISTRY:
        raise ConfigError(f"unknown model {name!r}", field_path="model.name")
    model = _REGISTRY[name](config)
    params = model.default_params()
    overrides = config.get("params", {})
    unknown = [k for k in overrides if k not in params]
    if unknown:
        raise ConfigError(f"unknown parameters for {name}: {unknown}", field_path="model.params")
    if overrides:
        params = params.replace(**overrides)
    for pname in config.get("fixed", []):
        params = params.with_kind(pname, "fixed")
    return model, params
