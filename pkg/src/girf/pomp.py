"""Core contracts for partially observed Markov process (POMP) models.

A model supplies simulators for its initial distribution and transition
kernel plus an evaluator for its measurement density; the transition density
itself is never evaluated.  This module defines the model base class, the
refined time grid with intermediate sub-steps, named parameter vectors with
constraint-respecting transforms, and particle-swarm containers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, ModelError, NonMonotoneTimes, ZeroSteps
from .rng import RngStream

__all__ = [
    "TimeGrid",
    "build_time_grid",
    "ParamVector",
    "ParamEntry",
    "transform_to_estimation_scale",
    "inverse_transform_from_estimation_scale",
    "ParticleSwarm",
    "MeasurementFamily",
    "PompModel",
    "SimulationResult",
    "simulate_pomp",
]

TRANSFORMS = ("identity", "log", "logit")
KINDS = ("regular", "ivp", "fixed")


# ---------------------------------------------------------------------------
# Time grid
# ---------------------------------------------------------------------------

class TimeGrid:
    """Observation times refined by S equally spaced sub-steps per interval.

    The flattened grid stores ``N*S + 1`` times indexed by a flat step index
    ``k``; step ``k`` corresponds to interval ``n = (k-1)//S`` and sub-step
    ``s = (k-1)%S + 1`` for ``k >= 1``.  Interval endpoints are stored once
    and shared, so equality of grid times is always checked by index, never
    by floating comparison.
    """

    def __init__(self, t0: float, obs_times: Sequence[float], S: int):
        obs_times = np.asarray(obs_times, dtype=float)
        if S < 1:
            raise ZeroSteps(f"S must be >= 1, got {S}")
        if obs_times.size == 0:
            raise NonMonotoneTimes("need at least one observation time")
        if obs_times[0] <= t0 or np.any(np.diff(obs_times) <= 0):
            raise NonMonotoneTimes("observation times must be strictly increasing and > t0")
        self.t0 = float(t0)
        self.obs_times = obs_times
        self.S = int(S)
        self.n_obs = int(obs_times.size)

        times = np.empty(self.n_obs * self.S + 1)
        times[0] = self.t0
        endpoints = np.concatenate(([self.t0], obs_times))
        for n in range(self.n_obs):
            lo, hi = endpoints[n], endpoints[n + 1]
            for s in range(1, self.S):
                times[n * self.S + s] = lo + (s / self.S) * (hi - lo)
            times[(n + 1) * self.S] = hi  # shared endpoint, stored exactly
        self.times = times

        self.is_observation = np.zeros(times.size, dtype=bool)
        self.is_observation[self.S::self.S] = True
        self.observation_index = np.where(
            self.is_observation, np.arange(times.size) // self.S, 0
        )

    @property
    def n_steps(self) -> int:
        """Number of flat grid steps, ``N*S``."""
        return self.n_obs * self.S

    def step_info(self, k: int):
        """Interval index ``n``, sub-step ``s`` and time of flat step ``k >= 1``."""
        n, s = divmod(k - 1, self.S)
        return n, s + 1, self.times[k]

    def obs_step(self, n: int) -> int:
        """Flat index of observation ``n`` (1-based), i.e. ``n*S``."""
        return n * self.S


def build_time_grid(t0: float, obs_times: Sequence[float], S: int) -> TimeGrid:
    """Build the refined grid with S equal sub-steps per observation interval."""
    return TimeGrid(t0, obs_times, S)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamEntry:
    name: str
    value: float
    transform: str = "identity"
    kind: str = "regular"


def _check_domain(name, value, transform):
    if transform == "log" and not value > 0:
        raise DomainError(f"{name}: log transform needs value > 0, got {value}")
    if transform == "logit" and not 0 < value < 1:
        raise DomainError(f"{name}: logit transform needs value in (0,1), got {value}")


class ParamVector:
    """Ordered, named parameter values with transforms and kinds.

    Transforms (identity / log / logit) define the unconstrained estimation
    scale on which Gaussian perturbations are applied.  Kinds distinguish
    regular parameters, initial-value parameters (perturbed only at the start
    of a filtering pass), and fixed parameters (never perturbed).
    """

    def __init__(self, entries: Sequence[ParamEntry]):
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise DomainError("parameter names must be unique")
        for e in entries:
            if e.transform not in TRANSFORMS:
                raise DomainError(f"{e.name}: unknown transform {e.transform!r}")
            if e.kind not in KINDS:
                raise DomainError(f"{e.name}: unknown kind {e.kind!r}")
            _check_domain(e.name, e.value, e.transform)
        self.entries = tuple(entries)
        self._index = {e.name: i for i, e in enumerate(self.entries)}

    @classmethod
    def from_dict(cls, values, transforms=None, kinds=None) -> "ParamVector":
        transforms = transforms or {}
        kinds = kinds or {}
        return cls([
            ParamEntry(k, float(v), transforms.get(k, "identity"), kinds.get(k, "regular"))
            for k, v in values.items()
        ])

    @property
    def names(self):
        return [e.name for e in self.entries]

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name: str) -> float:
        return self.entries[self._index[name]].value

    def entry(self, name: str) -> ParamEntry:
        return self.entries[self._index[name]]

    def view(self) -> dict:
        """Name-to-value mapping handed to model callbacks."""
        return {e.name: e.value for e in self.entries}

    def replace(self, **updates) -> "ParamVector":
        """Copy with some values replaced (transform domains re-checked)."""
        new = []
        for e in self.entries:
            if e.name in updates:
                new.append(ParamEntry(e.name, float(updates.pop(e.name)), e.transform, e.kind))
            else:
                new.append(e)
        if updates:
            raise DomainError(f"unknown parameter names: {sorted(updates)}")
        return ParamVector(new)

    def with_kind(self, name: str, kind: str) -> "ParamVector":
        e = self.entry(name)
        return ParamVector([
            ParamEntry(x.name, x.value, x.transform, kind if x.name == name else x.kind)
            for x in self.entries
        ])

    def free_entries(self):
        return [e for e in self.entries if e.kind != "fixed"]

    def __repr__(self):
        vals = ", ".join(f"{e.name}={e.value:g}[{e.transform},{e.kind}]" for e in self.entries)
        return f"ParamVector({vals})"


def _forward(value, transform):
    if transform == "identity":
        return value
    if transform == "log":
        return np.log(value)
    return np.log(value / (1.0 - value))  # logit


def _inverse(z, transform):
    if transform == "identity":
        return z
    if transform == "log":
        return np.exp(z)
    return 1.0 / (1.0 + np.exp(-z))  # logistic


def transform_to_estimation_scale(params: ParamVector) -> np.ndarray:
    """Map free (non-fixed) parameter values to the unconstrained scale.

    Identity entries pass through, log entries map to ln(v), logit entries to
    ln(v/(1-v)).  Fixed entries are excluded; order follows the vector.
    """
    out = []
    for e in params.free_entries():
        _check_domain(e.name, e.value, e.transform)
        out.append(_forward(e.value, e.transform))
    return np.asarray(out, dtype=float)


def inverse_transform_from_estimation_scale(params: ParamVector, z: np.ndarray) -> ParamVector:
    """Inverse of :func:`transform_to_estimation_scale` onto a template vector."""
    free = params.free_entries()
    if len(free) != len(z):
        raise DomainError(f"expected {len(free)} values, got {len(z)}")
    updates = {e.name: _inverse(zv, e.transform) for e, zv in zip(free, z)}
    return params.replace(**updates)


# ---------------------------------------------------------------------------
# Particle swarm
# ---------------------------------------------------------------------------

@dataclass
class ParticleSwarm:
    """Particles at one grid time.

    Guide values are carried in log space (the engine's working scale); the
    positivity requirement on the natural-scale guide is checked as
    finiteness of the logs.
    """

    time: float
    states: np.ndarray           # (J, d)
    log_guide_values: np.ndarray  # (J,)
    log_weights: np.ndarray       # (J,)
    ancestors: np.ndarray         # (J,) indices into the previous swarm
    params: Optional["object"] = None  # ParamSwarm when filtering extended states

    @property
    def J(self) -> int:
        return self.states.shape[0]

    def validate(self):
        if not np.all(np.isfinite(self.log_guide_values)):
            raise ModelError("swarm carries non-finite log guide values")
        if self.ancestors.min() < 0 or self.ancestors.max() >= self.J:
            raise ModelError("ancestor indices out of range")


# ---------------------------------------------------------------------------
# Model contract
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementFamily:
    """Per-coordinate measurement descriptors used to build guide functions.

    ``mean(params, states)`` maps latent states to observation-scale centers,
    ``meas_var(params, states)`` gives the measurement variance at a state,
    and ``log_density(y, mu, var)`` evaluates the family density with an
    arbitrary total variability ``var`` (closed under adding forecast
    variance).  ``variability`` selects how random forecasts are reduced to a
    variance: ``"variance"`` (sample variance) or ``"quantile"``
    (inter-quartile calibration).
    """

    mean: Callable
    meas_var: Callable
    log_density: Callable
    variability: str = "variance"


class PompModel:
    """Base class for plug-and-play POMP models.

    All state-valued callbacks are vectorized over particles: states are
    ``(J, dim_latent)`` arrays and observations ``(dim_obs,)`` vectors.
    Parameter views are mappings from name to scalar or ``(J,)`` array
    (per-particle values arise during iterated filtering).  Callbacks are
    pure given their arguments and the supplied :class:`RngStream`.
    """

    name = "pomp"
    dim_latent = 0
    dim_obs = 0

    def default_params(self) -> ParamVector:
        raise NotImplementedError

    def init_sample(self, params, J: int, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def transition_sample(self, params, t_from, t_to, states, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def skeleton_step(self, params, t_from, t_to, states) -> np.ndarray:
        """Deterministic forecast over [t_from, t_to] (noise-free dynamics)."""
        raise NotImplementedError

    def measurement_logdensity(self, params, n: int, y, states) -> np.ndarray:
        """Log density of observation ``n`` (1-based) at each particle."""
        raise NotImplementedError

    def measurement_sample(self, params, n: int, states, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def measurement_family(self, params, n: int) -> MeasurementFamily:
        raise NotImplementedError

    def measurement_cov(self, params, n: int) -> np.ndarray:
        """Diagonal measurement covariance, for ensemble Kalman filtering."""
        raise ModelError(f"model {self.name} does not expose a measurement covariance")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

_SIM_PROPAGATE = 1
_SIM_MEASURE = 5


@dataclass
class SimulationResult:
    grid: TimeGrid
    latent_path: np.ndarray   # (N*S + 1, dim_latent)
    observations: np.ndarray  # (N, dim_obs)


def simulate_pomp(model: PompModel, params: ParamVector, grid: TimeGrid,
                  rng: RngStream) -> SimulationResult:
    """Simulate one latent path on the full grid and draw the observations.

    The path chains ``transition_sample`` over consecutive grid sub-steps;
    observations are drawn from the measurement model at each observation
    time.  Identical (root seed, path) reproduce the output bit for bit.
    """
    view = params.view() if isinstance(params, ParamVector) else params
    x = model.init_sample(view, 1, rng.child(0, _SIM_PROPAGATE))
    path = np.empty((grid.n_steps + 1, model.dim_latent))
    path[0] = x[0]
    obs = np.empty((grid.n_obs, model.dim_obs))
    for k in range(1, grid.n_steps + 1):
        x = model.transition_sample(view, grid.times[k - 1], grid.times[k], x,
                                    rng.child(k, _SIM_PROPAGATE))
        path[k] = x[0]
        if grid.is_observation[k]:
            n = int(grid.observation_index[k])
            y = model.measurement_sample(view, n, x, rng.child(k, _SIM_MEASURE))
            obs[n - 1] = y[0]
    return SimulationResult(grid, path, obs)
