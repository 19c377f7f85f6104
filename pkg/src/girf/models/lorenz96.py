"""Stochastic Lorenz-96 dynamics with additive Gaussian process noise.

The drift of coordinate i is ``(x[i+1] - x[i-2]) * x[i-1] - x[i] + F`` with
cyclic indexing; independent Brownian motions of magnitude ``sigma_p`` drive
each coordinate.  Sample paths are approximated by Euler-Maruyama.  Every
coordinate is observed with independent Gaussian noise of sd ``sigma_m``.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import norm

from ..errors import DimensionTooSmall, DomainError, NonFiniteState
from ..pomp import MeasurementFamily, ParamEntry, ParamVector, PompModel

__all__ = ["StochasticLorenz96", "lorenz_drift"]

_BLOWUP = 1e6


def lorenz_drift(x: np.ndarray, F) -> np.ndarray:
    """Cyclic Lorenz-96 drift, vectorized over leading axes."""
    if x.shape[-1] < 4:
        raise DimensionTooSmall("Lorenz-96 needs d >= 4")
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + F


class StochasticLorenz96(PompModel):
    """Lorenz-96 SDE integrated by Euler-Maruyama on a snapped step."""

    name = "lorenz96"

    def __init__(self, d: int, euler_dt: float = 0.01, skeleton_method: str = "euler"):
        if d < 4:
            raise DimensionTooSmall("Lorenz-96 needs d >= 4")
        if euler_dt <= 0:
            raise DomainError("euler_dt must be positive")
        if skeleton_method not in ("euler", "rk4"):
            raise DomainError(f"unknown skeleton method {skeleton_method!r}")
        self.d = int(d)
        self.dim_latent = self.d
        self.dim_obs = self.d
        self.euler_dt = float(euler_dt)
        self.skeleton_method = skeleton_method

    def default_params(self) -> ParamVector:
        return ParamVector([
            ParamEntry("F", 8.0, "identity", "regular"),
            ParamEntry("sigma_p", 1.0, "log", "regular"),
            ParamEntry("sigma_m", 1.0, "log", "regular"),
        ])

    def _n_steps(self, delta: float) -> int:
        # Snap so every grid sub-interval is a whole number of Euler steps;
        # the effective step is delta / n_steps.
        return max(1, int(round(delta / self.euler_dt)))

    def effective_dt(self, delta: float) -> float:
        return delta / self._n_steps(delta)

    def init_sample(self, params, J, rng):
        states = np.zeros((J, self.d))
        states[:, -1] = 0.01
        return states

    def transition_sample(self, params, t_from, t_to, states, rng):
        delta = t_to - t_from
        if delta < 0:
            raise DomainError("t_to must be >= t_from")
        if delta == 0:
            return states.copy()
        F = np.asarray(params["F"], dtype=float)
        sigma_p = np.asarray(params["sigma_p"], dtype=float)
        Fb = F[:, None] if F.ndim else F
        sb = sigma_p[:, None] if sigma_p.ndim else sigma_p
        n = self._n_steps(delta)
        h = delta / n
        gen = rng.generator()
        x = states
        noise_scale = sb * np.sqrt(h)
        for _ in range(n):
            x = x + lorenz_drift(x, Fb) * h + noise_scale * gen.standard_normal(x.shape)
        if np.any(np.abs(x) > _BLOWUP):
            raise NonFiniteState("Lorenz-96 state exceeded 1e6; reduce the Euler step")
        return x

    def skeleton_step(self, params, t_from, t_to, states):
        delta = t_to - t_from
        if delta == 0:
            return states
        F = np.asarray(params["F"], dtype=float)
        Fb = F[:, None] if F.ndim else F
        n = self._n_steps(delta)
        h = delta / n
        x = states
        if self.skeleton_method == "euler":
            for _ in range(n):
                x = x + lorenz_drift(x, Fb) * h
        else:
            for _ in range(n):
                k1 = lorenz_drift(x, Fb)
                k2 = lorenz_drift(x + 0.5 * h * k1, Fb)
                k3 = lorenz_drift(x + 0.5 * h * k2, Fb)
                k4 = lorenz_drift(x + h * k3, Fb)
                x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    def measurement_logdensity(self, params, n, y, states):
        sd = np.asarray(params["sigma_m"], dtype=float)
        z = (y[None, :] - states) / (sd[:, None] if sd.ndim else sd)
        return -0.5 * np.sum(z * z, axis=1) \
            - self.d * (0.5 * np.log(2 * np.pi) + np.log(sd))

    def measurement_sample(self, params, n, states, rng):
        sd = np.asarray(params["sigma_m"], dtype=float)
        sdb = sd[:, None] if sd.ndim else sd
        return states + sdb * rng.generator().standard_normal(states.shape)

    def measurement_family(self, params, n) -> MeasurementFamily:
        def mean(p, states):
            return states

        def meas_var(p, states):
            sd = np.asarray(p["sigma_m"], dtype=float)
            var = sd * sd
            return np.broadcast_to(var[:, None] if var.ndim else var, states.shape)

        def log_density(y, mu, var):
            return norm.logpdf(y[None, :], loc=mu, scale=np.sqrt(var))

        return MeasurementFamily(mean, meas_var, log_density, "variance")

    def measurement_cov(self, params, n):
        sd = float(np.asarray(params["sigma_m"]).reshape(-1)[0])
        return np.full(self.d, sd * sd)
