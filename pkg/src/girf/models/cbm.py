"""Correlated Brownian motion with Gaussian measurements.

Each latent coordinate is a Brownian motion with unit variance per unit
time; increments across coordinates share a common correlation ``alpha``
(equicorrelation matrix A).  Observations add independent Gaussian noise to
every coordinate.  Because the transition is linear-Gaussian, the model also
exposes exact forecast-likelihood guides (full and diagonal covariance) and
the matrices needed by the Kalman oracle.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla
from scipy.stats import norm

from ..errors import CholeskyFailure, DomainError
from ..pomp import MeasurementFamily, ParamEntry, ParamVector, PompModel

__all__ = ["CorrelatedBrownianMotion"]


def _scalar(view, name):
    v = view[name]
    arr = np.asarray(v)
    if arr.ndim > 0:
        if np.all(arr == arr.flat[0]):
            return float(arr.flat[0])
        raise DomainError(f"cbm requires a single shared value for {name!r}")
    return float(v)


def _column(v):
    arr = np.asarray(v, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


class CorrelatedBrownianMotion(PompModel):
    """d-dimensional correlated Brownian motion observed with Gaussian noise."""

    name = "cbm"

    def __init__(self, d: int, alpha: float = 0.0):
        if d < 1:
            raise DomainError("cbm needs d >= 1")
        if not -1.0 / max(d - 1, 1) < alpha < 1.0:
            raise DomainError(f"equicorrelation alpha={alpha} is not positive definite at d={d}")
        self.d = int(d)
        self.dim_latent = self.d
        self.dim_obs = self.d
        self.alpha = float(alpha)
        A = np.full((d, d), self.alpha)
        np.fill_diagonal(A, 1.0)
        self.A = A
        try:
            self._chol_A = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise CholeskyFailure(f"increment correlation matrix not PD: {exc}") from exc
        # Cholesky factors of gap*A + obs_var*I, keyed by (gap, obs_var)
        self._cov_chol_cache = {}

    # -- parameters ---------------------------------------------------------

    def default_params(self) -> ParamVector:
        return ParamVector([
            ParamEntry("obs_sd", 1.0, "log", "regular"),
            ParamEntry("drift", 0.0, "identity", "regular"),
            ParamEntry("x0_offset", 0.0, "identity", "ivp"),
        ])

    # -- dynamics -----------------------------------------------------------

    def init_sample(self, params, J, rng):
        offset = np.asarray(params.get("x0_offset", 0.0), dtype=float)
        states = np.zeros((J, self.d))
        states += _column(offset) if offset.ndim else offset
        return states

    def transition_sample(self, params, t_from, t_to, states, rng):
        delta = t_to - t_from
        if delta < 0:
            raise DomainError("t_to must be >= t_from")
        if delta == 0:
            return states.copy()
        z = rng.generator().standard_normal(states.shape)
        increments = z @ self._chol_A.T * np.sqrt(delta)
        drift = np.asarray(params.get("drift", 0.0), dtype=float)
        drift_term = (_column(drift) if drift.ndim else drift) * delta
        return states + increments + drift_term

    def skeleton_step(self, params, t_from, t_to, states):
        drift = np.asarray(params.get("drift", 0.0), dtype=float)
        drift_term = (_column(drift) if drift.ndim else drift) * (t_to - t_from)
        return states + drift_term

    # -- measurement --------------------------------------------------------

    def measurement_logdensity(self, params, n, y, states):
        sd = np.asarray(params["obs_sd"], dtype=float)  # scalar or (J,)
        z = (y[None, :] - states) / (sd[:, None] if sd.ndim else sd)
        return -0.5 * np.sum(z * z, axis=1) \
            - self.d * (0.5 * np.log(2 * np.pi) + np.log(sd))

    def measurement_sample(self, params, n, states, rng):
        sd = np.asarray(params["obs_sd"], dtype=float)
        sd_col = _column(sd) if sd.ndim else sd
        return states + sd_col * rng.generator().standard_normal(states.shape)

    def measurement_family(self, params, n) -> MeasurementFamily:
        def mean(p, states):
            return states

        def meas_var(p, states):
            sd = np.asarray(p["obs_sd"], dtype=float)
            var = sd * sd
            return np.broadcast_to(_column(var) if var.ndim else var, states.shape)

        def log_density(y, mu, var):
            return norm.logpdf(y[None, :], loc=mu, scale=np.sqrt(var))

        return MeasurementFamily(mean, meas_var, log_density, "variance")

    def measurement_cov(self, params, n):
        sd = _scalar(params, "obs_sd")
        return np.full(self.d, sd * sd)

    # -- exact forecast likelihoods (guide support) ---------------------------

    def _chol_forecast_cov(self, gap: float, obs_var: float):
        key = (float(gap), float(obs_var))
        chol = self._cov_chol_cache.get(key)
        if chol is None:
            cov = gap * self.A + obs_var * np.eye(self.d)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise CholeskyFailure(f"forecast covariance not PD at gap={gap}") from exc
            self._cov_chol_cache[key] = chol
        return chol

    def forecast_loglik_exact(self, params, states, gap: float, y):
        """log N(y; x + drift*gap, gap*A + obs_var*I), vectorized over particles."""
        sd = _scalar(params, "obs_sd")
        drift = _scalar(params, "drift") if "drift" in params else 0.0
        chol = self._chol_forecast_cov(gap, sd * sd)
        resid = y[None, :] - states - drift * gap
        z = sla.solve_triangular(chol, resid.T, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * np.sum(z * z, axis=0) - 0.5 * logdet - 0.5 * self.d * np.log(2 * np.pi)

    def forecast_loglik_diag(self, params, states, gap: float, y):
        """Diagonal approximation: per-coordinate variance gap + obs_var."""
        sd = _scalar(params, "obs_sd")
        drift = _scalar(params, "drift") if "drift" in params else 0.0
        var = gap + sd * sd
        resid = y[None, :] - states - drift * gap
        return -0.5 * np.sum(resid * resid, axis=1) / var \
            - 0.5 * self.d * np.log(2 * np.pi * var)

    # -- oracle wiring --------------------------------------------------------

    def linear_gaussian_spec(self, params, t0, obs_times):
        from ..oracles import LinearGaussianSpec
        sd = _scalar(params, "obs_sd")
        drift = _scalar(params, "drift") if "drift" in params else 0.0
        offset = _scalar(params, "x0_offset") if "x0_offset" in params else 0.0
        return LinearGaussianSpec(
            t0=float(t0),
            obs_times=np.asarray(obs_times, dtype=float),
            transition_cov_rate=self.A,
            drift=np.full(self.d, drift),
            obs_cov=sd * sd * np.eye(self.d),
            init_mean=np.full(self.d, offset),
            init_cov=np.zeros((self.d, self.d)),
        )
