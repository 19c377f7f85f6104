"""Reference filters: exact Kalman recursions and an ensemble Kalman filter.

The Kalman filter provides exact likelihoods and filter moments for
linear-Gaussian specifications (random walk with drift observed through
additive Gaussian noise).  A Kalman smoother over an augmented grid yields
the exact guided filter distribution at intermediate times, used to validate
the particle engine.  The stochastic (perturbed-observation) ensemble Kalman
filter serves as a baseline on nonlinear models.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .errors import SingularCovariance, SingularInnovation
from .pomp import PompModel, TimeGrid
from .rng import RngStream

__all__ = [
    "LinearGaussianSpec",
    "KalmanResult",
    "kalman_filter",
    "kalman_guided_oracle",
    "EnkfResult",
    "enkf_filter",
]


@dataclass(frozen=True)
class LinearGaussianSpec:
    """Random-walk-with-drift state space observed through the identity.

    Transition over a gap dt: mean shifts by drift*dt, covariance grows by
    dt * transition_cov_rate.  Observation noise has covariance obs_cov.
    """

    t0: float
    obs_times: np.ndarray
    transition_cov_rate: np.ndarray  # (d, d)
    drift: np.ndarray                # (d,)
    obs_cov: np.ndarray              # (d, d)
    init_mean: np.ndarray            # (d,)
    init_cov: np.ndarray             # (d, d)

    @property
    def d(self) -> int:
        return self.init_mean.size


@dataclass
class KalmanResult:
    loglik: float
    cond_loglik: np.ndarray     # (N,)
    filter_means: np.ndarray    # (N, d)
    filter_covs: np.ndarray     # (N, d, d)


def _mvn_logpdf(resid, cov):
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation(f"innovation covariance not PD: {exc}") from exc
    z = sla.solve_triangular(chol, resid, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (z @ z + logdet + resid.size * np.log(2 * np.pi))


def _symmetrize(P):
    P = 0.5 * (P + P.T)
    if np.min(np.linalg.eigvalsh(P)) < -1e-10:
        raise SingularInnovation("filter covariance lost positive semidefiniteness")
    return P


def kalman_filter(spec: LinearGaussianSpec, data) -> KalmanResult:
    """Exact predict/update recursion; loglik sums the predictive densities."""
    data = np.asarray(data, dtype=float)
    d = spec.d
    m = spec.init_mean.astype(float).copy()
    P = spec.init_cov.astype(float).copy()
    times = np.concatenate(([spec.t0], spec.obs_times))
    N = spec.obs_times.size
    cond = np.empty(N)
    means = np.empty((N, d))
    covs = np.empty((N, d, d))
    for n in range(N):
        dt = times[n + 1] - times[n]
        m = m + spec.drift * dt
        P = P + dt * spec.transition_cov_rate
        S = P + spec.obs_cov
        resid = data[n] - m
        cond[n] = _mvn_logpdf(resid, S)
        K = np.linalg.solve(S.T, P.T).T  # P S^{-1}
        m = m + K @ resid
        P = _symmetrize((np.eye(d) - K) @ P)
        means[n] = m
        covs[n] = P
    return KalmanResult(float(np.sum(cond)), cond, means, covs)


def kalman_guided_oracle(spec: LinearGaussianSpec, data, t: float, B: int,
                         tol: float = 1e-12):
    """Exact guided filter distribution at an intermediate time.

    With a guide equal to the exact forecast likelihood of the next
    min(B, remaining) observations, the guided filter distribution at time t
    is the conditional law of X_t given all observations up to t plus those
    B future ones.  Computed by Kalman smoothing over the augmented timeline
    with t inserted as a no-observation step.  Returns ``(mean, cov)``.
    """
    data = np.asarray(data, dtype=float)
    obs_times = np.asarray(spec.obs_times, dtype=float)
    if t < spec.t0 - tol:
        raise ValueError("t precedes the initial time")
    # timeline entries: (time, obs_index or None); t inserted if not an obs time
    past = [i for i, ot in enumerate(obs_times) if ot <= t + tol]
    future = [i for i, ot in enumerate(obs_times) if ot > t + tol][:B]
    timeline = [(obs_times[i], i) for i in past]
    t_is_obs = bool(past) and abs(obs_times[past[-1]] - t) <= tol
    if not t_is_obs:
        timeline.append((t, None))
    target_index = len(timeline) - 1
    timeline.extend((obs_times[i], i) for i in future)

    d = spec.d
    m = spec.init_mean.astype(float).copy()
    P = spec.init_cov.astype(float).copy()
    prev_t = spec.t0
    pred_means, pred_covs, filt_means, filt_covs = [], [], [], []
    for time, obs_i in timeline:
        dt = time - prev_t
        m_pred = m + spec.drift * dt
        P_pred = P + dt * spec.transition_cov_rate
        pred_means.append(m_pred)
        pred_covs.append(P_pred)
        if obs_i is not None:
            S = P_pred + spec.obs_cov
            resid = data[obs_i] - m_pred
            _mvn_logpdf(resid, S)  # raises SingularInnovation when degenerate
            K = np.linalg.solve(S.T, P_pred.T).T
            m = m_pred + K @ resid
            P = _symmetrize((np.eye(d) - K) @ P_pred)
        else:
            m, P = m_pred, P_pred
        filt_means.append(m)
        filt_covs.append(P)
        prev_t = time

    # Rauch-Tung-Striebel pass back to the target time (transition matrix = I)
    ms = filt_means[-1].copy()
    Ps = filt_covs[-1].copy()
    for i in range(len(timeline) - 2, target_index - 1, -1):
        P_pred = pred_covs[i + 1]
        G = np.linalg.solve(P_pred.T, filt_covs[i].T).T  # P_f P_pred^{-1}
        ms = filt_means[i] + G @ (ms - pred_means[i + 1])
        Ps = _symmetrize(filt_covs[i] + G @ (Ps - P_pred) @ G.T)
    return ms, Ps


# ---------------------------------------------------------------------------
# Ensemble Kalman filter
# ---------------------------------------------------------------------------

_INIT = 0
_PROPAGATE = 1
_PERTURB_OBS = 5


@dataclass
class EnkfResult:
    loglik: float
    cond_loglik: np.ndarray    # (N,)
    filter_means: np.ndarray   # (N, d)
    metadata: dict


def enkf_filter(model: PompModel, params, data, grid: TimeGrid, J: int,
                rng: RngStream) -> EnkfResult:
    """Stochastic (perturbed-observation) EnKF with identity observation map.

    The forecast ensemble propagates through the model's transition
    simulator over each observation interval; the update uses the sample
    covariance (1/(J-1)) Kalman gain with perturbed observations.  The log
    likelihood accumulates Gaussian predictive densities with the ensemble
    mean and covariance plus the observation covariance.  The sample
    covariance is regularized by 1e-8 times its mean diagonal.
    """
    data = np.asarray(data, dtype=float)
    d = model.dim_latent
    if J < d + 1:
        warnings.warn(f"EnKF ensemble size {J} < d+1 = {d + 1}; covariance is rank deficient")
    view = params.view() if hasattr(params, "view") else dict(params)
    x = model.init_sample(view, J, rng.child(0, _INIT))
    N = grid.n_obs
    cond = np.empty(N)
    means = np.empty((N, d))
    times = np.concatenate(([grid.t0], grid.obs_times))
    eye = np.eye(d)
    for n in range(1, N + 1):
        x = model.transition_sample(view, times[n - 1], times[n], x,
                                    rng.child(n, _PROPAGATE))
        mean_f = x.mean(axis=0)
        dev = x - mean_f
        C = dev.T @ dev / (J - 1)
        C += (1e-8 * np.trace(C) / d) * eye
        R = np.diag(model.measurement_cov(view, n))
        S = C + R
        y = data[n - 1]
        cond[n - 1] = _mvn_logpdf(y - mean_f, S)
        try:
            K = np.linalg.solve(S.T, C.T).T  # C S^{-1}
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance(f"EnKF update failed at n={n}: {exc}") from exc
        noise = rng.child(n, _PERTURB_OBS).generator().standard_normal((J, d))
        perturbed = y + noise * np.sqrt(np.diag(R))
        x = x + (perturbed - x) @ K.T
        means[n - 1] = x.mean(axis=0)
    return EnkfResult(float(np.sum(cond)), cond, means,
                      {"J": J, "covariance_divisor": "J-1", "variant": "stochastic"})
