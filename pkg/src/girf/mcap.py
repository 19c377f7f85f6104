"""Monte Carlo adjusted profile (MCAP) confidence intervals.

Profile log likelihoods estimated by Monte Carlo carry estimation error, so
the usual chi-square likelihood-ratio cutoff understates the uncertainty in
the profile maximizer.  The adjusted cutoff inflates the half chi-square
quantile by the ratio of total to statistical variance of the maximizer:
``delta = (a * SE_mc^2 + 1/2) * chi_alpha``, where ``a`` is the curvature of
a local quadratic fit near the maximum and SE_mc the delta-method standard
error of its vertex.  With exact likelihoods (SE_mc = 0) the cutoff reduces
to the classical 1.92 at the 95% level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import chi2

from .errors import DegenerateFit, NegativeCurvature

__all__ = ["ProfilePoints", "SmoothedProfile", "local_smooth",
           "quadratic_fit_with_covariance", "McapInterval", "mcap_interval"]


@dataclass
class ProfilePoints:
    """Monte Carlo profile likelihood evaluations, replicates allowed."""

    phi: np.ndarray
    loglik: np.ndarray
    replicate_id: Optional[np.ndarray] = None

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        self.loglik = np.asarray(self.loglik, dtype=float)
        if self.phi.size != self.loglik.size:
            raise DegenerateFit("phi and loglik lengths differ")
        if self.phi.size < 4:
            raise DegenerateFit("need at least 4 profile points")

    @property
    def K(self) -> int:
        return self.phi.size

    def masked(self, mask) -> "ProfilePoints":
        """Keep only points where mask is True (user-driven outlier exclusion)."""
        mask = np.asarray(mask, dtype=bool)
        rep = self.replicate_id[mask] if self.replicate_id is not None else None
        return ProfilePoints(self.phi[mask], self.loglik[mask], rep)


def _tricube_weights(phi, phi0, span):
    """Tricube weights over the span-nearest neighborhood of phi0."""
    dist = np.abs(phi - phi0)
    K = phi.size
    k = max(int(span * K), 4)
    cutoff = np.sort(dist)[min(k, K) - 1]
    if cutoff == 0:
        cutoff = np.max(dist) if np.max(dist) > 0 else 1.0
    w = np.zeros(K)
    inside = dist <= cutoff
    w[inside] = (1.0 - (dist[inside] / cutoff) ** 3) ** 3
    return w


@dataclass
class SmoothedProfile:
    """Local quadratic (tricube-weighted) smooth of the profile points."""

    points: ProfilePoints
    span: float
    maximizer: float
    weights_at_max: np.ndarray

    def __call__(self, phi):
        scalar = np.isscalar(phi)
        q = np.atleast_1d(np.asarray(phi, dtype=float))
        out = np.array([self._fit_at(p) for p in q])
        return float(out[0]) if scalar else out

    def _fit_at(self, phi0):
        w = _tricube_weights(self.points.phi, phi0, self.span)
        beta = _solve_wls(self.points.phi, self.points.loglik, w)
        return beta[0] + beta[1] * phi0 + beta[2] * phi0 * phi0


def _solve_wls(phi, y, w):
    active = w > 0
    if np.unique(phi[active]).size < 3:
        raise DegenerateFit("fewer than 3 distinct support points in the local fit")
    X = np.column_stack([np.ones_like(phi), phi, phi * phi])[active]
    Wh = np.sqrt(w[active])[:, None]
    beta, *_ = np.linalg.lstsq(X * Wh, y[active] * Wh[:, 0], rcond=None)
    return beta


def local_smooth(points: ProfilePoints, span: float = 0.75,
                 n_grid: int = 1000) -> SmoothedProfile:
    """Tricube-weighted local quadratic smooth (loess-like, degree 2).

    Returns the curve evaluator together with the maximizer over a dense
    grid spanning the points (leftmost maximizer on ties) and the smoothing
    weights used at the maximizer, which feed the quadratic error fit.
    """
    if not 0 < span <= 1:
        raise DegenerateFit("span must lie in (0, 1]")
    profile = SmoothedProfile(points, span, maximizer=np.nan,
                              weights_at_max=np.empty(0))
    grid = np.linspace(points.phi.min(), points.phi.max(), n_grid)
    values = profile(grid)
    best = int(np.argmax(values))
    profile.maximizer = float(grid[best])
    profile.weights_at_max = _tricube_weights(points.phi, profile.maximizer, span)
    return profile


def quadratic_fit_with_covariance(points: ProfilePoints, weights):
    """Weighted quadratic fit ``-a phi^2 + b phi + c`` with coefficient errors.

    The coefficient covariance is the usual weighted-least-squares form
    ``sigma2 * (X'WX)^-1`` with the residual variance divided by the
    effective degrees of freedom ``(sum w)^2 / sum(w^2) - 3`` (exactly zero
    residuals give exactly zero covariance).
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise DegenerateFit("weights must be nonnegative")
    active = w > 0
    if np.unique(points.phi[active]).size < 3:
        raise DegenerateFit("need at least 3 effectively weighted support points")
    phi, y = points.phi, points.loglik
    X = np.column_stack([np.ones_like(phi), phi, phi * phi])
    XtW = (X * w[:, None]).T
    G = XtW @ X
    try:
        Ginv = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit(f"singular design in quadratic fit: {exc}") from exc
    beta = Ginv @ (XtW @ y)
    resid = y - X @ beta
    rss = float(np.sum(w * resid * resid))
    n_eff = float(np.sum(w)) ** 2 / float(np.sum(w * w))
    dof = n_eff - 3.0
    if rss <= 1e-10 * max(1.0, float(np.sum(w * y * y))):
        sigma2 = 0.0
    elif dof <= 0:
        raise DegenerateFit("not enough effective points to estimate residual variance")
    else:
        sigma2 = rss / dof
    cov = sigma2 * Ginv
    a, b, c = -beta[2], beta[1], beta[0]
    return a, b, c, cov[2, 2], cov[1, 1], -cov[2, 1]


@dataclass
class McapInterval:
    phi_hat: float
    se_mc: float
    se_stat: float
    se_total: float
    delta: float
    lo: float
    hi: float
    smoothed: SmoothedProfile


def _bisect_crossing(f, target, a, b, tol=1e-10):
    """Root of f(x) - target between a and b, assuming one sign change."""
    fa = f(a) - target
    for _ in range(200):
        if abs(b - a) < tol:
            break
        mid = 0.5 * (a + b)
        fm = f(mid) - target
        if (fm > 0) == (fa > 0):
            a, fa = mid, fm
        else:
            b = mid
    return 0.5 * (a + b)


def mcap_interval(points: ProfilePoints, alpha: float = 0.05, span: float = 0.75,
                  transform: Optional[Callable] = None,
                  inverse_transform: Optional[Callable] = None,
                  mask=None, n_grid: int = 1000) -> McapInterval:
    """Monte Carlo adjusted profile confidence interval.

    Fits the smooth profile, measures the Monte Carlo error of its maximizer
    through a local quadratic fit, and cuts the smoothed curve at
    ``delta = (a * SE_mc^2 + 1/2) * chi_alpha`` below its maximum; interval
    endpoints come from bisection on the smoothed curve.  An optional
    monotone ``transform`` (with ``inverse_transform``) profiles on a
    transformed parameter scale and maps the endpoints back.  ``mask``
    excludes outlying points from all fitting (never applied automatically).

    Raises
    ------
    NegativeCurvature
        If the fitted quadratic opens upward (profile not locally concave).
    """
    if not 0 < alpha < 1:
        raise DegenerateFit("alpha must lie in (0, 1)")
    if mask is not None:
        points = points.masked(mask)
    if transform is not None:
        points = ProfilePoints(np.asarray([transform(p) for p in points.phi]),
                               points.loglik, points.replicate_id)
    smoothed = local_smooth(points, span, n_grid=n_grid)
    a, b, c, var_a, var_b, cov_ab = quadratic_fit_with_covariance(
        points, smoothed.weights_at_max)
    if a <= 0:
        raise NegativeCurvature(f"profile curvature a = {a:g} is not positive")
    se_mc_sq = (var_b - (2 * b / a) * cov_ab + (b * b) / (a * a) * var_a) / (4 * a * a)
    se_mc_sq = max(se_mc_sq, 0.0)
    se_stat = 1.0 / np.sqrt(2.0 * a)
    se_total = float(np.sqrt(se_stat ** 2 + se_mc_sq))
    chi = chi2.ppf(1.0 - alpha, df=1)
    delta = float((a * se_mc_sq + 0.5) * chi)

    phi_hat = smoothed.maximizer
    top = smoothed(phi_hat)
    target = top - delta
    grid = np.linspace(points.phi.min(), points.phi.max(), n_grid)
    values = smoothed(grid)
    above = values >= target
    if not np.any(above):
        raise DegenerateFit("cutoff level lies above the whole smoothed curve")
    first, last = int(np.argmax(above)), int(len(above) - 1 - np.argmax(above[::-1]))
    lo = grid[0] if first == 0 else _bisect_crossing(smoothed, target,
                                                     grid[first - 1], grid[first])
    hi = grid[-1] if last == len(grid) - 1 else _bisect_crossing(smoothed, target,
                                                                 grid[last + 1], grid[last])
    if inverse_transform is not None:
        lo, hi = sorted((float(inverse_transform(lo)), float(inverse_transform(hi))))
        phi_hat = float(inverse_transform(phi_hat))
    return McapInterval(float(phi_hat), float(np.sqrt(se_mc_sq)), float(se_stat),
                        se_total, delta, float(lo), float(hi), smoothed)
