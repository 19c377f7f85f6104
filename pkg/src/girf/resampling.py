"""Weight normalization, effective sample size, and resampling schemes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllWeightsDegenerate
from .rng import RngStream

__all__ = ["ResampleScheme", "normalize_log_weights", "ess", "resample_ancestors"]


@dataclass(frozen=True)
class ResampleScheme:
    """Resampling scheme selector: ``systematic`` or ``multinomial``."""

    kind: str = "systematic"

    def __post_init__(self):
        if self.kind not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling scheme {self.kind!r}")


def normalize_log_weights(log_weights: np.ndarray):
    """Normalize log weights into probabilities, stably.

    Returns ``(probabilities, log_mean_weight)`` where
    ``log_mean_weight = logsumexp(logw) - ln J``.  Adding a constant to all
    log weights shifts ``log_mean_weight`` by exactly that constant and
    leaves the probabilities unchanged.

    Raises
    ------
    AllWeightsDegenerate
        If every log weight is -inf.
    """
    logw = np.asarray(log_weights, dtype=float)
    m = np.max(logw)
    if not np.isfinite(m):
        raise AllWeightsDegenerate("all particle weights are zero")
    shifted = np.exp(logw - m)
    total = shifted.sum()
    probabilities = shifted / total
    log_mean_weight = m + np.log(total) - np.log(logw.size)
    return probabilities, log_mean_weight


def ess(probabilities: np.ndarray) -> float:
    """Effective sample size ``1 / sum(p_j^2)`` of a probability vector."""
    p = np.asarray(probabilities, dtype=float)
    return 1.0 / np.dot(p, p)


def resample_ancestors(probabilities: np.ndarray, scheme: ResampleScheme,
                       rng: RngStream) -> np.ndarray:
    """Draw J ancestor indices under the given scheme.

    Multinomial draws indices i.i.d. from the probability vector.  Systematic
    draws one uniform U and assigns index j the stratum containing
    ``(j + U)/J`` in the cumulative probabilities, which pins every count
    N_i between floor(J p_i) and ceil(J p_i).
    """
    p = np.asarray(probabilities, dtype=float)
    J = p.size
    cumulative = np.cumsum(p)
    cumulative[-1] = 1.0  # guard against float shortfall in the last stratum
    gen = rng.generator()
    if scheme.kind == "systematic":
        u = gen.random()
        positions = (np.arange(J) + u) / J
    else:
        positions = gen.random(J)
    ancestors = np.searchsorted(cumulative, positions, side="right")
    return np.minimum(ancestors, J - 1).astype(np.int64)
