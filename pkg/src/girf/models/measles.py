"""Gravity-coupled SEIR measles dynamics across a network of cities.

Each city k holds compartments S (susceptible), E (exposed), I (infectious)
plus the running count C of I-to-R transitions since the start of the
current reporting biweek; R is implicit.  Transition counts over short
intervals are gamma-mixed Poisson draws (overdispersed relative to Poisson
with white-noise intensity sigma2).  Transmission is seasonal through a
school-term calendar and coupled across cities by a gravity flux.  Reported
biweekly cases follow a discrete normal centered at rho_k * C_k.

Time is measured in years; observations are biweekly (14/365.25 years).
One stochastic Euler increment is taken per transition call, so the filter
grid's sub-step length sets the simulation resolution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict

import numpy as np
from scipy.stats import norm

from ..errors import DomainError, MissingBirthData, ModelError, ZeroDistance
from ..pomp import MeasurementFamily, ParamEntry, ParamVector, PompModel

__all__ = [
    "CityNetwork",
    "MeaslesNetwork",
    "BIWEEK",
    "SCHOOL_TERM_FRACTION",
    "overdispersed_increment",
    "discrete_normal_logpmf",
    "synthetic_network",
    "load_network",
    "load_cases",
    "write_cases_csv",
    "write_network_csv",
]

BIWEEK = 14.0 / 365.25
SCHOOL_TERM_FRACTION = 0.739  # proportion of the year taken up by school term
COHORT_ENTRY_DAY = 251        # school admission day; cohort fraction enters here
# Holiday spans in calendar days (inclusive): Christmas, Easter, summer, autumn.
HOLIDAYS = ((356, 365), (0, 6), (100, 115), (199, 252), (300, 308))

EARTH_RADIUS_KM = 6371.0


# ---------------------------------------------------------------------------
# Network data
# ---------------------------------------------------------------------------

@dataclass
class CityNetwork:
    """Static per-city data: names, populations, pairwise distances, births."""

    names: list
    populations: np.ndarray          # (K,)
    distances: np.ndarray            # (K, K), zero diagonal
    births: Dict[int, np.ndarray]    # calendar year -> (K,) births

    @property
    def K(self) -> int:
        return len(self.names)

    def births_for(self, year: int) -> np.ndarray:
        try:
            return self.births[int(year)]
        except KeyError:
            raise MissingBirthData(f"no birth data for year {year}") from None


def _haversine_km(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


# ---------------------------------------------------------------------------
# Stochastic increments
# ---------------------------------------------------------------------------

def _od_increment(gen, rate, delta, sigma2):
    """Gamma-mixed Poisson transition counts over a step of length delta.

    With white-noise intensity sigma2 the count is Poisson with a
    Gamma(delta/sigma2, sigma2)-distributed mean multiplier, giving mean
    delta*rate and variance delta*rate*(1 + sigma2*rate); sigma2 = 0
    degenerates to plain Poisson counts.
    """
    rate = np.maximum(np.asarray(rate, dtype=float), 0.0)
    s2 = np.asarray(sigma2, dtype=float)
    if np.all(s2 < 1e-12):
        return gen.poisson(delta * rate).astype(float)
    s2b = np.broadcast_to(s2[:, None] if s2.ndim else s2, rate.shape)
    out = np.empty(rate.shape)
    od = s2b >= 1e-12
    if np.any(~od):
        out[~od] = gen.poisson(delta * rate[~od])
    mult = gen.gamma(delta / s2b[od], s2b[od])
    out[od] = gen.poisson(mult * rate[od])
    return out


def overdispersed_increment(rate, delta, sigma2, rng):
    """Public wrapper around the gamma-mixed Poisson increment draw."""
    if delta <= 0:
        raise DomainError("delta must be positive")
    if np.any(np.asarray(rate) < 0) or sigma2 < 0:
        raise DomainError("rate and sigma2 must be nonnegative")
    return _od_increment(rng.generator(), np.asarray(rate, dtype=float), delta, sigma2)


# ---------------------------------------------------------------------------
# Discrete normal measurement
# ---------------------------------------------------------------------------

_LOG_FLOOR = -745.0


def discrete_normal_logpmf(y, mean, var):
    """log of Phi(y+0.5; mean, var) - Phi(y-0.5; mean, var), floored at -745.

    The distribution is supported on {0, 1, ...}; mass below -0.5 is
    truncated away, so the pmf is sub-normalized.  Evaluated through the
    upper tail when y sits above the mean to avoid cancellation.
    """
    sd = np.sqrt(var)
    hi = (y + 0.5 - mean) / sd
    lo = (y - 0.5 - mean) / sd
    upper = lo > 0
    mass = np.where(
        upper,
        norm.sf(np.where(upper, lo, 0.0)) - norm.sf(np.where(upper, hi, 1.0)),
        norm.cdf(np.where(upper, 1.0, hi)) - norm.cdf(np.where(upper, 0.0, lo)),
    )
    with np.errstate(divide="ignore"):
        out = np.log(mass)
    return np.maximum(np.where(np.isfinite(out), out, _LOG_FLOOR), _LOG_FLOOR)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def _col(v):
    arr = np.asarray(v, dtype=float)
    return arr[:, None] if arr.ndim else arr


class MeaslesNetwork(PompModel):
    """SEIR measles transmission on a gravity-coupled city network."""

    name = "measles"

    def __init__(self, network: CityNetwork, t0: float, obs_interval: float = BIWEEK):
        K = network.K
        if K < 1:
            raise DomainError("need at least one city")
        off = ~np.eye(K, dtype=bool)
        if K > 1 and np.any(network.distances[off] <= 0):
            raise ZeroDistance("all pairwise distances must be positive")
        self.network = network
        self.K = K
        self.dim_latent = 4 * K
        self.dim_obs = K
        self.t0 = float(t0)
        self.obs_interval = float(obs_interval)
        P = network.populations.astype(float)
        self.P = P
        self.P_bar = P.mean()
        if K > 1:
            self.d_bar = network.distances[off].mean()
            with np.errstate(divide="ignore"):
                inv_d = np.where(off, 1.0 / network.distances, 0.0)
            # v_kl = G * flux_base_kl; G enters linearly.
            self.flux_base = (self.d_bar / self.P_bar ** 2) * np.outer(P, P) * inv_d
        else:
            self.d_bar = 0.0
            self.flux_base = np.zeros((1, 1))
        self._flux_row_sum = self.flux_base.sum(axis=1)

    # slices into the (J, 4K) state layout
    def _split(self, states):
        K = self.K
        return states[:, :K], states[:, K:2 * K], states[:, 2 * K:3 * K], states[:, 3 * K:]

    def default_params(self) -> ParamVector:
        entries = [
            ParamEntry("R0", 25.0, "log", "regular"),
            ParamEntry("amplitude", 0.3, "logit", "regular"),
            ParamEntry("mixing_exponent", 0.97, "log", "regular"),
            ParamEntry("mu", 0.02, "log", "fixed"),
            ParamEntry("nu_EI", 365.25 / 8.0, "log", "regular"),
            ParamEntry("nu_IR", 365.25 / 5.0, "log", "regular"),
            ParamEntry("sigma2", 0.02, "log", "regular"),
            ParamEntry("psi", 0.1, "log", "regular"),
            ParamEntry("G", 100.0, "log", "regular"),
            ParamEntry("cohort_frac", 0.4, "logit", "regular"),
            ParamEntry("s0", 0.035, "logit", "ivp"),
            ParamEntry("e0", 0.0002, "logit", "ivp"),
            ParamEntry("i0", 0.0002, "logit", "ivp"),
        ]
        entries += [ParamEntry(f"rho_{k}", 0.5, "logit", "fixed") for k in range(self.K)]
        return ParamVector(entries)

    def _rho(self, params):
        # (K,) or (J, K) when reporting probabilities are perturbed
        cols = [np.asarray(params[f"rho_{k}"], dtype=float) for k in range(self.K)]
        if any(c.ndim for c in cols):
            return np.stack([np.broadcast_to(c, cols[0].shape if cols[0].ndim else c.shape)
                             for c in cols], axis=-1)
        return np.asarray(cols)

    # -- seasonality ----------------------------------------------------------

    @staticmethod
    def is_holiday(day: int) -> bool:
        return any(lo <= day <= hi for lo, hi in HOLIDAYS)

    def beta(self, params, t) -> np.ndarray:
        """Seasonal transmission coefficient at time t (school term vs holiday)."""
        a = np.asarray(params["amplitude"], dtype=float)
        beta_bar = self.beta_bar(params)
        day = int((t - math.floor(t)) * 365.25)
        p = SCHOOL_TERM_FRACTION
        factor = (1.0 - 2.0 * p * a) if self.is_holiday(day) else (1.0 + 2.0 * (1.0 - p) * a)
        return factor * beta_bar

    def beta_bar(self, params) -> np.ndarray:
        """Annual-average transmission rate implied by R0.

        Convention: beta_bar = R0 * (nu_IR + mu), the basic SEIR relation for
        the mean infectious lifetime; isolated here so the mapping can be
        swapped without touching the dynamics.
        """
        R0 = np.asarray(params["R0"], dtype=float)
        return R0 * (np.asarray(params["nu_IR"], dtype=float) + np.asarray(params["mu"], dtype=float))

    # -- coupling -------------------------------------------------------------

    def gravity_flux(self, params, k: int, l: int) -> float:
        """Travel volume v_kl = G * (d_bar / P_bar^2) * P_k P_l / d_kl."""
        if k == l:
            raise DomainError("gravity flux is defined for distinct cities")
        G = float(np.asarray(params["G"]).reshape(-1)[0])
        return G * self.flux_base[k, l]

    def infection_rates(self, params, states, t) -> np.ndarray:
        """Per-city infection rates (J, K); negative coupling brackets clamp to 0."""
        S, E, I, C = self._split(states)
        alpha = _col(params["mixing_exponent"])
        G = _col(params["G"])
        prev = np.maximum(I, 0.0) / self.P
        q = np.power(prev, alpha, where=prev > 0, out=np.zeros_like(prev))
        coupling = (q @ self.flux_base.T - q * self._flux_row_sum) / self.P
        bracket = np.maximum(q + G * coupling, 0.0)
        return self.beta(params, t) * np.maximum(S, 0.0) * bracket

    def measles_infection_rate(self, params, k: int, state, t) -> float:
        """Scalar convenience wrapper for a single city and state vector."""
        rates = self.infection_rates(params, np.asarray(state, dtype=float)[None, :], t)
        return float(rates[0, k])

    # -- recruitment ----------------------------------------------------------

    def susceptible_recruitment(self, params, k: int, t):
        """Recruitment schedule for city k in the year containing t.

        Returns ``(rate_per_day, pulse_size, pulse_day)``: the non-cohort
        fraction of births from four years earlier spread uniformly over the
        year, and the cohort fraction entering at once on calendar day 251.
        """
        c = float(np.asarray(params["cohort_frac"]).reshape(-1)[0])
        births = self.network.births_for(math.floor(t) - 4)[k]
        return (1.0 - c) * births / 365.25, c * births, COHORT_ENTRY_DAY

    def _recruitment_arrays(self, params, t_from, t_to):
        """Continuous inflow over [t_from, t_to) plus any cohort pulse crossed."""
        c = np.asarray(params["cohort_frac"], dtype=float)
        year = math.floor(t_from)
        births = self.network.births_for(year - 4)
        cont = (1.0 - _col(c)) * births * (t_to - t_from)
        pulse = np.zeros_like(cont)
        for y in {year, math.floor(t_to)}:
            pt = y + COHORT_ENTRY_DAY / 365.25
            if t_from < pt <= t_to:
                pulse = pulse + np.round(_col(c) * self.network.births_for(y - 4))
        return cont, pulse

    def _is_biweek_start(self, t) -> bool:
        r = (t - self.t0) / self.obs_interval
        return abs(r - round(r)) < 1e-6

    # -- dynamics -------------------------------------------------------------

    def init_sample(self, params, J, rng):
        s0 = _col(params["s0"])
        e0 = _col(params["e0"])
        i0 = _col(params["i0"])
        states = np.zeros((J, self.dim_latent))
        K = self.K
        states[:, :K] = np.round(s0 * self.P * np.ones((J, K)))
        states[:, K:2 * K] = np.round(e0 * self.P * np.ones((J, K)))
        states[:, 2 * K:3 * K] = np.round(i0 * self.P * np.ones((J, K)))
        return states

    def transition_sample(self, params, t_from, t_to, states, rng):
        delta = t_to - t_from
        if delta < 0:
            raise DomainError("t_to must be >= t_from")
        states = states.copy()
        if self._is_biweek_start(t_from):
            states[:, 3 * self.K:] = 0.0  # new reporting biweek
        if delta == 0:
            return states
        gen = rng.generator()
        S, E, I, C = self._split(states)
        sigma2 = np.asarray(params["sigma2"], dtype=float)
        mu = _col(params["mu"])
        nu_EI = _col(params["nu_EI"])
        nu_IR = _col(params["nu_IR"])

        d_SE = np.minimum(_od_increment(gen, self.infection_rates(params, states, t_from),
                                        delta, sigma2), S)
        dead_S = np.minimum(_od_increment(gen, mu * S, delta, sigma2), S - d_SE)
        d_EI = np.minimum(_od_increment(gen, nu_EI * E, delta, sigma2), E)
        dead_E = np.minimum(_od_increment(gen, mu * E, delta, sigma2), E - d_EI)
        d_IR = np.minimum(_od_increment(gen, nu_IR * I, delta, sigma2), I)
        dead_I = np.minimum(_od_increment(gen, mu * I, delta, sigma2), I - d_IR)
        cont, pulse = self._recruitment_arrays(params, t_from, t_to)
        recruits = gen.poisson(np.broadcast_to(cont, S.shape)) + pulse

        S += recruits - d_SE - dead_S
        E += d_SE - d_EI - dead_E
        I += d_EI - d_IR - dead_I
        C += d_IR
        return states

    def skeleton_step(self, params, t_from, t_to, states):
        """Expected-increment (noise-free) dynamics; states become real-valued."""
        delta = t_to - t_from
        states = states.copy()
        if self._is_biweek_start(t_from):
            states[:, 3 * self.K:] = 0.0
        if delta == 0:
            return states
        S, E, I, C = self._split(states)
        mu = _col(params["mu"])
        nu_EI = _col(params["nu_EI"])
        nu_IR = _col(params["nu_IR"])

        d_SE = np.minimum(self.infection_rates(params, states, t_from) * delta, S)
        dead_S = np.minimum(mu * S * delta, S - d_SE)
        d_EI = np.minimum(nu_EI * E * delta, E)
        dead_E = np.minimum(mu * E * delta, E - d_EI)
        d_IR = np.minimum(nu_IR * I * delta, I)
        dead_I = np.minimum(mu * I * delta, I - d_IR)
        cont, pulse = self._recruitment_arrays(params, t_from, t_to)

        S += cont + pulse - d_SE - dead_S
        E += d_SE - d_EI - dead_E
        I += d_EI - d_IR - dead_I
        C += d_IR
        return states

    # -- measurement ----------------------------------------------------------

    def _meas_moments(self, params, states):
        C = np.maximum(states[:, 3 * self.K:], 0.0)
        rho = self._rho(params)
        psi = _col(params["psi"])
        mean = rho * C
        var = rho * (1.0 - rho) * C + psi ** 2 * rho ** 2 * C ** 2 + 1.0
        return mean, var

    def measurement_logdensity(self, params, n, y, states):
        mean, var = self._meas_moments(params, states)
        return discrete_normal_logpmf(y[None, :], mean, var).sum(axis=1)

    def measurement_sample(self, params, n, states, rng):
        mean, var = self._meas_moments(params, states)
        draw = mean + np.sqrt(var) * rng.generator().standard_normal(mean.shape)
        return np.maximum(np.round(draw), 0.0)

    def measurement_family(self, params, n) -> MeasurementFamily:
        def mean(p, states):
            C = np.maximum(states[:, 3 * self.K:], 0.0)
            return self._rho(p) * C

        def meas_var(p, states):
            return self._meas_moments(p, states)[1]

        def log_density(y, mu, var):
            return discrete_normal_logpmf(y[None, :] if y.ndim == 1 else y, mu, var)

        return MeasurementFamily(mean, meas_var, log_density, "quantile")


# ---------------------------------------------------------------------------
# Synthetic networks and CSV interchange
# ---------------------------------------------------------------------------

def synthetic_network(K: int, seed: int = 0, start_year: int = 1950,
                      n_years: int = 6) -> CityNetwork:
    """A reproducible toy network: log-spread populations on a ring of cities.

    Birth series cover [start_year - 5, start_year + n_years] so simulations
    starting at start_year can look up births from four years earlier.
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 902])))
    names = [f"city{k}" for k in range(K)]
    populations = np.round(np.exp(np.linspace(np.log(2e5), np.log(5e4), K)))
    lat = 51.0 + 2.0 * gen.random(K)
    lon = -2.0 + 3.0 * gen.random(K)
    distances = np.zeros((K, K))
    for k in range(K):
        for l in range(k + 1, K):
            dkm = max(_haversine_km(lat[k], lon[k], lat[l], lon[l]), 1.0)
            distances[k, l] = distances[l, k] = dkm
    births = {}
    for year in range(start_year - 5, start_year + n_years + 1):
        base = populations * 0.018
        births[year] = np.round(base * (1.0 + 0.05 * gen.standard_normal(K)))
    return CityNetwork(names, populations, distances, births)


def write_network_csv(network: CityNetwork, coords_path, births_path, distances_path):
    with open(coords_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["city", "population"])
        for name, pop in zip(network.names, network.populations):
            w.writerow([name, f"{pop:.17g}"])
    with open(births_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "city", "births"])
        for year in sorted(network.births):
            for name, b in zip(network.names, network.births[year]):
                w.writerow([year, name, f"{b:.17g}"])
    with open(distances_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["city_a", "city_b", "km"])
        for k in range(network.K):
            for l in range(k + 1, network.K):
                w.writerow([network.names[k], network.names[l],
                            f"{network.distances[k, l]:.17g}"])


def load_network(coords_path, births_path, distances_path=None) -> CityNetwork:
    names, pops, coords = [], [], []
    with open(coords_path, newline="") as fh:
        for row in csv.DictReader(fh):
            names.append(row["city"])
            pops.append(float(row["population"]))
            if "lat" in row and row.get("lat"):
                coords.append((float(row["lat"]), float(row["lon"])))
    K = len(names)
    index = {n: i for i, n in enumerate(names)}
    distances = np.zeros((K, K))
    if distances_path is not None:
        with open(distances_path, newline="") as fh:
            for row in csv.DictReader(fh):
                k, l = index[row["city_a"]], index[row["city_b"]]
                distances[k, l] = distances[l, k] = float(row["km"])
    elif coords:
        for k in range(K):
            for l in range(k + 1, K):
                d = _haversine_km(*coords[k], *coords[l])
                distances[k, l] = distances[l, k] = d
    elif K > 1:
        raise ModelError("need either coordinates or a distance table")
    births: Dict[int, np.ndarray] = {}
    with open(births_path, newline="") as fh:
        for row in csv.DictReader(fh):
            year = int(row["year"])
            births.setdefault(year, np.zeros(K))[index[row["city"]]] = float(row["births"])
    return CityNetwork(names, np.asarray(pops), distances, births)


def write_cases_csv(path, obs_times, cases, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "city", "cases"])
        for t, row in zip(obs_times, cases):
            for name, y in zip(names, row):
                w.writerow([f"{t:.17g}", name, f"{y:.17g}"])


def load_cases(path, names):
    index = {n: i for i, n in enumerate(names)}
    by_time: Dict[float, np.ndarray] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = float(row["date"])
            by_time.setdefault(t, np.zeros(len(names)))[index[row["city"]]] = float(row["cases"])
    times = np.array(sorted(by_time))
    cases = np.vstack([by_time[t] for t in times])
    return times, cases
