"""Iterated filtering: likelihood maximization by perturbed-parameter filtering.

Each iteration runs the guided filter on the extended state (latent state,
parameters), perturbing parameters with Gaussian kernels on the estimation
scale at every grid sub-step and resampling them jointly with the states.
Perturbation sizes cool geometrically across iterations, collapsing the
parameter swarm toward the maximum likelihood estimate.  Initial value
parameters, which only set the starting latent state, are perturbed solely
at the start of each filtering pass.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .engine import GirfConfig, girf_filter
from .errors import AllWeightsDegenerate, ConfigError, DomainError, FilterFailure
from .pomp import ParamVector, TimeGrid, _forward, _inverse, build_time_grid
from .resampling import normalize_log_weights
from .rng import RngStream

__all__ = ["ParamSwarm", "IgirfConfig", "IgirfResult", "perturb_params",
           "igirf_run", "estimate_ivps", "alternating_igirf"]


class ParamSwarm:
    """J structurally identical parameter vectors stored columnwise.

    Transforms and kinds come from a template :class:`ParamVector`; values of
    fixed-kind parameters are identical across members and exposed to model
    callbacks as scalars.
    """

    def __init__(self, template: ParamVector, values: Dict[str, np.ndarray]):
        sizes = {v.size for v in values.values()}
        if set(values) != set(template.names) or len(sizes) != 1:
            raise DomainError("swarm values must cover every template parameter")
        self.template = template
        self.values = {k: np.asarray(v, dtype=float) for k, v in values.items()}
        for e in template.entries:
            if e.kind == "fixed" and np.ptp(self.values[e.name]) != 0:
                raise DomainError(f"fixed parameter {e.name} varies across the swarm")

    @classmethod
    def from_template(cls, template: ParamVector, J: int) -> "ParamSwarm":
        return cls(template, {e.name: np.full(J, e.value) for e in template.entries})

    @property
    def J(self) -> int:
        return next(iter(self.values.values())).size

    def view(self) -> dict:
        out = {}
        for e in self.template.entries:
            v = self.values[e.name]
            out[e.name] = float(v[0]) if e.kind == "fixed" else v
        return out

    def gather(self, ancestors) -> "ParamSwarm":
        return ParamSwarm(self.template,
                          {k: v[ancestors] for k, v in self.values.items()})

    def concat(self, others) -> "ParamSwarm":
        vals = {k: np.concatenate([self.values[k]] + [o.values[k] for o in others])
                for k in self.values}
        return ParamSwarm(self.template, vals)

    def split(self, pieces: int):
        J = self.J
        if J % pieces:
            raise ConfigError(f"swarm of size {J} does not split into {pieces} islands")
        step = J // pieces
        return [ParamSwarm(self.template,
                           {k: v[i * step:(i + 1) * step] for k, v in self.values.items()})
                for i in range(pieces)]

    def member(self, j: int) -> ParamVector:
        return self.template.replace(**{k: float(v[j]) for k, v in self.values.items()})

    def natural_means(self) -> Dict[str, float]:
        return {k: float(v.mean()) for k, v in self.values.items()}

    def natural_sds(self) -> Dict[str, float]:
        return {k: float(v.std(ddof=1)) if v.size > 1 else 0.0
                for k, v in self.values.items()}

    def point_estimate(self, kind: str = "mean") -> ParamVector:
        """Swarm mean (or median) on the estimation scale, transformed back."""
        updates = {}
        for e in self.template.entries:
            if e.kind == "fixed":
                continue
            z = _forward(self.values[e.name], e.transform)
            zc = np.median(z) if kind == "median" else z.mean()
            updates[e.name] = _inverse(zc, e.transform)
        return self.template.replace(**updates)


def perturb_params(swarm: ParamSwarm, sigmas: Dict[str, float], stage: str,
                   rng: RngStream) -> ParamSwarm:
    """Gaussian perturbation on the estimation scale.

    At stage ``"initial"`` both regular and IVP parameters move; at
    ``"intermediate"`` only regular ones.  Fixed parameters never move.
    Draws are consumed in template order so results do not depend on the
    sigma dict ordering.
    """
    if stage not in ("initial", "intermediate"):
        raise DomainError(f"unknown perturbation stage {stage!r}")
    gen = rng.generator()
    values = dict(swarm.values)
    for e in swarm.template.entries:
        sd = sigmas.get(e.name, 0.0)
        if sd < 0:
            raise DomainError(f"negative perturbation sd for {e.name}")
        eligible = e.kind == "regular" or (e.kind == "ivp" and stage == "initial")
        if sd == 0.0 or not eligible:
            continue
        z = _forward(values[e.name], e.transform) + sd * gen.standard_normal(swarm.J)
        values[e.name] = _inverse(z, e.transform)
    return ParamSwarm(swarm.template, values)


@dataclass
class IgirfConfig:
    """Iterated filtering configuration.

    ``sigmas`` are initial per-parameter perturbation sds on the estimation
    scale; iteration m uses ``sigma * cooling**(m-1)``.  ``girf`` supplies
    the per-island engine configuration (its ``islands`` field sets the
    island count; each island filters J particles of the swarm).
    """

    M: int
    sigmas: Dict[str, float]
    girf: GirfConfig
    cooling: float = 0.92
    ivp_data_prefix: Optional[int] = None
    alternation: str = "joint"
    point_estimate: str = "mean"

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("need at least one iteration")
        if not 0 < self.cooling <= 1:
            raise ConfigError("cooling factor must lie in (0, 1]")
        if self.alternation not in ("joint", "ivp-then-regular"):
            raise ConfigError(f"unknown alternation {self.alternation!r}")
        if self.point_estimate not in ("mean", "median"):
            raise ConfigError(f"unknown point estimate {self.point_estimate!r}")


@dataclass
class IgirfResult:
    final_swarm: ParamSwarm
    logliks: np.ndarray                 # (M,)
    swarm_means: List[Dict[str, float]]
    swarm_sds: List[Dict[str, float]]
    point: ParamVector


def _island_config(config: IgirfConfig) -> GirfConfig:
    g = config.girf
    return GirfConfig(J=g.J, guide=g.guide, islands=1, scheme=g.scheme,
                      record_ess=g.record_ess, ess_threshold=g.ess_threshold)


def _run_iteration(model, data, grid, config, island_swarms, sigma_m, rng, m,
                   threads, intermediate):
    """One perturbed filtering pass over every island; returns swarms + logliks."""
    girf_cfg = _island_config(config)

    def perturb_hook(swarm, k, step_rng):
        return perturb_params(swarm, sigma_m, "intermediate", step_rng)

    def one(i):
        sw = perturb_params(island_swarms[i], sigma_m, "initial", rng.child(m, i, 0))
        try:
            out = girf_filter(model, sw, data, grid, girf_cfg, rng.child(m, i, 1),
                              perturb=perturb_hook if intermediate else None)
        except AllWeightsDegenerate as exc:
            raise FilterFailure(f"iteration {m} island {i} failed: {exc}",
                                iteration=m, cause=exc) from exc
        return out.terminal_swarm.params, out.loglik

    idx = range(len(island_swarms))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(i) for i in idx]
    swarms = [r[0] for r in results]
    logliks = np.array([r[1] for r in results])
    _, log_mean = normalize_log_weights(logliks)  # logmeanexp over islands
    return swarms, float(log_mean), logliks


def igirf_run(model, data, grid: TimeGrid, config: IgirfConfig,
              init_swarm: ParamSwarm, rng: RngStream, threads: int = 1) -> IgirfResult:
    """Run M iterations of perturbed filtering and return the final swarm.

    The initial swarm must hold J*islands members; islands evolve
    independently across iterations (which preserves parameter diversity)
    and are pooled at the end.  The per-iteration likelihood estimate is the
    island average on the natural scale.
    """
    expected = config.girf.J * config.girf.islands
    if init_swarm.J != expected:
        raise ConfigError(f"initial swarm has {init_swarm.J} members, expected {expected}")
    island_swarms = init_swarm.split(config.girf.islands)
    logliks = np.empty(config.M)
    means, sds = [], []
    for m in range(1, config.M + 1):
        cool = config.cooling ** (m - 1)
        sigma_m = {k: v * cool for k, v in config.sigmas.items()}
        island_swarms, loglik_m, _ = _run_iteration(
            model, data, grid, config, island_swarms, sigma_m, rng, m,
            threads, intermediate=True)
        pooled = island_swarms[0].concat(island_swarms[1:])
        logliks[m - 1] = loglik_m
        means.append(pooled.natural_means())
        sds.append(pooled.natural_sds())
    final = island_swarms[0].concat(island_swarms[1:])
    return IgirfResult(final, logliks, means, sds,
                       final.point_estimate(config.point_estimate))


def estimate_ivps(model, data, grid: TimeGrid, config: IgirfConfig,
                  swarm: ParamSwarm, rng: RngStream, sweeps: Optional[int] = None,
                  threads: int = 1) -> ParamSwarm:
    """Refine initial value parameters by repeated filtering over a data prefix.

    Only the initial perturbation kernel acts (IVP entries of the sigma
    table); regular parameters are never perturbed here.  Filtering uses the
    first ``config.ivp_data_prefix`` observations, where the information
    about the initial state concentrates, over many small islands.
    """
    prefix = config.ivp_data_prefix or grid.n_obs
    if prefix > grid.n_obs:
        raise ConfigError("ivp_data_prefix exceeds the number of observations")
    sub_grid = build_time_grid(grid.t0, grid.obs_times[:prefix], grid.S)
    sub_data = np.asarray(data)[:prefix]
    ivp_names = {e.name for e in swarm.template.entries if e.kind == "ivp"}
    sigmas = {k: v for k, v in config.sigmas.items() if k in ivp_names}
    island_swarms = swarm.split(config.girf.islands)
    n_sweeps = sweeps if sweeps is not None else config.M
    for m in range(1, n_sweeps + 1):
        cool = config.cooling ** (m - 1)
        sigma_m = {k: v * cool for k, v in sigmas.items()}
        island_swarms, _, _ = _run_iteration(
            model, sub_data, sub_grid, config, island_swarms, sigma_m,
            rng.child(8, m), m, threads, intermediate=False)
    return island_swarms[0].concat(island_swarms[1:])


def alternating_igirf(model, data, grid: TimeGrid, config: IgirfConfig,
                      init_swarm: ParamSwarm, rng: RngStream, rounds: int = 1,
                      ivp_sweeps: Optional[int] = None, threads: int = 1) -> IgirfResult:
    """Alternate IVP-only passes with regular-parameter iterations.

    Each round first refines the IVPs on the data prefix, then runs the full
    iterated filter with the IVP perturbations switched off.  Perturbation
    sizes carry the geometric cooling across rounds.
    """
    swarm = init_swarm
    result = None
    ivp_names = {e.name for e in swarm.template.entries if e.kind == "ivp"}
    for r in range(rounds):
        round_cool = config.cooling ** (r * config.M)
        round_sigmas = {k: v * round_cool for k, v in config.sigmas.items()}
        round_cfg = IgirfConfig(M=config.M, sigmas=round_sigmas, girf=config.girf,
                                cooling=config.cooling,
                                ivp_data_prefix=config.ivp_data_prefix,
                                alternation=config.alternation,
                                point_estimate=config.point_estimate)
        swarm = estimate_ivps(model, data, grid, round_cfg, swarm,
                              rng.child(9, r), sweeps=ivp_sweeps, threads=threads)
        reg_cfg = IgirfConfig(M=config.M,
                              sigmas={k: 0.0 if k in ivp_names else v
                                      for k, v in round_sigmas.items()},
                              girf=config.girf, cooling=config.cooling,
                              ivp_data_prefix=config.ivp_data_prefix,
                              alternation=config.alternation,
                              point_estimate=config.point_estimate)
        result = igirf_run(model, data, grid, reg_cfg, swarm, rng.child(10, r),
                           threads=threads)
        swarm = result.final_swarm
    return result
