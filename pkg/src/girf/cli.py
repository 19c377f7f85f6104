"""Config-driven experiment runner.

Subcommands mirror the experiment patterns the toolkit supports: simulate a
model, filter a dataset under one engine, compare engines, maximize the
likelihood by iterated filtering, sweep profile likelihood points, and turn
profile points into an adjusted confidence interval.  Every run writes a
JSON summary with an embedded provenance record (resolved config, seed,
package version) from which its primary outputs can be regenerated
bit-identically, plus CSV traces; numeric results are mirrored to stdout as
JSON lines.  Wall times are reported separately (timing.json) because they
are not reproducible.

Exit codes: 1 for configuration errors, 2 for model errors, 3 for filter
failures.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import jsonschema
except ImportError:  # pragma: no cover
    jsonschema = None

from . import __version__
from .engine import FilterOutput, GirfConfig, girf_filter, run_islands
from .errors import AllWeightsDegenerate, ConfigError, FilterFailure, GirfError, ModelError
from .guides import AnalyticForecastGuide, ApfGuide, BootstrapGuide, GuideSpec, SimulationGuide
from .igirf import IgirfConfig, ParamSwarm, alternating_igirf, igirf_run
from .mcap import ProfilePoints, mcap_interval
from .models import build_model
from .models.measles import load_cases, write_cases_csv, write_network_csv
from .oracles import enkf_filter, kalman_filter
from .pomp import build_time_grid, simulate_pomp
from .resampling import ResampleScheme
from .rng import RngStream

_SCHEMA_PATH = Path(__file__).with_name("config_schema.json")


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    validate_config(config)
    return config


def validate_config(config: dict) -> None:
    """Schema validation; unknown fields are hard errors."""
    if jsonschema is None:
        raise ConfigError("jsonschema is required to validate configurations")
    with open(_SCHEMA_PATH) as fh:
        schema = json.load(fh)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {err.message}", field_path=path)


def _build_grid(config, model):
    block = config.get("grid")
    if block is None:
        raise ConfigError("grid block required for this task", field_path="grid")
    if "obs_times" in block:
        obs = np.asarray(block["obs_times"], dtype=float)
    elif {"start", "interval", "count"} <= set(block):
        obs = block["start"] + block["interval"] * np.arange(block["count"])
    else:
        raise ConfigError("grid needs obs_times or start/interval/count", field_path="grid")
    t0 = float(block.get("t0", getattr(model, "t0", 0.0)))
    return build_time_grid(t0, obs, int(block.get("S", 1)))


def _build_guide(block, model):
    guide_block = block.get("guide", {})
    gtype = guide_block.get("type", "simulation")
    if gtype in ("cbm_exact", "cbm_diag"):
        variant = "exact" if gtype == "cbm_exact" else "diag"
        if not hasattr(model, f"forecast_loglik_{variant}"):
            raise ConfigError(f"model {model.name} has no analytic {variant} guide",
                              field_path="filter.guide.type")
        return AnalyticForecastGuide(
            variant,
            B=int(guide_block.get("B", 2)),
            power_schedule=guide_block.get("power_schedule", "all-ones"),
        )
    spec = GuideSpec(
        B=int(guide_block.get("B", 1)),
        power_schedule=guide_block.get("power_schedule", "linear-fraction"),
        n_variability_sims=int(guide_block.get("n_variability_sims", 40)),
        refresh_policy=guide_block.get("refresh_policy", "every-s1"),
        variance_inflation=guide_block.get("variance_inflation"),
    )
    return SimulationGuide(spec)


def _girf_config(block, model) -> GirfConfig:
    engine = block["engine"]
    if engine == "bootstrap":
        guide = BootstrapGuide()
    elif engine == "apf":
        guide = ApfGuide(stochastic=bool(block.get("apf_stochastic_forecast", False)))
    else:
        guide = _build_guide(block, model)
    return GirfConfig(
        J=int(block.get("J", 1000)),
        guide=guide,
        islands=int(block.get("islands", 1)),
        scheme=ResampleScheme(block.get("scheme", "systematic")),
        record_filter_means=bool(block.get("record_filter_means", True)),
        record_grid_means=bool(block.get("record_grid_means", False)),
        ess_threshold=block.get("ess_threshold"),
    )


def _obtain_data(config, model, params, grid, seed):
    """Load observations from CSV or self-simulate them deterministically."""
    block = config.get("data", {})
    if "path" in block:
        if model.name == "measles":
            times, cases = load_cases(block["path"], model.network.names)
            if times.size != grid.n_obs:
                raise ConfigError("case series length does not match the grid", "data.path")
            return cases, None
        with open(block["path"], newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
        return data, None
    sim_seed = int(block.get("simulate_seed", seed + 1))
    sim = simulate_pomp(model, params, grid, RngStream(sim_seed))
    return sim.observations, sim


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


def _provenance(config, seed):
    return {"config": config, "seed": seed, "version": __version__}


def _grid_for_engine(engine_block, config, model):
    grid = _build_grid(config, model)
    if engine_block["engine"] in ("bootstrap", "apf") and grid.S != 1:
        # these engines are defined on the observation grid only
        return build_time_grid(grid.t0, grid.obs_times, 1)
    return grid


def _run_one_engine(engine_block, config, model, params, seed, threads):
    """Returns (label, loglik, filter_means or None, wall_seconds, extra)."""
    engine = engine_block["engine"]
    grid = _grid_for_engine(engine_block, config, model)
    data, sim = _obtain_data(config, model, params, grid, seed)
    rng = RngStream(seed)
    start = time.perf_counter()
    if engine == "kalman":
        if not hasattr(model, "linear_gaussian_spec"):
            raise ConfigError(f"model {model.name} has no exact Kalman form",
                              field_path="filter.engine")
        spec = model.linear_gaussian_spec(params.view(), grid.t0, grid.obs_times)
        res = kalman_filter(spec, data)
        wall = time.perf_counter() - start
        return engine, res.loglik, res.filter_means, wall, {"cond_loglik": res.cond_loglik}
    if engine == "enkf":
        res = enkf_filter(model, params, data, grid, int(engine_block.get("J", 1000)), rng)
        wall = time.perf_counter() - start
        return engine, res.loglik, res.filter_means, wall, {"cond_loglik": res.cond_loglik}
    girf_cfg = _girf_config(engine_block, model)
    out = run_islands(model, params, data, grid, girf_cfg, rng, threads=threads)
    wall = time.perf_counter() - start
    return engine, out.loglik, out.filter_means, wall, {"output": out, "grid": grid}


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

def _task_simulate(config, out_dir, seed, threads):
    model, params = build_model(config["model"])
    grid = _build_grid(config, model)
    sim = simulate_pomp(model, params, grid, RngStream(seed))
    if model.name == "measles":
        write_cases_csv(out_dir / "data.csv", grid.obs_times, sim.observations,
                        model.network.names)
        write_network_csv(model.network, out_dir / "coords.csv",
                          out_dir / "births.csv", out_dir / "distances.csv")
    else:
        with open(out_dir / "data.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"y{i}" for i in range(model.dim_obs)])
            for t, row in zip(grid.obs_times, sim.observations):
                w.writerow([_fmt(t)] + [_fmt(v) for v in row])
    with open(out_dir / "latent.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"x{i}" for i in range(model.dim_latent)])
        for t, row in zip(grid.times, sim.latent_path):
            w.writerow([_fmt(t)] + [_fmt(v) for v in row])
    summary = {
        "task": "simulate",
        "n_obs": grid.n_obs,
        "provenance": _provenance(config, seed),
    }
    _write_json(out_dir / "summary.json", summary)
    _emit({"task": "simulate", "n_obs": grid.n_obs, "out": str(out_dir)})
    return 0


def _task_filter(config, out_dir, seed, threads):
    model, params = build_model(config["model"])
    block = config.get("filter")
    if block is None:
        raise ConfigError("filter block required", field_path="filter")
    replicates = int(config.get("replicates", 1))
    logliks = []
    wall_total = 0.0
    trace_written = False
    for r in range(replicates):
        label, loglik, means, wall, extra = _run_one_engine(
            block, config, model, params, seed + r, threads)
        logliks.append(loglik)
        wall_total += wall
        if "output" in extra and not trace_written:
            extra["output"].write_csv(out_dir / "trace.csv", extra["grid"])
            trace_written = True
        _emit({"task": "filter", "engine": label, "replicate": r, "loglik": loglik})
    summary = {
        "task": "filter",
        "engine": block["engine"],
        "loglik": logliks[0] if replicates == 1 else logliks,
        "provenance": _provenance(config, seed),
    }
    _write_json(out_dir / "summary.json", summary)
    _write_json(out_dir / "timing.json", {"wall_s": wall_total})
    return 0


def _task_compare(config, out_dir, seed, threads):
    model, params = build_model(config["model"])
    engines = config.get("engines")
    if not engines or len(engines) < 2:
        raise ConfigError("compare needs at least 2 engines", field_path="engines")
    reference_means = None
    if hasattr(model, "linear_gaussian_spec"):
        grid = _build_grid(config, model)
        data, sim = _obtain_data(config, model, params, grid, seed)
        spec = model.linear_gaussian_spec(params.view(), grid.t0, grid.obs_times)
        reference_means = kalman_filter(spec, data).filter_means
    else:
        grid = _build_grid(config, model)
        data, sim = _obtain_data(config, model, params, grid, seed)
        if sim is not None:
            reference_means = sim.latent_path[grid.S::grid.S]
    rows = []
    timing = {}
    for block in engines:
        label, loglik, means, wall, _ = _run_one_engine(block, config, model, params,
                                                        seed, threads)
        mse = ""
        if means is not None and reference_means is not None:
            mse = float(np.mean((means[-1] - reference_means[-1]) ** 2))
        rows.append((label, loglik, mse))
        timing[label] = wall
        _emit({"task": "compare", "engine": label, "loglik": loglik,
               "terminal_mse": mse if mse != "" else None})
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["engine", "loglik", "terminal_filter_mean_mse"])
        for label, loglik, mse in rows:
            w.writerow([label, _fmt(loglik), _fmt(mse) if mse != "" else ""])
    _write_json(out_dir / "summary.json", {
        "task": "compare",
        "results": [{"engine": a, "loglik": b, "terminal_mse": (c if c != "" else None)}
                    for a, b, c in rows],
        "provenance": _provenance(config, seed),
    })
    _write_json(out_dir / "timing.json", {"wall_s": timing})
    return 0


def _igirf_pieces(config, model, params, girf_block):
    block = config.get("igirf")
    if block is None:
        raise ConfigError("igirf block required", field_path="igirf")
    girf_cfg = _girf_config(girf_block, model)
    cfg = IgirfConfig(
        M=int(block["M"]),
        sigmas={k: float(v) for k, v in block["sigmas"].items()},
        girf=girf_cfg,
        cooling=float(block.get("cooling", 0.92)),
        ivp_data_prefix=block.get("ivp_data_prefix"),
        alternation=block.get("alternation", "joint"),
        point_estimate=block.get("point_estimate", "mean"),
    )
    unknown = [k for k in cfg.sigmas if k not in params]
    if unknown:
        raise ConfigError(f"sigma names not in model parameters: {unknown}",
                          field_path="igirf.sigmas")
    return cfg, block


def _task_igirf(config, out_dir, seed, threads):
    model, params = build_model(config["model"])
    filter_block = config.get("filter")
    if filter_block is None:
        raise ConfigError("filter block required for igirf", field_path="filter")
    grid = _build_grid(config, model)
    data, _ = _obtain_data(config, model, params, grid, seed)
    cfg, block = _igirf_pieces(config, model, params, filter_block)
    swarm = ParamSwarm.from_template(params, cfg.girf.J * cfg.girf.islands)
    rng = RngStream(seed)
    if cfg.alternation == "ivp-then-regular":
        result = alternating_igirf(model, data, grid, cfg, swarm, rng,
                                   rounds=int(block.get("rounds", 1)),
                                   ivp_sweeps=block.get("ivp_sweeps"),
                                   threads=threads)
    else:
        result = igirf_run(model, data, grid, cfg, swarm, rng, threads=threads)
    names = [e.name for e in params.entries if e.kind != "fixed"]
    with open(out_dir / "iterations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loglik"] + [f"mean_{n}" for n in names]
                   + [f"sd_{n}" for n in names])
        for m, (ll, mu, sd) in enumerate(zip(result.logliks, result.swarm_means,
                                             result.swarm_sds), start=1):
            w.writerow([m, _fmt(ll)] + [_fmt(mu[n]) for n in names]
                       + [_fmt(sd[n]) for n in names])
    estimate = {e.name: e.value for e in result.point.entries}
    _write_json(out_dir / "estimate.json", {
        "task": "igirf",
        "point_estimate": estimate,
        "final_loglik": float(result.logliks[-1]),
        "provenance": _provenance(config, seed),
    })
    _emit({"task": "igirf", "point_estimate": estimate,
           "final_loglik": float(result.logliks[-1])})
    return 0


def _task_profile(config, out_dir, seed, threads):
    model, params = build_model(config["model"])
    filter_block = config.get("filter")
    if filter_block is None:
        raise ConfigError("filter block required for profile", field_path="filter")
    pblock = config.get("profile")
    if pblock is None:
        raise ConfigError("profile block required", field_path="profile")
    target = pblock["parameter"]
    if target not in params:
        raise ConfigError(f"unknown profile parameter {target!r}", "profile.parameter")
    replicates = int(pblock.get("replicates", 1))
    grid = _build_grid(config, model)
    data, _ = _obtain_data(config, model, params, grid, seed)
    has_igirf = "igirf" in config
    rows = []
    for i, value in enumerate(pblock["values"]):
        fixed = params.replace(**{target: float(value)}).with_kind(target, "fixed")
        for r in range(replicates):
            point_seed = seed + 1000 * (i + 1) + r
            if has_igirf:
                cfg, _block = _igirf_pieces(config, model, fixed, filter_block)
                sigmas = dict(cfg.sigmas)
                sigmas.pop(target, None)
                cfg = IgirfConfig(M=cfg.M, sigmas=sigmas, girf=cfg.girf,
                                  cooling=cfg.cooling,
                                  ivp_data_prefix=cfg.ivp_data_prefix,
                                  alternation="joint",
                                  point_estimate=cfg.point_estimate)
                swarm = ParamSwarm.from_template(fixed, cfg.girf.J * cfg.girf.islands)
                result = igirf_run(model, data, grid, cfg, swarm,
                                   RngStream(point_seed), threads=threads)
                eval_params = result.point
            else:
                eval_params = fixed
            girf_cfg = _girf_config(filter_block, model)
            out = run_islands(model, eval_params, data, grid, girf_cfg,
                              RngStream(point_seed).child(99), threads=threads)
            rows.append((float(value), out.loglik, r))
            _emit({"task": "profile", "phi": float(value), "replicate": r,
                   "loglik": out.loglik})
    with open(out_dir / "profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phi", "loglik", "replicate"])
        for phi, ll, r in rows:
            w.writerow([_fmt(phi), _fmt(ll), r])
    _write_json(out_dir / "summary.json", {
        "task": "profile", "parameter": target, "n_points": len(rows),
        "provenance": _provenance(config, seed),
    })
    return 0


def _task_mcap(config, out_dir, seed, threads):
    block = config.get("mcap", {})
    points_csv = block.get("points_csv")
    if points_csv is None:
        raise ConfigError("mcap needs points_csv", field_path="mcap.points_csv")
    phi, loglik, rep = [], [], []
    with open(points_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            phi.append(float(row["phi"]))
            loglik.append(float(row["loglik"]))
            rep.append(int(row.get("replicate", 0)))
    points = ProfilePoints(np.array(phi), np.array(loglik), np.array(rep))
    transform = block.get("transform", "identity")
    tf = (np.sqrt, np.square) if transform == "sqrt" else (None, None)
    interval = mcap_interval(points, alpha=float(block.get("alpha", 0.05)),
                             span=float(block.get("span", 0.75)),
                             transform=tf[0], inverse_transform=tf[1])
    report = {
        "task": "mcap",
        "phi_hat": interval.phi_hat,
        "se_mc": interval.se_mc,
        "se_stat": interval.se_stat,
        "se_total": interval.se_total,
        "delta": interval.delta,
        "interval": [interval.lo, interval.hi],
        "provenance": _provenance(config, seed),
    }
    _write_json(out_dir / "mcap.json", report)
    grid_phi = np.linspace(min(phi), max(phi), 200)
    tgrid = np.sqrt(grid_phi) if transform == "sqrt" else grid_phi
    values = interval.smoothed(tgrid)
    with open(out_dir / "smooth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phi", "smoothed_loglik"])
        for p, v in zip(grid_phi, values):
            w.writerow([_fmt(p), _fmt(v)])
    _emit({k: report[k] for k in ("task", "phi_hat", "delta", "interval")})
    return 0


_TASKS = {
    "simulate": _task_simulate,
    "filter": _task_filter,
    "compare": _task_compare,
    "igirf": _task_igirf,
    "profile": _task_profile,
    "mcap": _task_mcap,
}


def run_experiment(config_path, seed_override=None, out_dir=None, threads=None) -> int:
    """Run the task named in the config; returns a process exit status."""
    config = load_config(config_path)
    seed = int(seed_override if seed_override is not None else config["seed"])
    out = Path(out_dir if out_dir is not None else config.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    if threads is None:
        threads = int(os.environ.get("GIRF_THREADS", "1"))
    task = config["task"]
    resolved = copy.deepcopy(config)
    resolved["seed"] = seed
    return _TASKS[task](resolved, out, seed, threads)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="girf",
        description="Guided intermediate resampling filter experiment runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _TASKS:
        p = sub.add_parser(name, help=f"run a {name} experiment from a config file")
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: GIRF_THREADS or 1)")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if config["task"] != args.command:
            raise ConfigError(
                f"config task {config['task']!r} does not match subcommand {args.command!r}",
                field_path="task")
        return run_experiment(args.config, args.seed, args.out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 2
    except (AllWeightsDegenerate, FilterFailure) as exc:
        print(f"filter failure: {exc}", file=sys.stderr)
        return 3
    except GirfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
