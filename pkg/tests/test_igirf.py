"""Iterated filtering: perturbations, extended-state resampling, MLE recovery."""

import numpy as np
import pytest

from girf import (
    BootstrapGuide,
    GirfConfig,
    IgirfConfig,
    ParamEntry,
    ParamSwarm,
    ParamVector,
    RngStream,
    build_time_grid,
    estimate_ivps,
    girf_filter,
    igirf_run,
    kalman_filter,
    perturb_params,
    simulate_pomp,
)
from girf.errors import ConfigError, DomainError
from girf.models import CorrelatedBrownianMotion


def template():
    return ParamVector([
        ParamEntry("obs_sd", 1.0, "log", "regular"),
        ParamEntry("drift", 0.0, "identity", "regular"),
        ParamEntry("x0_offset", 0.0, "identity", "ivp"),
        ParamEntry("held", 2.0, "identity", "fixed"),
    ])


class TestPerturb:
    def test_zero_sigma_unchanged(self):
        swarm = ParamSwarm.from_template(template(), 16)
        out = perturb_params(swarm, {"obs_sd": 0.0}, "intermediate", RngStream(0).child(1))
        assert np.array_equal(out.values["obs_sd"], swarm.values["obs_sd"])

    def test_ivp_untouched_at_intermediate_stage(self):
        swarm = ParamSwarm.from_template(template(), 16)
        out = perturb_params(swarm, {"x0_offset": 5.0}, "intermediate",
                             RngStream(0).child(1))
        assert np.array_equal(out.values["x0_offset"], swarm.values["x0_offset"])
        moved = perturb_params(swarm, {"x0_offset": 5.0}, "initial",
                               RngStream(0).child(1))
        assert not np.array_equal(moved.values["x0_offset"], swarm.values["x0_offset"])

    def test_log_transform_stays_positive(self):
        swarm = ParamSwarm.from_template(template(), 64)
        out = perturb_params(swarm, {"obs_sd": 10.0}, "intermediate",
                             RngStream(1).child(1))
        assert np.all(out.values["obs_sd"] > 0)

    def test_fixed_never_moves(self):
        swarm = ParamSwarm.from_template(template(), 8)
        out = perturb_params(swarm, {"held": 3.0}, "initial", RngStream(2).child(1))
        assert np.array_equal(out.values["held"], swarm.values["held"])

    def test_swarm_rejects_varying_fixed(self):
        vals = {e.name: np.full(4, e.value) for e in template().entries}
        vals["held"] = np.array([2.0, 2.0, 2.0, 9.0])
        with pytest.raises(DomainError):
            ParamSwarm(template(), vals)


class TestExtendedStateResampling:
    def test_param_indices_equal_state_indices(self):
        """A tag parameter mirrored into a frozen state coordinate must stay
        aligned with its particle through every joint resampling."""

        class Tagged(CorrelatedBrownianMotion):
            def __init__(self):
                super().__init__(d=1)
                self.dim_latent = 2  # second coordinate freezes the tag

            def default_params(self):
                return ParamVector([
                    ParamEntry("obs_sd", 1.0, "log", "regular"),
                    ParamEntry("drift", 0.0, "identity", "fixed"),
                    ParamEntry("x0_offset", 0.0, "identity", "fixed"),
                    ParamEntry("tag", 0.0, "identity", "regular"),
                ])

            def init_sample(self, params, J, rng):
                states = np.zeros((J, 2))
                states[:, 1] = np.asarray(params["tag"])
                return states

            def transition_sample(self, params, t_from, t_to, states, rng):
                out = states.copy()
                out[:, :1] = super().transition_sample(params, t_from, t_to,
                                                       states[:, :1], rng)
                return out

            def measurement_logdensity(self, params, n, y, states):
                return super().measurement_logdensity(params, n, y, states[:, :1])

        model = Tagged()
        J = 64
        p = model.default_params()
        swarm = ParamSwarm(p, {
            "obs_sd": np.ones(J), "drift": np.zeros(J), "x0_offset": np.zeros(J),
            "tag": np.arange(J, dtype=float),
        })
        grid = build_time_grid(0.0, np.arange(1.0, 6.0), 2)
        data = np.random.default_rng(0).normal(size=(5, 1))
        cfg = GirfConfig(J=J, guide=BootstrapGuide())
        grid1 = build_time_grid(0.0, np.arange(1.0, 6.0), 1)
        out = girf_filter(model, swarm, data, grid1, cfg, RngStream(5))
        assert np.array_equal(out.terminal_swarm.states[:, 1],
                              out.terminal_swarm.params.values["tag"])

    def test_swarm_run_matches_plain_run_when_constant(self):
        m = CorrelatedBrownianMotion(d=2)
        p = m.default_params()
        grid = build_time_grid(0.0, np.arange(1.0, 5.0), 1)
        sim = simulate_pomp(m, p, grid, RngStream(1))
        cfg = GirfConfig(J=32, guide=BootstrapGuide())
        plain = girf_filter(m, p, sim.observations, grid, cfg, RngStream(2))
        swarm = ParamSwarm.from_template(p, 32)
        extended = girf_filter(m, swarm, sim.observations, grid, cfg, RngStream(2))
        assert np.array_equal(plain.cond_loglik, extended.cond_loglik)
        assert np.array_equal(plain.terminal_swarm.states,
                              extended.terminal_swarm.states)


class TestIgirfRun:
    def setup_run(self, N=20, seed=3):
        m = CorrelatedBrownianMotion(d=1)
        p = m.default_params()
        obs_t = np.arange(1.0, N + 1.0)
        grid = build_time_grid(0.0, obs_t, 1)
        sim = simulate_pomp(m, p, grid, RngStream(seed))
        return m, p, grid, sim.observations

    def test_degenerate_perturbation_reduces_to_plain_filter(self):
        m, p, grid, data = self.setup_run()
        J = 40
        cfg = IgirfConfig(M=1, sigmas={"obs_sd": 0.0},
                          girf=GirfConfig(J=J, guide=BootstrapGuide()))
        swarm = ParamSwarm.from_template(p, J)
        res = igirf_run(m, data, grid, cfg, swarm, RngStream(7))
        assert np.array_equal(res.final_swarm.values["obs_sd"], swarm.values["obs_sd"])
        # matched streams: iteration m=1, island 0 filters under rng.child(1, 0, 1)
        plain = girf_filter(m, ParamSwarm.from_template(p, J), data, grid,
                            cfg.girf, RngStream(7).child(1, 0, 1))
        assert res.logliks[0] == plain.loglik

    def test_zero_sigma_iterations_are_iid_replicates(self):
        m, p, grid, data = self.setup_run()
        cfg = IgirfConfig(M=4, sigmas={"obs_sd": 0.0},
                          girf=GirfConfig(J=30, guide=BootstrapGuide()))
        res = igirf_run(m, data, grid, cfg, ParamSwarm.from_template(p, 30),
                        RngStream(8))
        assert np.unique(res.logliks).size == 4  # independent streams per iteration

    def test_cooling_is_geometric(self):
        cfg = IgirfConfig(M=5, sigmas={"obs_sd": 0.5},
                          girf=GirfConfig(J=10, guide=BootstrapGuide()),
                          cooling=0.92)
        sds = [0.5 * 0.92 ** (m - 1) for m in range(1, 6)]
        assert sds[0] == 0.5
        assert sds[4] == pytest.approx(0.5 * 0.92 ** 4, rel=1e-15)

    def test_fixed_params_bitwise_constant(self):
        m, p, grid, data = self.setup_run()
        p = p.with_kind("drift", "fixed").replace(drift=0.125)
        cfg = IgirfConfig(M=3, sigmas={"obs_sd": 0.2, "drift": 1.0},
                          girf=GirfConfig(J=20, guide=BootstrapGuide()))
        res = igirf_run(m, data, grid, cfg, ParamSwarm.from_template(p, 20),
                        RngStream(9))
        assert np.all(res.final_swarm.values["drift"] == 0.125)

    def test_swarm_size_validation(self):
        m, p, grid, data = self.setup_run()
        cfg = IgirfConfig(M=1, sigmas={},
                          girf=GirfConfig(J=16, guide=BootstrapGuide(), islands=2))
        with pytest.raises(ConfigError):
            igirf_run(m, data, grid, cfg, ParamSwarm.from_template(p, 16),
                      RngStream(0))

    def test_mle_recovery_small(self):
        """Swarm mean approaches the Kalman grid-search MLE for the obs sd."""
        m, p, grid, data = self.setup_run(N=40, seed=12)
        start = p.replace(obs_sd=2.5)
        cfg = IgirfConfig(M=12, sigmas={"obs_sd": 0.15},
                          girf=GirfConfig(J=400, guide=BootstrapGuide()),
                          cooling=0.92)
        res = igirf_run(m, data, grid, cfg, ParamSwarm.from_template(start, 400),
                        RngStream(13))
        sds = np.linspace(0.4, 3.0, 261)
        lls = [kalman_filter(m.linear_gaussian_spec({"obs_sd": s, "drift": 0.0,
                                                     "x0_offset": 0.0},
                                                    0.0, grid.obs_times),
                             data).loglik for s in sds]
        mle = sds[int(np.argmax(lls))]
        assert res.point["obs_sd"] == pytest.approx(mle, rel=0.2)


class TestEstimateIvps:
    def test_no_ivp_sigma_is_noop_on_values(self):
        m = CorrelatedBrownianMotion(d=1)
        p = m.default_params()
        grid = build_time_grid(0.0, np.arange(1.0, 6.0), 1)
        sim = simulate_pomp(m, p, grid, RngStream(1))
        cfg = IgirfConfig(M=2, sigmas={},
                          girf=GirfConfig(J=16, guide=BootstrapGuide()),
                          ivp_data_prefix=3)
        swarm = ParamSwarm.from_template(p, 16)
        out = estimate_ivps(m, sim.observations, grid, cfg, swarm, RngStream(2))
        assert np.array_equal(out.values["x0_offset"], swarm.values["x0_offset"])

    def test_ivp_estimate_near_smoother_mean(self):
        """IVP refinement lands near the likelihood-optimal initial offset."""
        m = CorrelatedBrownianMotion(d=1)
        truth = m.default_params().replace(x0_offset=2.0)
        obs_t = np.arange(1.0, 4.0)
        grid = build_time_grid(0.0, obs_t, 1)
        sim = simulate_pomp(m, truth, grid, RngStream(30))
        cfg = IgirfConfig(M=25, sigmas={"x0_offset": 0.5},
                          girf=GirfConfig(J=60, guide=BootstrapGuide(), islands=8),
                          cooling=0.9, ivp_data_prefix=3)
        start = ParamSwarm.from_template(m.default_params(), 60 * 8)
        out = estimate_ivps(m, sim.observations, grid, cfg, start, RngStream(31),
                            sweeps=25)
        est = out.point_estimate()["x0_offset"]
        # oracle: grid-search MLE of the offset plus its curvature-based sd
        offs = np.linspace(-1.0, 5.0, 601)
        lls = np.array([
            kalman_filter(m.linear_gaussian_spec({"obs_sd": 1.0, "drift": 0.0,
                                                  "x0_offset": o}, 0.0, obs_t),
                          sim.observations).loglik for o in offs])
        mle = offs[int(np.argmax(lls))]
        curv = np.polyfit(offs - mle, lls - lls.max(), 2)[0]
        posterior_sd = 1.0 / np.sqrt(-2.0 * curv)
        assert abs(est - mle) <= 3 * posterior_sd
