"""Engine behavior: weights, degenerate configurations, islands, determinism."""

import numpy as np
import pytest

from girf import (
    AnalyticForecastGuide,
    BootstrapGuide,
    GirfConfig,
    ResampleScheme,
    RngStream,
    build_time_grid,
    configure_apf,
    configure_bootstrap,
    girf_filter,
    girf_weight,
    kalman_filter,
    run_islands,
    simulate_pomp,
)
from girf.engine import _PROPAGATE, _RESAMPLE, girf_log_weight
from girf.errors import AllWeightsDegenerate, ConfigError, NonPositiveGuide
from girf.models import CorrelatedBrownianMotion
from girf.resampling import normalize_log_weights, resample_ancestors


def make_cbm_setup(d=2, N=5, S=2, seed=11, alpha=0.0):
    m = CorrelatedBrownianMotion(d=d, alpha=alpha)
    p = m.default_params()
    obs_t = np.arange(1.0, N + 1.0)
    grid = build_time_grid(0.0, obs_t, S)
    sim = simulate_pomp(m, p, grid, RngStream(seed))
    return m, p, grid, sim.observations


class TestGirfWeight:
    def test_plain_ratio(self):
        assert girf_weight(2.0, 1.0) == pytest.approx(2.0)

    def test_observation_branch(self):
        assert girf_weight(2.0, 4.0, 0.5) == pytest.approx(0.25)

    def test_first_substep_boundary(self):
        # u at t0 is identically 1, so the first weight is u itself
        assert girf_weight(0.73, 1.0) == pytest.approx(0.73)

    def test_rejects_nonpositive(self):
        with pytest.raises(NonPositiveGuide):
            girf_weight(0.0, 1.0)
        with pytest.raises(NonPositiveGuide):
            girf_weight(1.0, 1.0, 0.0)

    def test_log_weight_cancels_bitwise(self):
        log_u_prev = np.array([-321.0541, 17.25, -3.5e-13])
        log_u_now = np.array([-1.0, 2.0, 3.0])
        out = girf_log_weight(log_u_now, log_u_prev, log_u_prev)
        assert np.array_equal(out, log_u_now)


class TestBootstrapEquivalence:
    def test_bitwise_match_with_reference_bootstrap(self):
        """cond_loglik matches a hand-rolled bootstrap filter on shared streams."""
        m, p, grid1, data = make_cbm_setup(d=2, N=6, S=1)
        J = 64
        cfg = GirfConfig(J=J, guide=configure_bootstrap(m))
        rng = RngStream(99)
        out = girf_filter(m, p, data, grid1, cfg, rng)

        view = p.view()
        states = m.init_sample(view, J, rng.child(0, 0))
        ref = np.empty(grid1.n_steps)
        for k in range(1, grid1.n_steps + 1):
            states = m.transition_sample(view, grid1.times[k - 1], grid1.times[k],
                                         states, rng.child(k, _PROPAGATE))
            logg = m.measurement_logdensity(view, k, data[k - 1], states)
            mx = logg.max()
            ref[k - 1] = mx + np.log(np.mean(np.exp(logg - mx)))
            probs, _ = normalize_log_weights(logg)
            anc = resample_ancestors(probs, cfg.scheme, rng.child(k, _RESAMPLE))
            states = states[anc]
        assert np.array_equal(out.cond_loglik, ref)

    def test_bootstrap_close_to_kalman(self):
        # d=1, J=10^4: bootstrap log likelihood within 0.2 of the exact value
        m, p, grid, data = make_cbm_setup(d=1, N=10, S=1, seed=4)
        cfg = GirfConfig(J=10_000, guide=configure_bootstrap(m))
        out = girf_filter(m, p, data, grid, cfg, RngStream(5))
        exact = kalman_filter(m.linear_gaussian_spec(p.view(), 0.0, grid.obs_times),
                              data).loglik
        assert abs(out.loglik - exact) < 0.2

    def test_bootstrap_guide_requires_s1(self):
        m, p, grid, data = make_cbm_setup(d=1, N=3, S=2)
        cfg = GirfConfig(J=10, guide=configure_bootstrap(m))
        with pytest.raises(ConfigError):
            girf_filter(m, p, data, grid, cfg, RngStream(0))


class TestApf:
    def test_final_time_has_no_lookahead(self):
        """At the last observation the APF guide equals the measurement density."""
        m, p, grid, data = make_cbm_setup(d=2, N=3, S=1)
        guide = configure_apf(m)
        view = p.view()
        states = np.zeros((5, 2))
        k_last = grid.n_steps
        log_u, log_g, _ = guide.evaluate(m, view, states, data, grid, k_last, None,
                                         RngStream(0).child(1))
        assert np.array_equal(log_u, log_g)

    def test_apf_reasonable_at_low_dimension(self):
        m, p, grid, data = make_cbm_setup(d=5, N=10, S=1, seed=2)
        cfg = GirfConfig(J=4000, guide=configure_apf(m))
        out = girf_filter(m, p, data, grid, cfg, RngStream(3))
        exact = kalman_filter(m.linear_gaussian_spec(p.view(), 0.0, grid.obs_times),
                              data).loglik
        assert abs(out.loglik - exact) < 2.0


class TestFilterOutput:
    def test_loglik_is_sum_of_cond(self):
        m, p, grid, data = make_cbm_setup()
        cfg = GirfConfig(J=50, guide=AnalyticForecastGuide("exact", B=2))
        out = girf_filter(m, p, data, grid, cfg, RngStream(1))
        assert out.loglik == np.sum(out.cond_loglik)

    def test_ess_bounds(self):
        m, p, grid, data = make_cbm_setup()
        cfg = GirfConfig(J=50, guide=AnalyticForecastGuide("exact", B=2))
        out = girf_filter(m, p, data, grid, cfg, RngStream(1))
        assert np.all(out.ess_trace >= 1.0 - 1e-9)
        assert np.all(out.ess_trace <= 50 + 1e-9)

    def test_csv_and_json(self, tmp_path):
        m, p, grid, data = make_cbm_setup()
        cfg = GirfConfig(J=50, guide=AnalyticForecastGuide("exact", B=2))
        out = girf_filter(m, p, data, grid, cfg, RngStream(1))
        d = out.to_json_dict()
        assert d["loglik"] == out.loglik
        path = tmp_path / "trace.csv"
        out.write_csv(path, grid)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == grid.n_steps + 1
        assert lines[0] == "n,s,t,cond_loglik,ess"

    def test_filter_failure_reports_grid_index(self):
        m, p, grid, data = make_cbm_setup(d=1, N=3, S=1)
        bad = data.copy()
        bad[1] = 1e9  # impossible observation kills every particle weight

        class HardZero(CorrelatedBrownianMotion):
            def measurement_logdensity(self, params, n, y, states):
                out = super().measurement_logdensity(params, n, y, states)
                return np.where(out < -1e6, -np.inf, out)

        hm = HardZero(d=1)
        cfg = GirfConfig(J=20, guide=configure_bootstrap(hm))
        with pytest.raises(AllWeightsDegenerate) as err:
            girf_filter(hm, p, bad, grid, cfg, RngStream(0))
        assert err.value.grid_index == 2


class TestIslands:
    def test_single_island_identical_to_plain_filter(self):
        m, p, grid, data = make_cbm_setup()
        cfg = GirfConfig(J=40, guide=AnalyticForecastGuide("exact", B=2), islands=1)
        a = girf_filter(m, p, data, grid, cfg, RngStream(12))
        b = run_islands(m, p, data, grid, cfg, RngStream(12))
        assert np.array_equal(a.cond_loglik, b.cond_loglik)
        assert np.array_equal(a.terminal_swarm.states, b.terminal_swarm.states)

    def test_two_islands_mean_in_log_space(self):
        m, p, grid, data = make_cbm_setup()
        cfg2 = GirfConfig(J=40, guide=AnalyticForecastGuide("exact", B=2), islands=2)
        combined = run_islands(m, p, data, grid, cfg2, RngStream(12))
        a, b = (o.loglik for o in combined.island_outputs)
        expected = np.logaddexp(a, b) - np.log(2)
        assert combined.loglik == pytest.approx(expected, abs=1e-9)

    def test_island_unbiasedness(self):
        m, p, grid, data = make_cbm_setup(d=2, N=5, S=2, seed=21)
        exact = kalman_filter(m.linear_gaussian_spec(p.view(), 0.0, grid.obs_times),
                              data).loglik
        cfg = GirfConfig(J=50, guide=AnalyticForecastGuide("exact", B=2), islands=4)
        R = 300
        ratios = np.empty(R)
        for r in range(R):
            out = run_islands(m, p, data, grid, cfg, RngStream(40_000 + r))
            ratios[r] = np.exp(out.loglik - exact)
        se = ratios.std(ddof=1) / np.sqrt(R)
        assert abs(ratios.mean() - 1.0) <= 3 * se

    def test_thread_count_does_not_change_results(self):
        m, p, grid, data = make_cbm_setup()
        cfg = GirfConfig(J=40, guide=AnalyticForecastGuide("exact", B=2), islands=3)
        serial = run_islands(m, p, data, grid, cfg, RngStream(8), threads=1)
        threaded = run_islands(m, p, data, grid, cfg, RngStream(8), threads=3)
        assert np.array_equal(serial.cond_loglik, threaded.cond_loglik)
        assert np.array_equal(serial.terminal_swarm.states, threaded.terminal_swarm.states)
        assert serial.loglik == threaded.loglik


class TestDeterminism:
    def test_same_seed_bitwise(self):
        m, p, grid, data = make_cbm_setup(d=3, N=4, S=3)
        for scheme in ("systematic", "multinomial"):
            cfg = GirfConfig(J=30, guide=AnalyticForecastGuide("exact", B=2),
                             scheme=ResampleScheme(scheme), record_grid_means=True)
            a = girf_filter(m, p, data, grid, cfg, RngStream(77))
            b = girf_filter(m, p, data, grid, cfg, RngStream(77))
            assert np.array_equal(a.cond_loglik, b.cond_loglik)
            assert np.array_equal(a.grid_means, b.grid_means)
            assert np.array_equal(a.terminal_swarm.states, b.terminal_swarm.states)

    def test_optional_ess_triggered_mode(self):
        # off by default; when enabled the filter still produces finite output
        m, p, grid, data = make_cbm_setup()
        cfg = GirfConfig(J=50, guide=AnalyticForecastGuide("exact", B=2),
                         ess_threshold=0.5)
        out = girf_filter(m, p, data, grid, cfg, RngStream(2))
        assert np.isfinite(out.loglik)
        default = GirfConfig(J=50, guide=AnalyticForecastGuide("exact", B=2))
        assert default.ess_threshold is None
