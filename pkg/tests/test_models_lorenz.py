"""Stochastic Lorenz-96: drift formula, Euler stepping, grid consistency."""

import numpy as np
import pytest

from girf import RngStream
from girf.errors import DimensionTooSmall, NonFiniteState
from girf.models import StochasticLorenz96
from girf.models.lorenz96 import lorenz_drift


class TestDrift:
    def test_zero_state(self):
        x = np.zeros((1, 5))
        assert np.allclose(lorenz_drift(x, 8.0), 8.0)

    def test_fixed_point(self):
        x = np.full((1, 6), 8.0)
        assert np.allclose(lorenz_drift(x, 8.0), 0.0)

    def test_hand_computed_d4(self):
        # cyclic formula evaluated by hand at x = (1, 2, 3, 4), F = 8
        x = np.array([[1.0, 2.0, 3.0, 4.0]])
        assert lorenz_drift(x, 8.0)[0].tolist() == [3.0, 5.0, 11.0, 1.0]

    def test_dimension_check(self):
        with pytest.raises(DimensionTooSmall):
            lorenz_drift(np.zeros((1, 3)), 8.0)
        with pytest.raises(DimensionTooSmall):
            StochasticLorenz96(d=3)


class TestTransition:
    def test_fixed_point_invariant_without_noise(self):
        m = StochasticLorenz96(d=8)
        p = m.default_params().view()
        p["sigma_p"] = 0.0
        x = np.full((3, 8), 8.0)
        out = m.transition_sample(p, 0.0, 0.5, x, RngStream(0).child(1))
        assert np.allclose(out, 8.0)

    def test_single_euler_step_from_origin(self):
        # one step of length 0.01 from 0: x <- 0 + F * h = 0.08
        m = StochasticLorenz96(d=5, euler_dt=0.01)
        p = m.default_params().view()
        p["sigma_p"] = 0.0
        out = m.transition_sample(p, 0.0, 0.01, np.zeros((1, 5)), RngStream(0).child(1))
        assert np.allclose(out, 0.08)

    def test_one_step_noise_scale(self):
        # 10^4 one-step replicates from the fixed point: sd ~ sqrt(0.01) = 0.1
        m = StochasticLorenz96(d=4, euler_dt=0.01)
        p = m.default_params().view()
        x = np.full((10_000, 4), 8.0)
        out = m.transition_sample(p, 0.0, 0.01, x, RngStream(7).child(1))
        sd = out.std(axis=0, ddof=1)
        assert np.allclose(sd, 0.1, rtol=0.05)

    def test_grid_consistency_bitwise(self):
        """Two deterministic half-interval steps equal one full step exactly."""
        m = StochasticLorenz96(d=6, euler_dt=0.01)
        p = m.default_params().view()
        x = np.random.default_rng(1).normal(size=(4, 6))
        half1 = m.skeleton_step(p, 0.0, 0.25, x)
        half2 = m.skeleton_step(p, 0.25, 0.5, half1)
        full = m.skeleton_step(p, 0.0, 0.5, x)
        assert np.array_equal(half2, full)

    def test_euler_dt_snapping(self):
        m = StochasticLorenz96(d=4, euler_dt=0.01)
        # sub-interval 0.125 does not divide 0.01 evenly: snapped to 12 steps
        assert m._n_steps(0.125) == 12
        assert m.effective_dt(0.125) == pytest.approx(0.125 / 12)

    def test_blowup_detection(self):
        m = StochasticLorenz96(d=4, euler_dt=0.5)  # absurd step forces divergence
        p = m.default_params().view()
        p["sigma_p"] = 0.0
        x = np.array([[100.0, -100.0, 100.0, -100.0]])  # quadratic term dominates
        with pytest.raises(NonFiniteState):
            for _ in range(40):
                x = m.transition_sample(p, 0.0, 0.5, x, RngStream(0).child(1))

    def test_initial_state_rule(self):
        m = StochasticLorenz96(d=5)
        x0 = m.init_sample(m.default_params().view(), 2, RngStream(0).child(0))
        assert np.allclose(x0[:, :-1], 0.0)
        assert np.allclose(x0[:, -1], 0.01)

    def test_rk4_skeleton_option(self):
        m = StochasticLorenz96(d=5, skeleton_method="rk4")
        p = m.default_params().view()
        x = np.random.default_rng(2).normal(size=(2, 5))
        euler = StochasticLorenz96(d=5).skeleton_step(p, 0.0, 0.1, x)
        rk4 = m.skeleton_step(p, 0.0, 0.1, x)
        assert not np.array_equal(euler, rk4)
        assert np.allclose(euler, rk4, atol=0.05)
