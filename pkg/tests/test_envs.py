from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nearl.envs import (
    EnvError,
    EnvState,
    LinearSystem,
    NuisanceConfig,
    PointMass2D,
    augment_nuisance,
    augmented_spec,
    baseline_returns,
    dlqr,
    expert_action,
    make_env,
)

ENV_NAMES = ["PointMass2D", "Pendulum", "LinearSystem"]


class TestStep:
    def test_point_mass_semi_implicit_euler(self):
        env = PointMass2D(dt=0.1)
        nxt, _, done = env.step(EnvState(np.zeros(4), 0), [1.0, 0.0])
        np.testing.assert_allclose(nxt.vector, [0.01, 0.0, 0.1, 0.0], atol=1e-15)
        assert nxt.t == 1 and not done

    def test_pendulum_rest_is_fixed_point(self):
        env = make_env("Pendulum")
        nxt, _, _ = env.step(EnvState(np.array([1.0, 0.0, 0.0]), 0), [0.0])
        np.testing.assert_array_equal(nxt.vector, [1.0, 0.0, 0.0])

    def test_linear_system_matrix_oracle(self):
        env = LinearSystem(A=np.eye(2), B=np.eye(2))
        nxt, _, _ = env.step(EnvState(np.array([1.0, 0.0]), 0), [-1.0, 0.0])
        np.testing.assert_array_equal(nxt.vector, [0.0, 0.0])

    def test_default_linear_system_matches_matrix_product(self):
        env = make_env("LinearSystem")
        rng = np.random.default_rng(0)
        x, u = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        nxt, _, _ = env.step(EnvState(x, 0), u)
        np.testing.assert_allclose(nxt.vector, env.A @ x + env.B @ u, rtol=1e-14)

    def test_action_is_clamped(self):
        env = PointMass2D(dt=0.1)
        a, _, _ = env.step(EnvState(np.zeros(4), 0), [10.0, -10.0])
        b, _, _ = env.step(EnvState(np.zeros(4), 0), [2.0, -2.0])
        np.testing.assert_array_equal(a.vector, b.vector)

    def test_done_at_horizon(self):
        env = make_env("LinearSystem", horizon=3)
        s = env.reset()
        flags = []
        for _ in range(3):
            s, _, done = env.step(s, [0.0, 0.0])
            flags.append(done)
        assert flags == [False, False, True]

    def test_non_finite_rejected(self):
        env = make_env("PointMass2D")
        with pytest.raises(EnvError):
            env.step(env.reset(), [math.nan, 0.0])

    @pytest.mark.parametrize("name", ENV_NAMES)
    def test_step_is_pure(self, name):
        env = make_env(name)
        s = env.reset(seed=3)
        a = np.full(env.spec.action_dim, 0.7)
        first = env.step(s, a)
        second = env.step(s, a)
        np.testing.assert_array_equal(first[0].vector, second[0].vector)
        assert first[1] == second[1]

    @pytest.mark.parametrize("name", ENV_NAMES)
    def test_rewards_within_documented_bounds(self, name):
        env = make_env(name)
        rng = np.random.default_rng(1)
        x = env.sample_start(rng, 64) * 3.0
        lo, hi = env.reward_bounds
        for _ in range(env.spec.horizon):
            u = rng.uniform(env.spec.action_low, env.spec.action_high, size=(64, env.spec.action_dim))
            x, r = env.step_batch(x, u)
            assert np.all((r >= lo) & (r <= hi))

    def test_unknown_env(self):
        with pytest.raises(EnvError, match="unknown environment"):
            make_env("Ant")


class TestReset:
    @pytest.mark.parametrize("name", ENV_NAMES)
    def test_fixed_start_is_nominal(self, name):
        env = make_env(name)
        s = env.reset()
        np.testing.assert_array_equal(s.vector, env.nominal_start())
        assert s.t == 0

    @pytest.mark.parametrize("name", ENV_NAMES)
    def test_same_seed_same_state(self, name):
        env = make_env(name)
        np.testing.assert_array_equal(env.reset(seed=42).vector, env.reset(seed=42).vector)

    @pytest.mark.parametrize("name", ENV_NAMES)
    def test_monte_carlo_start_mean(self, name):
        env = make_env(name)
        x = env.sample_start(np.random.default_rng(5), 1000)
        sigma = x.std(axis=0)
        err = np.abs(x.mean(axis=0) - env.start_mean())
        assert np.all(err <= 3 * sigma / math.sqrt(1000) + 1e-12)


class TestExpert:
    @pytest.mark.parametrize("name", ["PointMass2D", "LinearSystem"])
    def test_riccati_matches_scipy(self, name):
        env = make_env(name)
        P = scipy.linalg.solve_discrete_are(env.A, env.B, env.Q, env.R)
        K = np.linalg.solve(env.R + env.B.T @ P @ env.B, env.B.T @ P @ env.A)
        np.testing.assert_allclose(env.P, P, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(env.K, K, rtol=1e-8, atol=1e-10)

    def test_dlqr_scalar_closed_form(self):
        # x' = x + u, q = r = 1: p = 1 + p - p^2/(1+p)  =>  p^2 - p - 1 = 0
        K, P = dlqr(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
        golden = (1 + math.sqrt(5)) / 2
        assert P[0, 0] == pytest.approx(golden, rel=1e-10)
        assert K[0, 0] == pytest.approx(golden / (1 + golden), rel=1e-10)

    def test_linear_system_zero_state_zero_action(self):
        env = make_env("LinearSystem")
        np.testing.assert_array_equal(expert_action(env, np.zeros(2)), [0.0, 0.0])

    @pytest.mark.parametrize("name", ["PointMass2D", "LinearSystem"])
    def test_expert_return_tracks_lqr_value(self, name):
        env = make_env(name)
        x0 = env.sample_start(np.random.default_rng(0), 20)
        _, rs = env.expert_rollout(x0)
        ratio = rs.sum(axis=0) / env.lqr_value(x0)
        # finite horizon can only shave cost off the infinite-horizon value
        assert np.all(ratio >= 0.95) and np.all(ratio <= 1.0 + 1e-6)

    def test_pendulum_swing_up(self):
        env = make_env("Pendulum")
        xs, _ = env.expert_rollout(env.nominal_start())
        assert np.any(np.abs(env.upright_error(xs[:, 0])) < 0.1)

    @pytest.mark.parametrize("name", ENV_NAMES)
    def test_expert_dominates_random(self, name):
        b = baseline_returns(make_env(name), n_seeds=20)
        assert b.random <= 5.0 * b.expert < 0.0


class TestNuisance:
    def test_zero_extra_dims_is_identity(self):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(augment_nuisance(x, NuisanceConfig(extra_dims=0)), x)

    def test_duplicated_sensors(self):
        x = np.array([4.0, 5.0, 6.0])
        out = augment_nuisance(x, NuisanceConfig(extra_dims=2, kind="duplicated_sensors"))
        np.testing.assert_array_equal(out, [4.0, 5.0, 6.0, 4.0, 5.0])

    def test_random_walk_reproducible(self):
        cfg = NuisanceConfig(extra_dims=3, kind="random_walk", seed=9)

        def stream():
            rng = np.random.default_rng(cfg.seed)
            prev = augment_nuisance(np.zeros(2), cfg, rng=rng)[2:]
            out = [prev]
            for _ in range(5):
                prev = augment_nuisance(np.zeros(2), cfg, prev=prev, rng=rng)[2:]
                out.append(prev)
            return np.stack(out)

        a, b = stream(), stream()
        np.testing.assert_array_equal(a, b)
        assert np.any(a[-1] != 0.0)

    def test_augmented_spec_keeps_controllable_indices(self):
        spec = augmented_spec(make_env("PointMass2D").spec, NuisanceConfig(extra_dims=64))
        assert spec.state_dim == 68
        assert spec.controllable_indices == (2, 3)

    def test_negative_extra_dims_rejected(self):
        with pytest.raises(ValueError):
            NuisanceConfig(extra_dims=-1)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.integers(1, 5), elements=st.floats(-5, 5)), st.integers(0, 7))
    def test_augmentation_preserves_base_state(self, x, k):
        for kind in ("gaussian_noise", "random_walk", "duplicated_sensors"):
            out = augment_nuisance(x, NuisanceConfig(extra_dims=k, kind=kind))
            assert out.shape == (x.size + k,)
            np.testing.assert_array_equal(out[: x.size], x)
