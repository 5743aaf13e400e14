from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandit import bandit_episodes, bandit_policy, meta_bias_grad
from nearl.autodiff import Adam, Sgd, Tensor
from nearl.policy import CombinedPolicy, FlatPolicy, InverseDynamicsModel, MetaPolicy
from nearl.rl import (
    AdvantageBuffer,
    PPOConfig,
    RolloutBatch,
    StaleBufferError,
    Trajectory,
    discounted_returns,
    gae,
    normalize_advantages,
    ppo_surrogate,
    ppo_update,
    reinforce_gradient,
)


def brute_returns(r, gamma):
    return np.array([sum(gamma ** (k - t) * r[k] for k in range(t, len(r))) for t in range(len(r))])


def brute_gae(r, v, gamma, lam):
    delta = [r[t] + gamma * v[t + 1] - v[t] for t in range(len(r))]
    return np.array([sum((gamma * lam) ** (k - t) * delta[k] for k in range(t, len(r))) for t in range(len(r))])


class TestReturns:
    def test_single_reward(self):
        np.testing.assert_array_equal(discounted_returns([1.0], 0.37), [1.0])

    def test_two_rewards(self):
        np.testing.assert_allclose(discounted_returns([1.0, 1.0], 0.9), [1.9, 1.0])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(0, 1))
    def test_matches_brute_force(self, r, gamma):
        np.testing.assert_allclose(discounted_returns(r, gamma), brute_returns(r, gamma), rtol=1e-10, atol=1e-10)

    def test_done_cuts_recursion(self):
        out = discounted_returns([1.0, 1.0, 1.0], 0.5, dones=[False, True, False])
        np.testing.assert_allclose(out, [1.5, 1.0, 1.0])

    def test_gamma_out_of_range(self):
        with pytest.raises(ValueError):
            discounted_returns([1.0], 1.5)


class TestGae:
    def test_lambda_zero_is_td_error(self):
        rng = np.random.default_rng(0)
        r, v = rng.normal(size=6), rng.normal(size=7)
        np.testing.assert_allclose(gae(r, v, 0.9, 0.0), r + 0.9 * v[1:] - v[:-1], rtol=1e-14)

    def test_lambda_one_zero_values_is_returns(self):
        r = np.random.default_rng(1).normal(size=8)
        np.testing.assert_allclose(gae(r, np.zeros(9), 0.95, 1.0), discounted_returns(r, 0.95), rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 25), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
    def test_matches_brute_force(self, n, gamma, lam, seed):
        rng = np.random.default_rng(seed)
        r, v = rng.normal(size=n), rng.normal(size=n + 1)
        np.testing.assert_allclose(gae(r, v, gamma, lam), brute_gae(r, v, gamma, lam), rtol=1e-9, atol=1e-9)

    def test_done_ignores_bootstrap(self):
        adv = gae([1.0], [0.5, 100.0], 0.9, 0.95, dones=[True])
        assert adv[0] == pytest.approx(0.5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gae([1.0, 2.0], [0.0, 0.0], 0.9, 0.9)

    def test_normalized_moments(self):
        adv = normalize_advantages(np.random.default_rng(2).normal(3.0, 5.0, size=500))
        assert abs(adv.mean()) < 1e-12 and adv.std() == pytest.approx(1.0, abs=1e-6)


class TestReinforce:
    mu, sigma, n = 0.7, 0.5, 100_000

    def per_sample_terms(self, trajs, baseline=0.0):
        x = np.array([t.preds_raw[0, 0] for t in trajs])
        return (x - self.mu) / self.sigma**2 * (-(x**2) - baseline)

    def test_bandit_matches_analytic_gradient(self):
        pol = bandit_policy(self.mu, self.sigma)
        trajs = bandit_episodes(pol, self.n, seed=1)
        est = meta_bias_grad(pol, reinforce_gradient(trajs, pol, whole_trajectory=True))
        se = self.per_sample_terms(trajs).std() / math.sqrt(self.n)
        assert abs(est - (-2 * self.mu)) <= 3 * se

    def test_baseline_keeps_bandit_unbiased(self):
        pol = bandit_policy(self.mu, self.sigma)
        trajs = bandit_episodes(pol, self.n, seed=2)
        est = meta_bias_grad(pol, reinforce_gradient(trajs, pol, whole_trajectory=True, baseline=-0.7))
        se = self.per_sample_terms(trajs, -0.7).std() / math.sqrt(self.n)
        assert abs(est - (-2 * self.mu)) <= 3 * se

    def test_zero_rewards_zero_gradient(self):
        pol = bandit_policy(0.3, 0.5)
        trajs = bandit_episodes(pol, 50, seed=3, reward_scale=0.0)
        for g in reinforce_gradient(trajs, pol):
            np.testing.assert_array_equal(g, 0.0)

    def test_doubling_rewards_doubles_gradient(self):
        pol = bandit_policy(0.3, 0.5)
        g1 = reinforce_gradient(bandit_episodes(pol, 50, seed=4), pol)
        g2 = reinforce_gradient(bandit_episodes(pol, 50, seed=4, reward_scale=2.0), pol)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(b, 2.0 * a, rtol=1e-12, atol=1e-15)

    def test_leaves_grad_buffers_alone(self):
        pol = bandit_policy(0.3, 0.5)
        for p in pol.parameters():
            p.grad = np.full(p.shape, 7.0)
        reinforce_gradient(bandit_episodes(pol, 5, seed=5), pol)
        assert all(np.all(p.grad == 7.0) for p in pol.parameters())

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            reinforce_gradient([], bandit_policy(0.0, 1.0))


def random_buffer(agent, rng, n=64, state_dim=4, normalize=True):
    s = rng.normal(size=(n, state_dim))
    smp = agent.act(s, rng)
    adv = rng.normal(size=n)
    if normalize:
        adv = normalize_advantages(adv)
    return AdvantageBuffer(s, smp.pred_raw, smp.pred, smp.action, smp.logprob, adv, rng.normal(size=n)), smp


def combined_agent(seed):
    rng = np.random.default_rng(seed)
    meta = MetaPolicy(4, (2, 3), rng=rng, init_log_std=-1.0, residual_scale=0.05)
    idm = InverseDynamicsModel(4, (2, 3), 2, rng=rng, delta_scale=0.05)
    return CombinedPolicy(meta, idm)


class TestPpo:
    def test_zero_advantages_leave_policy(self):
        agent = combined_agent(0)
        rng = np.random.default_rng(1)
        buf, _ = random_buffer(agent, rng)
        buf.advantages[:] = 0.0
        before = [p.data.copy() for p in agent.parameters()]
        ppo_update(buf, agent, None, PPOConfig(ent_coef=0.0), Adam(agent.parameters(), lr=1e-2), rng=rng)
        for p, b in zip(agent.parameters(), before):
            np.testing.assert_array_equal(p.data, b)

    def test_clipped_sample_has_zero_gradient(self):
        lp = Tensor(np.array([math.log(1.4)]), requires_grad=True)
        ppo_surrogate(lp, np.array([0.0]), np.array([1.0]), 0.2).sum().backward()
        assert lp.grad[0] == 0.0

    def test_unclipped_sample_has_gradient(self):
        lp = Tensor(np.array([math.log(1.1)]), requires_grad=True)
        ppo_surrogate(lp, np.array([0.0]), np.array([1.0]), 0.2).sum().backward()
        assert lp.grad[0] == pytest.approx(1.1)

    @pytest.mark.parametrize("seed", range(3))
    def test_unclipped_step_follows_reinforce_direction(self, seed):
        agent = combined_agent(seed)
        rng = np.random.default_rng(10 + seed)
        buf, smp = random_buffer(agent, rng, n=128)
        s, adv, lp = buf.states.copy(), buf.advantages.copy(), smp.logprob
        trajs = [Trajectory(s[i : i + 1], smp.pred_raw[i : i + 1], smp.pred[i : i + 1], smp.action[i : i + 1],
                            s[i : i + 1], np.zeros(1), np.array([True]), lp[i : i + 1]) for i in range(128)]
        ref = np.concatenate([g.reshape(-1) for g in reinforce_gradient(trajs, agent, weights=adv)])
        before = np.concatenate([p.data.reshape(-1).copy() for p in agent.parameters()])
        cfg = PPOConfig(clip_eps=math.inf, epochs=1, minibatch_size=128, max_grad_norm=None, target_kl=math.inf)
        ppo_update(buf, agent, None, cfg, Sgd(agent.parameters(), lr=1e-6), rng=rng)
        step = np.concatenate([p.data.reshape(-1) for p in agent.parameters()]) - before
        cos = step @ ref / (np.linalg.norm(step) * np.linalg.norm(ref))
        assert cos > 0.99

    def test_stale_buffer_rejected(self):
        agent = combined_agent(3)
        rng = np.random.default_rng(4)
        buf, _ = random_buffer(agent, rng)
        opt = Adam(agent.parameters(), lr=1e-3)
        ppo_update(buf, agent, None, PPOConfig(epochs=1), opt, rng=rng)
        with pytest.raises(StaleBufferError):
            ppo_update(buf, agent, None, PPOConfig(epochs=1), opt, rng=rng)

    def test_kl_early_stop(self):
        agent = combined_agent(5)
        rng = np.random.default_rng(6)
        buf, _ = random_buffer(agent, rng, n=256)
        stats = ppo_update(buf, agent, None, PPOConfig(epochs=10, target_kl=1e-9, minibatch_size=64),
                           Adam(agent.parameters(), lr=1e-2), rng=rng)
        assert stats.early_stopped and stats.epochs_run == 1

    def test_critic_regresses_to_returns(self):
        from nearl.autodiff import Mlp

        rng = np.random.default_rng(7)
        agent = FlatPolicy(2, 1, rng=rng)
        critic = Mlp(2, 1, hidden=(16,), rng=rng)
        s = rng.normal(size=(256, 2))
        target = s[:, 0] - 0.5 * s[:, 1]
        copt = Adam(critic.parameters(), lr=1e-2)
        first = last = None
        for _ in range(30):
            smp = agent.act(s, rng)
            buf = AdvantageBuffer(s, smp.pred_raw, smp.pred, smp.action, smp.logprob, np.zeros(256), target)
            stats = ppo_update(buf, agent, critic, PPOConfig(epochs=4, minibatch_size=64),
                               Adam(agent.parameters(), lr=0.0), copt, rng=rng)
            first = stats.value_loss if first is None else first
            last = stats.value_loss
        assert last < 0.1 * first


class TestRolloutBatch:
    def test_trajectories_split_on_done(self):
        T, n = 5, 2
        dones = np.zeros((T, n), dtype=bool)
        dones[1, 0] = True
        z = lambda *shape: np.zeros((T, n, *shape))
        batch = RolloutBatch(z(3), z(1), z(1), z(1), z(3), np.arange(10.0).reshape(T, n), dones, np.zeros((T, n)))
        lens = [len(t) for t in batch.trajectories()]
        assert lens == [2, 3, 5]
        assert batch.trajectories()[0].episode_return == pytest.approx(0.0 + 2.0)
