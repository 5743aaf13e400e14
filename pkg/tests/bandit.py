"""One-step Gaussian bandit built from the combined policy, shared by the RL and acceptance tests.

The meta policy has no hidden layer, so its bias is the mean ``mu`` of the
Gaussian; the reward is ``-x^2`` and the analytic gradient of the expected
reward with respect to ``mu`` is ``-2 mu``.
"""

from __future__ import annotations

import math

import numpy as np

from nearl.policy import CombinedPolicy, InverseDynamicsModel, MetaPolicy
from nearl.rl import Trajectory


def bandit_policy(mu: float, sigma: float, seed: int = 0) -> CombinedPolicy:
    rng = np.random.default_rng(seed)
    meta = MetaPolicy(1, (0,), hidden=(), rng=rng, init_log_std=math.log(sigma))
    meta.net.layers[0][0].data[:] = 0.0
    meta.net.layers[0][1].data[:] = mu
    idm = InverseDynamicsModel(1, (0,), 1, hidden=(), rng=rng)
    return CombinedPolicy(meta, idm)


def bandit_episodes(pol: CombinedPolicy, n: int, seed: int, reward_scale: float = 1.0) -> list[Trajectory]:
    rng = np.random.default_rng(seed)
    s = np.zeros((n, 1))
    smp = pol.act(s, rng)
    r = -reward_scale * smp.pred[:, 0] ** 2
    lp = smp.logprob
    return [Trajectory(s[i : i + 1], smp.pred_raw[i : i + 1], smp.pred[i : i + 1], smp.action[i : i + 1],
                       s[i : i + 1], r[i : i + 1], np.array([True]), lp[i : i + 1]) for i in range(n)]


def meta_bias_grad(pol, grads):
    params = pol.parameters()
    return float(grads[params.index(pol.meta.net.layers[0][1])][0])
