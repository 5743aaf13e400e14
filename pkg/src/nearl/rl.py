"""Reward maximisation for the combined policy: returns, GAE, REINFORCE and PPO."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .autodiff import Adam, Mlp, Tensor, minimum, no_grad


class Transition(NamedTuple):
    s: np.ndarray
    pred: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: float
    done: bool


@dataclass
class Trajectory:
    """One contiguous episode (or episode fragment) of a single env instance."""

    states: np.ndarray
    preds_raw: np.ndarray
    preds: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    logprobs_joint: np.ndarray

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "preds", "actions", "next_states", "dones", "logprobs_joint"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"trajectory field {name} has inconsistent length")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[t], self.preds[t], self.actions[t], self.next_states[t],
                       float(self.rewards[t]), bool(self.dones[t]))
            for t in range(len(self))
        ]


def discounted_returns(rewards, gamma: float, dones=None) -> np.ndarray:
    """``R_t = r_t + gamma R_{t+1}``; a done at ``t`` cuts the recursion.

    Works on ``(T,)`` or time-major ``(T, N)`` arrays.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        if dones is not None:
            running = running * (1.0 - np.asarray(dones[t], dtype=np.float64))
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def gae(rewards, values, gamma: float, lam: float, dones=None) -> np.ndarray:
    """Generalized advantage estimates.

    ``values`` has one more entry along time than ``rewards`` (the bootstrap).
    A done at ``t`` means ``values[t+1]`` belongs to a fresh episode and is not used.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(rewards) + 1:
        raise ValueError("values must have length len(rewards) + 1")
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 if dones is None else 1.0 - np.asarray(dones[t], dtype=np.float64)
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv


@dataclass
class RolloutBatch:
    """Time-major rollout arrays, shape ``(T, n_envs, ...)``."""

    states: np.ndarray
    preds_raw: np.ndarray
    preds: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    logprobs: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.rewards.size

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(arr.shape[0] * arr.shape[1], *arr.shape[2:])

    def trajectories(self) -> list[Trajectory]:
        """Split into per-env contiguous episodes, in env-index order."""
        out = []
        T, n = self.rewards.shape
        for e in range(n):
            start = 0
            for t in range(T):
                if self.dones[t, e] or t == T - 1:
                    sl = slice(start, t + 1)
                    out.append(Trajectory(
                        self.states[sl, e], self.preds_raw[sl, e], self.preds[sl, e], self.actions[sl, e],
                        self.next_states[sl, e], self.rewards[sl, e], self.dones[sl, e], self.logprobs[sl, e],
                    ))
                    start = t + 1
        return out


@dataclass
class AdvantageBuffer:
    """Flattened PPO inputs. Valid for exactly one ``ppo_update`` call."""

    states: np.ndarray
    preds_raw: np.ndarray
    preds: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    consumed: bool = False

    def __len__(self) -> int:
        return len(self.returns)

    @classmethod
    def from_rollout(cls, batch: RolloutBatch, critic: Mlp, gamma: float, lam: float,
                     normalize: bool = True) -> "AdvantageBuffer":
        T, n = batch.rewards.shape
        with no_grad():
            v = critic(batch.flat("states")).data.reshape(T, n)
            v_last = critic(batch.next_states[-1]).data.reshape(1, n)
        values = np.concatenate([v, v_last], axis=0)
        adv = gae(batch.rewards, values, gamma, lam, batch.dones)
        ret = (adv + v).reshape(-1)
        adv = adv.reshape(-1)
        if normalize:
            adv = normalize_advantages(adv)
        return cls(batch.flat("states"), batch.flat("preds_raw"), batch.flat("preds"), batch.flat("actions"),
                   batch.flat("logprobs"), adv, ret)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


class StaleBufferError(RuntimeError):
    pass


def _flat_grads(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) for p in params
    ])


def reinforce_gradient(trajectories: Sequence[Trajectory], agent, gamma: float = 1.0,
                       whole_trajectory: bool = False, baseline: float | np.ndarray | None = None,
                       weights: np.ndarray | None = None) -> list[np.ndarray]:
    """Score-function estimate of the gradient of expected return.

    Each step contributes ``grad log p(s_hat', a | s) * w_t`` where ``w_t`` is the
    discounted return-to-go (default) or the whole-episode return
    (``whole_trajectory=True``, the literal form). ``baseline`` is subtracted from
    the weights; pass per-step values flattened in trajectory order or a scalar.
    ``weights`` replaces the return-based weights outright (e.g. GAE advantages).
    The result is averaged over trajectories and returned per parameter
    (ascent direction); parameter ``grad`` buffers are left as they were.
    """
    if len(trajectories) == 0:
        raise ValueError("empty trajectory batch")
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
    elif whole_trajectory:
        w = np.concatenate([np.full(len(tr), tr.episode_return) for tr in trajectories])
    else:
        w = np.concatenate([discounted_returns(tr.rewards, gamma) for tr in trajectories])
    if baseline is not None:
        w = w - baseline
    cat = lambda name: np.concatenate([getattr(tr, name) for tr in trajectories])
    params = agent.parameters()
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    lp = agent.log_prob(cat("states"), cat("preds_raw"), cat("preds"), cat("actions"))
    ((lp * Tensor(w)).sum() * (1.0 / len(trajectories))).backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, g in zip(params, saved):
        p.grad = g
    return grads


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 256
    ent_coef: float = 0.0
    vf_coef: float = 1.0
    target_kl: float = 0.03
    max_grad_norm: float | None = 0.5


@dataclass
class PPOStats:
    approx_kl: float = 0.0
    clip_frac: float = 0.0
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    epochs_run: int = 0
    early_stopped: bool = False


def clip_grad_norm(params: Sequence[Tensor], max_norm: float | None) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def ppo_surrogate(logp_new: Tensor, logp_old: np.ndarray, adv: np.ndarray, clip_eps: float) -> Tensor:
    """Per-sample clipped surrogate ``min(r A, clip(r) A)`` (to be maximised)."""
    ratio = (logp_new - Tensor(logp_old)).exp()
    unclipped = ratio * Tensor(adv)
    if np.isinf(clip_eps):
        return unclipped
    clipped = ratio.clip(1.0 - clip_eps, 1.0 + clip_eps) * Tensor(adv)
    return minimum(unclipped, clipped)


def ppo_update(buffer: AdvantageBuffer, agent, critic: Mlp | None, cfg: PPOConfig,
               policy_opt, critic_opt=None, rng: np.random.Generator | None = None) -> PPOStats:
    """Clipped-surrogate maximisation over the joint log-probability.

    The critic, when given, is regressed onto ``buffer.returns`` in the same
    minibatches. Epochs stop early once the approximate KL of the joint policy
    exceeds ``cfg.target_kl``.
    """
    if buffer.consumed:
        raise StaleBufferError("advantage buffer was already used for a PPO phase")
    buffer.consumed = True
    n = len(buffer)
    mb = min(cfg.minibatch_size, n)
    params = agent.parameters()
    stats = PPOStats()
    rng = rng if rng is not None else np.random.default_rng(0)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        kls, clips, pls, vls = [], [], [], []
        for start in range(0, n, mb):
            idx = order[start : start + mb]
            lp = agent.log_prob(buffer.states[idx], buffer.preds_raw[idx], buffer.preds[idx], buffer.actions[idx])
            surr = ppo_surrogate(lp, buffer.logp_old[idx], buffer.advantages[idx], cfg.clip_eps)
            loss = -surr.mean()
            if cfg.ent_coef:
                loss = loss - cfg.ent_coef * agent.entropy()
            policy_opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.max_grad_norm)
            policy_opt.step()

            log_ratio = lp.data - buffer.logp_old[idx]
            kls.append(float(np.mean(np.expm1(log_ratio) - log_ratio)))
            clips.append(float(np.mean(np.abs(np.exp(log_ratio) - 1.0) > cfg.clip_eps)))
            pls.append(float(loss.data))

            if critic is not None:
                v = critic(buffer.states[idx])
                vloss = (v.reshape(-1) - Tensor(buffer.returns[idx])).square().mean() * cfg.vf_coef
                critic_opt.zero_grad()
                vloss.backward()
                clip_grad_norm(critic.parameters(), cfg.max_grad_norm)
                critic_opt.step()
                vls.append(float(vloss.data))
        stats.epochs_run = epoch + 1
        stats.approx_kl = float(np.mean(kls))
        stats.clip_frac = float(np.mean(clips))
        stats.policy_loss = float(np.mean(pls))
        stats.value_loss = float(np.mean(vls)) if vls else 0.0
        if stats.approx_kl > cfg.target_kl:
            stats.early_stopped = True
            break
    with no_grad():
        stats.entropy = float(agent.entropy().data)
    return stats
