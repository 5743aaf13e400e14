"""State-only demonstrations: generation, storage, behaviour cloning of the
meta policy, injection into the discriminator's real side, and demo-state resets.

Demo files are JSON Lines, one episode per line::

    {"env": "PointMass2D", "seed": 3, "states": [[...], [...], ...]}

No action is ever written or kept.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Adam, Tensor, no_grad
from .discriminator import TransitionBatch
from .envs import Env, EnvState, RiccatiError
from .policy import MetaPolicy


class DemoError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DemoDataset:
    episodes: tuple[np.ndarray, ...]
    env: str
    state_dim: int
    expert: str = "scripted"
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        for ep in self.episodes:
            if ep.ndim != 2 or ep.shape[1] != self.state_dim:
                raise DemoError(f"episode has shape {ep.shape}, expected (T, {self.state_dim})")
            if len(ep) < 2:
                raise DemoError("every demo episode needs at least two states")
            if not np.all(np.isfinite(ep)):
                raise DemoError("demo states must be finite")
            ep.setflags(write=False)

    def __len__(self) -> int:
        return len(self.episodes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DemoDataset):
            return NotImplemented
        return (
            self.env == other.env
            and self.state_dim == other.state_dim
            and self.seeds == other.seeds
            and len(self.episodes) == len(other.episodes)
            and all(np.array_equal(a, b) for a, b in zip(self.episodes, other.episodes))
        )

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All consecutive ``(s_i, s_{i+1})`` pairs, stacked."""
        if not self.episodes:
            return np.zeros((0, self.state_dim)), np.zeros((0, self.state_dim))
        s = np.concatenate([ep[:-1] for ep in self.episodes])
        s_next = np.concatenate([ep[1:] for ep in self.episodes])
        return s, s_next

    def all_states(self) -> np.ndarray:
        if not self.episodes:
            return np.zeros((0, self.state_dim))
        return np.concatenate(self.episodes)

    # -- persistence --------------------------------------------------------
    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        seeds = self.seeds or tuple(range(len(self.episodes)))
        with open(path, "w", encoding="utf-8") as fh:
            for seed, ep in zip(seeds, self.episodes):
                # repr of a Python float round-trips exactly
                fh.write(json.dumps({"env": self.env, "seed": int(seed), "states": ep.tolist()}) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, expect_env: str | None = None,
             expect_dim: int | None = None) -> "DemoDataset":
        episodes, seeds, env, dim = [], [], None, None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DemoError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
                if set(rec) != {"env", "seed", "states"}:
                    raise DemoError(f"{path}:{lineno}: record keys must be env, seed, states")
                states = np.asarray(rec["states"], dtype=np.float64)
                if states.ndim != 2:
                    raise DemoError(f"{path}:{lineno}: states must be a list of vectors")
                if env is None:
                    env, dim = rec["env"], states.shape[1]
                elif rec["env"] != env:
                    raise DemoError(f"{path}:{lineno}: mixed environments {env!r} and {rec['env']!r}")
                if states.shape[1] != dim:
                    raise DemoError(f"{path}:{lineno}: state width {states.shape[1]} != {dim}")
                episodes.append(states)
                seeds.append(int(rec["seed"]))
        if env is None:
            if expect_env is None or expect_dim is None:
                raise DemoError(f"{path}: empty demo file")
            env, dim = expect_env, expect_dim
        if expect_env is not None and env != expect_env:
            raise DemoError(f"demos are for {env!r}, run uses {expect_env!r}")
        if expect_dim is not None and dim != expect_dim:
            raise DemoError(f"demo state width {dim} != env state width {expect_dim}")
        return cls(tuple(episodes), env, dim, seeds=tuple(seeds))


def generate_demos(env: Env, n_episodes: int, seed: int = 0, expert=None) -> DemoDataset:
    """Roll out the scripted expert from seeded random starts; keep states only."""
    expert = expert if expert is not None else env.expert_action
    episodes, seeds = [], []
    for k in range(n_episodes):
        ep_seed = seed * 100_003 + k
        x = env.reset(ep_seed).vector[None]
        states = [x[0]]
        for _ in range(env.spec.horizon):
            x, _ = env.step_batch(x, expert(x))
            states.append(x[0])
        episodes.append(np.array(states))
        seeds.append(ep_seed)
    return DemoDataset(tuple(episodes), env.spec.name, env.spec.state_dim, seeds=tuple(seeds))


def bc_loss(pi: MetaPolicy, s, s_next) -> Tensor:
    """Mean over pairs of ``|s'_f - mean(pi(s))|^2`` (squared norm per pair)."""
    s = np.asarray(s, dtype=np.float64)
    target = np.asarray(s_next, dtype=np.float64)[..., list(pi.out_indices)]
    if s.shape[-1] != pi.state_dim:
        raise DemoError(f"demo state width {s.shape[-1]} != policy input width {pi.state_dim}")
    pred = pi.mean_tensor(s)
    return (pred - Tensor(target)).square().sum(axis=-1).mean()


def demo_bc_loss(pi: MetaPolicy, demos: DemoDataset) -> float:
    s, s_next = demos.pairs()
    with no_grad():
        return float(bc_loss(pi, s, s_next).data)


def pretrain(pi: MetaPolicy, demos: DemoDataset, epochs: int, lr: float = 1e-3,
             minibatch_size: int = 256, rng: np.random.Generator | None = None,
             optimizer: Adam | None = None) -> list[float]:
    """Adam minimisation of the cloning loss; returns the full-data loss after each epoch."""
    if epochs <= 0:
        return []
    s, s_next = demos.pairs()
    if len(s) == 0:
        raise DemoError("cannot pretrain on an empty demo set")
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = optimizer if optimizer is not None else Adam(pi.body_parameters(), lr=lr)
    history = []
    n = len(s)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, minibatch_size):
            idx = order[start : start + minibatch_size]
            loss = bc_loss(pi, s[idx], s_next[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with no_grad():
            history.append(float(bc_loss(pi, s, s_next).data))
    return history


def initial_state_sample(demos: DemoDataset, rng: np.random.Generator, n: int | None = None):
    """Uniformly drawn demo state(s) to start an episode from."""
    states = demos.all_states()
    if len(states) == 0:
        raise DemoError("cannot sample initial states from an empty demo set")
    if n is None:
        return EnvState(states[rng.integers(len(states))].copy(), 0)
    return states[rng.integers(len(states), size=n)].copy()


def inject_demos(batch: TransitionBatch, demo_pairs: np.ndarray, fraction: float,
                 rng: np.random.Generator) -> TransitionBatch:
    """Replace ``round(fraction * n_real)`` real rows with uniformly drawn demo rows.

    ``demo_pairs`` holds rows already laid out like ``batch.real``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(batch.real)
    k = int(round(fraction * n))
    if k == 0 or len(demo_pairs) == 0:
        return batch
    real = np.array(batch.real, copy=True)
    rows = rng.choice(n, size=k, replace=False)
    real[rows] = demo_pairs[rng.integers(len(demo_pairs), size=k)]
    return TransitionBatch(real, batch.fake)
