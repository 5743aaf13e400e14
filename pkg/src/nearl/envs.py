"""Deterministic toy control environments with scripted experts.

Three systems stand in for a physics-engine benchmark:

``PointMass2D``
    Planar double integrator, state ``[px, py, vx, vy]``, action = acceleration
    in ``[-2, 2]^2``. Semi-implicit Euler: ``v' = v + a dt``, ``p' = p + v' dt``.
    Reward ``-(x'Qx + u'Ru)`` on the pre-step state with ``Q = diag(1, 1, .1, .1)``,
    ``R = 0.5 I``, clipped below at ``-50``.
``Pendulum``
    State ``[cos th, sin th, w]`` with ``th = 0`` hanging down. Torque in ``[-5, 5]``,
    ``w' = clip(w + dt (-(g/l) sin th + u/(m l^2)), -8, 8)``, ``th' = th + w' dt``.
    Reward ``-(phi^2 + 0.1 w^2)`` with ``phi`` the wrapped distance to upright;
    bounds ``[-(pi^2 + 6.4), 0]``.
``LinearSystem``
    ``x' = A x + B u`` with Euler-discretised unstable spiral dynamics. Same
    quadratic reward shape as PointMass2D (``Q = I``, ``R = 0.1 I``), clipped at
    ``-50``; the state is clipped to ``[-10, 10]``.

Rewards only use states: the applied action is recovered exactly from
``(s, s')`` by :meth:`Env.applied_action` for the two linear systems, and the
pendulum reward has no action term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class EnvError(ValueError):
    pass


class RiccatiError(RuntimeError):
    """Raised when the discrete Riccati iteration fails to converge."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    controllable_indices: tuple[int, ...]
    dt: float
    horizon: int
    action_bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.horizon < 1:
            raise EnvError("horizon must be >= 1")
        if any(not 0 <= i < self.state_dim for i in self.controllable_indices):
            raise EnvError("controllable_indices out of range")
        if len(self.action_bounds) != self.action_dim:
            raise EnvError("one (lo, hi) pair per action dimension")
        if any(lo >= hi for lo, hi in self.action_bounds):
            raise EnvError("action bounds need lo < hi")

    @property
    def action_low(self) -> np.ndarray:
        return np.array([b[0] for b in self.action_bounds])

    @property
    def action_high(self) -> np.ndarray:
        return np.array([b[1] for b in self.action_bounds])


@dataclass
class EnvState:
    vector: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class NuisanceConfig:
    extra_dims: int = 0
    kind: str = "gaussian_noise"
    seed: int = 0

    def __post_init__(self):
        if self.extra_dims < 0:
            raise EnvError("extra_dims must be >= 0")
        if self.kind not in NUISANCE_KINDS:
            raise EnvError(f"unknown nuisance kind {self.kind!r}")


NUISANCE_KINDS = ("gaussian_noise", "random_walk", "duplicated_sensors")


def dlqr(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
         tol: float = 1e-10, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Infinite-horizon discrete LQR by fixed-point Riccati iteration.

    Returns ``(K, P)`` with ``u = -K x`` and cost-to-go ``x' P x``.
    """
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P))):
            P = P_next
            BtP = B.T @ P
            return np.linalg.solve(R + BtP @ B, BtP @ A), P
        if not np.all(np.isfinite(P_next)):
            break
        P = P_next
    raise RiccatiError("Riccati recursion did not converge")


class Env:
    """Base class. Batched methods take ``(n, state_dim)`` arrays."""

    spec: EnvSpec
    reward_bounds: tuple[float, float]

    # -- dynamics, vectorised over the leading axis --------------------------
    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, x: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_start(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def nominal_start(self) -> np.ndarray:
        raise NotImplementedError

    def start_mean(self) -> np.ndarray:
        raise NotImplementedError

    def expert_action(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- shared ---------------------------------------------------------------
    def clip_action(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.spec.action_low, self.spec.action_high)

    def step_batch(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise EnvError("non-finite state or action")
        x_next = self.dynamics(x, self.clip_action(u))
        return x_next, self.reward(x, x_next)

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        action = np.asarray(action, dtype=np.float64)
        x = np.asarray(state.vector, dtype=np.float64)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(action))):
            raise EnvError("non-finite state or action")
        clipped = self.clip_action(action)
        if np.any(clipped != action):
            log.debug("%s: action %s clamped to %s", self.spec.name, action, clipped)
        x_next, r = self.step_batch(x[None], clipped[None])
        t = state.t + 1
        return EnvState(x_next[0], t), float(r[0]), t >= self.spec.horizon

    def reset(self, seed: int | None = None) -> EnvState:
        """``seed=None`` gives the nominal start; an int gives a seeded random start."""
        if seed is None:
            return EnvState(self.nominal_start().copy(), 0)
        rng = np.random.default_rng(seed)
        return EnvState(self.sample_start(rng, 1)[0], 0)

    def expert_rollout(self, x0: np.ndarray, horizon: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Batched expert episodes. Returns states ``(H+1, n, d)`` and rewards ``(H, n)``."""
        horizon = self.spec.horizon if horizon is None else horizon
        x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        xs, rs = [x], []
        for _ in range(horizon):
            x, r = self.step_batch(x, self.expert_action(x))
            xs.append(x)
            rs.append(r)
        return np.stack(xs), np.stack(rs)

    def random_rollout(self, x0: np.ndarray, rng: np.random.Generator,
                       horizon: int | None = None) -> np.ndarray:
        """Uniform-random-action episodes; returns per-step rewards ``(H, n)``."""
        horizon = self.spec.horizon if horizon is None else horizon
        x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        rs = []
        lo, hi = self.spec.action_low, self.spec.action_high
        for _ in range(horizon):
            u = rng.uniform(lo, hi, size=(x.shape[0], self.spec.action_dim))
            x, r = self.step_batch(x, u)
            rs.append(r)
        return np.stack(rs)

    def episode_return_from_states(self, states: np.ndarray) -> float:
        states = np.asarray(states, dtype=np.float64)
        return float(np.sum(self.reward(states[:-1], states[1:])))


class _QuadraticEnv(Env):
    """Linear dynamics ``x' = A x + B u`` with a clipped quadratic cost."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    cost_cap = 50.0

    def _init_lqr(self):
        self.K, self.P = dlqr(self.A, self.B, self.Q, self.R)
        self._B_pinv = np.linalg.pinv(self.B)
        self.reward_bounds = (-self.cost_cap, 0.0)

    def applied_action(self, x: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        """Exact inverse dynamics for the (clipped) action that was applied."""
        return (x_next - x @ self.A.T) @ self._B_pinv.T

    def reward(self, x, x_next):
        u = self.applied_action(x, x_next)
        cost = np.einsum("...i,ij,...j->...", x, self.Q, x) + np.einsum("...i,ij,...j->...", u, self.R, u)
        return -np.minimum(cost, self.cost_cap)

    def expert_action(self, x):
        return np.asarray(x) @ -self.K.T

    def lqr_value(self, x0: np.ndarray) -> np.ndarray:
        """Optimal infinite-horizon return ``-x0' P x0``."""
        x0 = np.atleast_2d(x0)
        return -np.einsum("ni,ij,nj->n", x0, self.P, x0)


class PointMass2D(_QuadraticEnv):
    def __init__(self, dt: float = 0.05, horizon: int = 100, accel_limit: float = 2.0):
        self.spec = EnvSpec(
            name="PointMass2D",
            state_dim=4,
            action_dim=2,
            controllable_indices=(2, 3),
            dt=dt,
            horizon=horizon,
            action_bounds=((-accel_limit, accel_limit),) * 2,
        )
        # semi-implicit Euler written as a linear map
        I2 = np.eye(2)
        self.A = np.block([[I2, dt * I2], [np.zeros((2, 2)), I2]])
        self.B = np.vstack([dt * dt * I2, dt * I2])
        self.Q = np.diag([1.0, 1.0, 0.1, 0.1])
        self.R = 0.5 * np.eye(2)
        self._init_lqr()

    def dynamics(self, x, u):
        dt = self.spec.dt
        p, v = x[..., :2], x[..., 2:]
        v_next = v + u * dt
        p_next = p + v_next * dt
        return np.concatenate([p_next, v_next], axis=-1)

    def nominal_start(self):
        return np.array([1.0, -1.0, 0.0, 0.0])

    def sample_start(self, rng, n):
        p = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.concatenate([p, np.zeros((n, 2))], axis=1)

    def start_mean(self):
        return np.zeros(4)


class LinearSystem(_QuadraticEnv):
    """``x' = A x + B u``; default is an Euler-discretised unstable spiral."""

    def __init__(self, A=None, B=None, Q=None, R=None, dt: float = 0.05, horizon: int = 100,
                 u_limit: float = 4.0, state_limit: float = 10.0):
        if A is None:
            Ac = np.array([[0.2, 1.0], [-1.0, 0.2]])
            A = np.eye(2) + dt * Ac
        if B is None:
            B = dt * np.eye(2)
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        n, m = self.B.shape
        self.Q = np.eye(n) if Q is None else np.asarray(Q, dtype=np.float64)
        self.R = 0.1 * np.eye(m) if R is None else np.asarray(R, dtype=np.float64)
        self.state_limit = state_limit
        self.spec = EnvSpec(
            name="LinearSystem",
            state_dim=n,
            action_dim=m,
            controllable_indices=tuple(range(n)),
            dt=dt,
            horizon=horizon,
            action_bounds=((-u_limit, u_limit),) * m,
        )
        self._init_lqr()

    def dynamics(self, x, u):
        return np.clip(x @ self.A.T + u @ self.B.T, -self.state_limit, self.state_limit)

    def nominal_start(self):
        return np.ones(self.spec.state_dim)

    def sample_start(self, rng, n):
        return rng.uniform(-1.0, 1.0, size=(n, self.spec.state_dim))

    def start_mean(self):
        return np.zeros(self.spec.state_dim)


class Pendulum(Env):
    """Torque-limited pendulum; ``th = 0`` hangs down, upright is ``th = pi``."""

    max_speed = 8.0

    def __init__(self, dt: float = 0.05, horizon: int = 200, max_torque: float = 5.0,
                 g: float = 9.81, m: float = 1.0, length: float = 1.0):
        self.g, self.m, self.length = g, m, length
        self.spec = EnvSpec(
            name="Pendulum",
            state_dim=3,
            action_dim=1,
            controllable_indices=(0, 1, 2),
            dt=dt,
            horizon=horizon,
            action_bounds=((-max_torque, max_torque),),
        )
        self.reward_bounds = (-(math.pi**2 + 0.1 * self.max_speed**2), 0.0)
        # LQR about upright in (phi, w) coordinates, same integrator
        a = g / length
        b = 1.0 / (m * length**2)
        A = np.array([[1.0 + dt * dt * a, dt], [dt * a, 1.0]])
        B = np.array([[dt * dt * b], [dt * b]])
        self.K_up, _ = dlqr(A, B, np.diag([1.0, 0.1]), np.array([[0.01]]))
        self.energy_gain = 2.0
        self.capture_angle = 0.8

    @staticmethod
    def angle(x: np.ndarray) -> np.ndarray:
        return np.arctan2(x[..., 1], x[..., 0])

    def upright_error(self, x: np.ndarray) -> np.ndarray:
        th = self.angle(x)
        return np.mod(th - math.pi + math.pi, 2 * math.pi) - math.pi

    def dynamics(self, x, u):
        dt = self.spec.dt
        th = self.angle(x)
        w = x[..., 2]
        acc = -(self.g / self.length) * np.sin(th) + u[..., 0] / (self.m * self.length**2)
        w_next = np.clip(w + dt * acc, -self.max_speed, self.max_speed)
        th_next = th + dt * w_next
        return np.stack([np.cos(th_next), np.sin(th_next), w_next], axis=-1)

    def reward(self, x, x_next):
        phi = self.upright_error(x)
        return -(phi**2 + 0.1 * x[..., 2] ** 2)

    def nominal_start(self):
        return np.array([1.0, 0.0, 0.0])

    def sample_start(self, rng, n):
        th = rng.uniform(-0.5, 0.5, size=n)
        w = rng.uniform(-0.5, 0.5, size=n)
        return np.stack([np.cos(th), np.sin(th), w], axis=-1)

    def start_mean(self):
        # E[cos U(-.5,.5)] = 2 sin(.5)
        return np.array([2.0 * math.sin(0.5), 0.0, 0.0])

    def energy(self, x):
        """Mechanical energy per unit m l^2; zero at horizontal, ``g/l`` upright."""
        return 0.5 * x[..., 2] ** 2 - (self.g / self.length) * x[..., 0]

    def expert_action(self, x):
        x = np.atleast_2d(x)
        phi = self.upright_error(x)
        w = x[:, 2]
        e_gap = self.g / self.length - self.energy(x)
        direction = np.where(np.abs(w) < 1e-3, 1.0, np.sign(w))
        u_swing = self.energy_gain * e_gap * direction * self.m * self.length**2
        # large gap with w ~ 0: kick at full torque
        u_swing = np.where(np.abs(w) < 1e-3, self.spec.action_high[0], u_swing)
        u_lqr = -(np.stack([phi, w], axis=-1) @ self.K_up.T)[:, 0]
        near = np.abs(phi) < self.capture_angle
        u = np.where(near, u_lqr, u_swing)
        return self.clip_action(u[:, None])


class NuisanceAugmenter:
    """Appends ``extra_dims`` redundant observation dimensions to a base state.

    ``gaussian_noise`` draws fresh N(0, 1) values each step, ``random_walk``
    integrates N(0, 0.1^2) increments from zero, ``duplicated_sensors`` copies
    base state entries cyclically.
    """

    walk_scale = 0.1

    def __init__(self, cfg: NuisanceConfig, base_dim: int):
        self.cfg = cfg
        self.base_dim = base_dim

    def initial(self, base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        base = np.atleast_2d(base)
        n, k = base.shape[0], self.cfg.extra_dims
        if self.cfg.kind == "gaussian_noise":
            return rng.standard_normal((n, k))
        if self.cfg.kind == "random_walk":
            return np.zeros((n, k))
        return self._dup(base)

    def advance(self, base_next: np.ndarray, prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        base_next = np.atleast_2d(base_next)
        n, k = base_next.shape[0], self.cfg.extra_dims
        if self.cfg.kind == "gaussian_noise":
            return rng.standard_normal((n, k))
        if self.cfg.kind == "random_walk":
            return prev + self.walk_scale * rng.standard_normal((n, k))
        return self._dup(base_next)

    def _dup(self, base):
        idx = np.arange(self.cfg.extra_dims) % self.base_dim
        return base[:, idx]


def augment_nuisance(state: np.ndarray, cfg: NuisanceConfig, prev: np.ndarray | None = None,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Append nuisance dims to one state vector (or a batch of them).

    Without ``rng`` the stream is seeded from ``cfg.seed``; pass ``prev`` (the
    previous appended block) to advance a random walk.
    """
    state = np.asarray(state, dtype=np.float64)
    if cfg.extra_dims == 0:
        return state.copy()
    single = state.ndim == 1
    base = np.atleast_2d(state)
    aug = NuisanceAugmenter(cfg, base.shape[1])
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    extra = aug.initial(base, rng) if prev is None else aug.advance(base, np.atleast_2d(prev), rng)
    out = np.concatenate([base, extra], axis=1)
    return out[0] if single else out


def augmented_spec(spec: EnvSpec, cfg: NuisanceConfig) -> EnvSpec:
    """Spec of the augmented observation; appended dims are never controllable."""
    return replace(spec, state_dim=spec.state_dim + cfg.extra_dims)


ENVS = {"PointMass2D": PointMass2D, "Pendulum": Pendulum, "LinearSystem": LinearSystem}


def make_env(name: str, dt: float | None = None, horizon: int | None = None) -> Env:
    if name not in ENVS:
        raise EnvError(f"unknown environment {name!r}; choose from {sorted(ENVS)}")
    kwargs = {}
    if dt is not None:
        kwargs["dt"] = dt
    if horizon is not None:
        kwargs["horizon"] = horizon
    return ENVS[name](**kwargs)


def step(env: Env, state: EnvState, action) -> tuple[EnvState, float, bool]:
    return env.step(state, action)


def reset(env: Env, seed: int | None = None) -> EnvState:
    return env.reset(seed)


def expert_action(env: Env, state) -> np.ndarray:
    x = state.vector if isinstance(state, EnvState) else np.asarray(state, dtype=np.float64)
    single = x.ndim == 1
    u = env.expert_action(np.atleast_2d(x))
    return u[0] if single else u


@dataclass
class ReturnBaselines:
    """Mean expert and uniform-random returns from a shared set of starts."""

    expert: float
    random: float

    def normalize(self, ret):
        return (np.asarray(ret) - self.random) / (self.expert - self.random)


def baseline_returns(env: Env, n_seeds: int = 20, seed: int = 12345) -> ReturnBaselines:
    rng = np.random.default_rng(seed)
    x0 = env.sample_start(rng, n_seeds)
    _, rs = env.expert_rollout(x0)
    rand = env.random_rollout(x0, rng)
    return ReturnBaselines(float(rs.sum(0).mean()), float(rand.sum(0).mean()))
