"""Meta policy, inverse dynamics model and their composition.

The meta policy maps a state to a Gaussian over the *next* state; the inverse
dynamics model (IDM) maps ``(s, s')`` to a Gaussian over the action that
realises the transition. Both operate on a configurable subset of state
indices (the filter), which mirrors the controllable-state prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import LOG_STD_MAX, LOG_STD_MIN, GaussianHead, Mlp, Tensor, concat, no_grad
from .autodiff.tensor import as_tensor
from .envs import EnvSpec

FILTER_MODES = ("correct", "full", "missing_key")
_LOG_2PI = math.log(2.0 * math.pi)


def filter_indices(spec: EnvSpec, mode: str) -> tuple[int, ...]:
    """State indices seen by the IDM and predicted by the meta policy.

    ``missing_key`` drops the lowest half of the controllable indices.
    """
    if mode == "full":
        return tuple(range(spec.state_dim))
    ctrl = tuple(sorted(spec.controllable_indices))
    if mode == "correct":
        return ctrl
    if mode == "missing_key":
        return ctrl[len(ctrl) // 2 :]
    raise ValueError(f"unknown state filter mode {mode!r}")


@dataclass
class StateConstraint:
    kind: str = "none"
    bounds: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "box_clamp"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "box_clamp":
            if self.bounds is None:
                raise ValueError("box_clamp needs bounds")
            self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=np.float64))
            if np.any(self.bounds[:, 0] > self.bounds[:, 1]):
                raise ValueError("constraint bounds need lo <= hi")

    @property
    def lo(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def hi(self) -> np.ndarray:
        return self.bounds[:, 1]


def apply_constraint(pred, constraint: StateConstraint | None):
    """Componentwise projection of a predicted state into the box."""
    if constraint is None or constraint.kind == "none":
        return pred
    if isinstance(pred, Tensor):
        return pred.clip(constraint.lo, constraint.hi)
    return np.clip(pred, constraint.lo, constraint.hi)


class MetaPolicy:
    """Gaussian state-to-state policy ``pi(s' | s)`` over the filtered indices.

    With ``residual_scale`` set, the mean is ``s_f + residual_scale * net(s)``
    so an untrained net predicts "stay put" and outputs live on the per-step
    change scale; otherwise the net output is the mean itself.
    """

    def __init__(self, state_dim: int, out_indices: Sequence[int], hidden=(32, 32),
                 activation: str = "tanh", rng: np.random.Generator | None = None,
                 init_log_std: float = -3.0, residual_scale: float | None = None):
        self.state_dim = state_dim
        self.out_indices = tuple(out_indices)
        self.residual_scale = residual_scale
        self.net = Mlp(state_dim, len(self.out_indices), hidden, activation, "gaussian", rng, init_log_std)
        self._idx = np.asarray(self.out_indices, dtype=np.intp)

    def mean_tensor(self, s) -> Tensor:
        out = self.net.body(s)
        if self.residual_scale is None:
            return out
        base = s.columns(self._idx) if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64)[..., self._idx])
        return base + out * self.residual_scale

    def __call__(self, s) -> GaussianHead:
        return GaussianHead(self.mean_tensor(s), self.net.log_std.clip(LOG_STD_MIN, LOG_STD_MAX))

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def body_parameters(self) -> list[Tensor]:
        return [t for layer in self.net.layers for t in layer]

    def mean(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        out = self.net.predict(s)
        if self.residual_scale is None:
            return out
        return s[..., self._idx] + self.residual_scale * out


class InverseDynamicsModel:
    """Gaussian ``I(a | s_f, s'_f)``; ``s`` is full width, ``next_f`` already filtered.

    With ``delta_scale`` set the net sees ``(s_f, (s'_f - s_f) / delta_scale)``,
    a fixed invertible recoding of the same input.
    """

    def __init__(self, state_dim: int, input_indices: Sequence[int], action_dim: int, hidden=(32, 32),
                 activation: str = "tanh", rng: np.random.Generator | None = None,
                 init_log_std: float = 0.0, delta_scale: float | None = None):
        self.state_dim = state_dim
        self.input_indices = tuple(input_indices)
        self.action_dim = action_dim
        self.delta_scale = delta_scale
        self.net = Mlp(2 * len(self.input_indices), action_dim, hidden, activation, "gaussian", rng, init_log_std)
        self._idx = np.asarray(self.input_indices, dtype=np.intp)

    def features(self, s, next_f) -> Tensor:
        s_f = s.columns(self._idx) if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64)[..., self._idx])
        next_f = as_tensor(next_f)
        if self.delta_scale is not None:
            next_f = (next_f - s_f) * (1.0 / self.delta_scale)
        return concat([s_f, next_f])

    def __call__(self, s, next_f) -> GaussianHead:
        return self.net(self.features(s, next_f))

    def from_states(self, s, s_next) -> GaussianHead:
        """Distribution given two full-width states (the IDM training input)."""
        return self(s, np.asarray(s_next)[..., self._idx])

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def mean(self, s, next_f) -> np.ndarray:
        s_f = np.asarray(s, dtype=np.float64)[..., self._idx]
        next_f = np.asarray(next_f, dtype=np.float64)
        if self.delta_scale is not None:
            next_f = (next_f - s_f) / self.delta_scale
        return self.net.predict(np.concatenate([s_f, next_f], axis=-1))


def meta_forward(pi: MetaPolicy, s, deterministic: bool = False):
    """``(mean, std)`` of the predicted next state, or the mean alone when deterministic."""
    with no_grad():
        head = pi(np.asarray(s, dtype=np.float64))
        mean = head.mean.data
        if deterministic:
            return mean
        return mean, np.broadcast_to(np.exp(head.log_std.data), mean.shape).copy()


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def idm_logprob(idm: InverseDynamicsModel, s, s_next, a):
    """Diagonal-Gaussian log density of ``a`` given two full-width states.

    Returns a float for a single transition, an array for a batch.
    """
    with no_grad():
        head = idm.from_states(np.asarray(s, dtype=np.float64), np.asarray(s_next, dtype=np.float64))
        lp = gaussian_logpdf(np.asarray(a, dtype=np.float64), head.mean.data, head.log_std.data)
    return float(lp) if np.ndim(lp) == 0 else lp


@dataclass
class Sample:
    """One (batched) draw from the combined policy."""

    pred_raw: np.ndarray
    pred: np.ndarray
    action: np.ndarray
    logp_meta: np.ndarray
    logp_idm: np.ndarray

    @property
    def logprob(self) -> np.ndarray:
        return self.logp_meta + self.logp_idm


class CombinedPolicy:
    """The hierarchy ``I (.) pi``: sample s' from pi, then a from I(. | s, s')."""

    hierarchical = True

    def __init__(self, meta: MetaPolicy, idm: InverseDynamicsModel, constraint: StateConstraint | None = None):
        if meta.out_indices != idm.input_indices:
            raise ValueError("meta policy output indices must match IDM input indices")
        self.meta = meta
        self.idm = idm
        self.constraint = constraint or StateConstraint()

    def parameters(self) -> list[Tensor]:
        return self.meta.parameters() + self.idm.parameters()

    def act(self, s: np.ndarray, rng: np.random.Generator | None, deterministic: bool = False) -> Sample:
        s = np.asarray(s, dtype=np.float64)
        m_mean, m_logstd = self.meta.mean(s), self.meta.net.clamped_log_std()
        if deterministic:
            pred_raw = m_mean
        else:
            pred_raw = m_mean + np.exp(m_logstd) * rng.standard_normal(m_mean.shape)
        pred = apply_constraint(pred_raw, self.constraint)
        a_mean, a_logstd = self.idm.mean(s, pred), self.idm.net.clamped_log_std()
        if deterministic:
            action = a_mean
        else:
            action = a_mean + np.exp(a_logstd) * rng.standard_normal(a_mean.shape)
        return Sample(pred_raw, pred, action,
                      gaussian_logpdf(pred_raw, m_mean, m_logstd),
                      gaussian_logpdf(action, a_mean, a_logstd))

    def log_prob(self, s, pred_raw, pred, action) -> Tensor:
        """Joint log-likelihood, differentiable in both parameter sets."""
        return self.meta(s).log_prob(pred_raw) + self.idm(s, pred).log_prob(action)

    def entropy(self) -> Tensor:
        mh = GaussianHead(Tensor(np.zeros(len(self.meta.out_indices))), self.meta.net.log_std.clip(LOG_STD_MIN, LOG_STD_MAX))
        ih = GaussianHead(Tensor(np.zeros(self.idm.action_dim)), self.idm.net.log_std.clip(LOG_STD_MIN, LOG_STD_MAX))
        return mh.entropy() + ih.entropy()


def combined_sample(pi: MetaPolicy, idm: InverseDynamicsModel, s, constraint: StateConstraint | None = None,
                    rng: np.random.Generator | None = None, deterministic: bool = False):
    """Returns ``(s_hat', a, logprob_joint)``; the meta term uses the pre-clamp sample."""
    single = np.ndim(s) == 1
    smp = CombinedPolicy(pi, idm, constraint).act(np.atleast_2d(s), rng, deterministic)
    if single:
        return smp.pred[0], smp.action[0], float(smp.logprob[0])
    return smp.pred, smp.action, smp.logprob


class FlatPolicy:
    """Plain Gaussian state-to-action policy for the non-hierarchical baseline."""

    hierarchical = False

    def __init__(self, state_dim: int, action_dim: int, hidden=(32, 32), activation: str = "tanh",
                 rng: np.random.Generator | None = None, init_log_std: float = 0.0):
        self.net = Mlp(state_dim, action_dim, hidden, activation, "gaussian", rng, init_log_std)
        self.action_dim = action_dim

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def act(self, s: np.ndarray, rng: np.random.Generator | None, deterministic: bool = False) -> Sample:
        s = np.asarray(s, dtype=np.float64)
        mean, logstd = self.net.predict(s), self.net.clamped_log_std()
        action = mean if deterministic else mean + np.exp(logstd) * rng.standard_normal(mean.shape)
        empty = np.zeros((s.shape[0], 0))
        return Sample(empty, empty, action, np.zeros(s.shape[0]), gaussian_logpdf(action, mean, logstd))

    def log_prob(self, s, pred_raw, pred, action) -> Tensor:
        return self.net(s).log_prob(action)

    def entropy(self) -> Tensor:
        return GaussianHead(Tensor(np.zeros(self.action_dim)), self.net.log_std.clip(LOG_STD_MIN, LOG_STD_MAX)).entropy()
