"""Fully connected networks and the diagonal Gaussian output head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, as_tensor, check_finite

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianHead:
    """Diagonal Gaussian given by per-row means and a log-std vector."""

    mean: Tensor
    log_std: Tensor

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()

    def log_prob(self, x) -> Tensor:
        """Sum over the last axis of the per-dimension log density."""
        x = as_tensor(x)
        z = (x - self.mean) / self.std
        per_dim = z.square() * -0.5 - self.log_std - 0.5 * _LOG_2PI
        return per_dim.sum(axis=-1)

    def entropy(self) -> Tensor:
        return (self.log_std + 0.5 * (1.0 + _LOG_2PI)).sum()

    def rsample(self, eps: np.ndarray) -> Tensor:
        """Reparameterized draw ``mean + std * eps``."""
        return self.mean + self.std * Tensor(eps)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(self.mean.shape)
        return self.mean.data + np.exp(self.log_std.data) * eps


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """Tanh/ReLU perceptron with a linear or Gaussian output head.

    ``hidden=(32, 32)`` gives two hidden layers of width 32. A Gaussian head
    owns a state-independent ``log_std`` vector, clamped to [-5, 2] on use.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden: Sequence[int] = (32, 32),
        activation: str = "tanh",
        head: str = "linear",
        rng: np.random.Generator | None = None,
        init_log_std: float = 0.0,
        out_gain: float = 1.0,
    ):
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        if head not in ("linear", "gaussian"):
            raise ValueError(f"unknown head {head!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.head = head
        dims = [in_dim, *self.hidden, out_dim]
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            w = glorot_uniform(rng, fi, fo)
            if i == len(dims) - 2:
                w = w * out_gain
            self.layers.append(
                (Tensor(w, requires_grad=True, name=f"l{i}.w"), Tensor(np.zeros(fo), requires_grad=True, name=f"l{i}.b"))
            )
        self.log_std = (
            Tensor(np.full(out_dim, float(init_log_std)), requires_grad=True, name="log_std")
            if head == "gaussian"
            else None
        )

    def parameters(self) -> list[Tensor]:
        params = [t for layer in self.layers for t in layer]
        if self.log_std is not None:
            params.append(self.log_std)
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def body(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} != network input width {self.in_dim}")
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i < last:
                h = h.tanh() if self.activation == "tanh" else h.relu()
        return check_finite(h, "network output")

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass of the body, for rollouts and evaluation."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"input width {h.shape[-1]} != network input width {self.in_dim}")
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
        return h

    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX)

    def __call__(self, x):
        out = self.body(x)
        if self.head == "linear":
            return out
        return GaussianHead(out, self.log_std.clip(LOG_STD_MIN, LOG_STD_MAX))

    forward = __call__

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def forward(net: Mlp, x):
    return net(x)


__all__ = ["GaussianHead", "Mlp", "NonFiniteError", "forward", "glorot_uniform", "LOG_STD_MIN", "LOG_STD_MAX"]
