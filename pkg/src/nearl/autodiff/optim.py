from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_scale: list[float] | None = None  # per-parameter multiplier on lr


class Adam:
    """Adam with bias correction. ``step`` leaves gradients in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8, lr_scale: Sequence[float] | None = None):
        self.params = list(params)
        if lr_scale is not None:
            lr_scale = [float(s) for s in lr_scale]
            if len(lr_scale) != len(self.params):
                raise ValueError("lr_scale needs one entry per parameter")
        self.state = AdamState(
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
            lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon, lr_scale=lr_scale,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array([float(self.state.step_count)])}
        for i, (m, v) in enumerate(zip(self.state.first_moment, self.state.second_moment)):
            out[f"{prefix}m{i}"] = m.copy()
            out[f"{prefix}v{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        self.state.step_count = int(state[f"{prefix}step"][0])
        for i in range(len(self.params)):
            self.state.first_moment[i] = np.array(state[f"{prefix}m{i}"])
            self.state.second_moment[i] = np.array(state[f"{prefix}v{i}"])


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '?'} has no grad buffer")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = p.grad
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = state.lr if state.lr_scale is None else state.lr * state.lr_scale[i]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Sgd:
    """Plain gradient descent; the update is exactly ``-lr * grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or '?'} has no grad buffer")
            p.data = p.data - self.lr * p.grad
