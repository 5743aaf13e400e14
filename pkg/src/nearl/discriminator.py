"""Variational discriminator bottleneck over state transitions.

A stochastic encoder ``E(z | x)`` maps a transition ``x = (s, s')`` to a
Gaussian code, a classifier ``D(z)`` scores it as real, and the mean KL of the
code to ``N(0, I)`` is held near ``i_c`` by a projected dual-ascent variable
``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import GaussianHead, Mlp, Tensor, concat, no_grad
from .autodiff.tensor import as_tensor


@dataclass
class TransitionBatch:
    """``real`` holds observed ``(s, s')`` rows, ``fake`` holds ``(s, s_hat')`` rows.

    ``fake`` may be a Tensor carrying a graph back into the meta policy.
    """

    real: np.ndarray
    fake: np.ndarray | Tensor

    def __post_init__(self):
        if len(self.real) == 0 or len(self.fake) == 0:
            raise ValueError("both sides of a transition batch must be nonempty")
        if self.real.shape[-1] != self.fake.shape[-1]:
            raise ValueError("real and fake transitions differ in width")


def kl_to_prior(mu, sigma):
    """KL of ``N(mu, diag sigma^2)`` to ``N(0, I)``, summed over the last axis.

    Accepts arrays (returns array/float) or Tensors (returns Tensor).
    """
    if isinstance(mu, Tensor) or isinstance(sigma, Tensor):
        mu, sigma = as_tensor(mu), as_tensor(sigma)
        return ((mu.square() + sigma.square() - 1.0 - sigma.log() * 2.0) * 0.5).sum(axis=-1)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    out = 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


class VdbDiscriminator:
    def __init__(self, x_dim: int, z_dim: int = 8, hidden=(32, 32), classifier_hidden=(),
                 i_c: float = 0.5, beta_lr: float = 1e-4, beta: float = 0.0, fixed_beta: bool = False,
                 rng: np.random.Generator | None = None):
        if z_dim < 1:
            raise ValueError("z_dim must be >= 1")
        if not i_c > 0:
            raise ValueError("i_c must be > 0")
        if beta < 0:
            raise ValueError("beta must be >= 0")
        self.x_dim = x_dim
        self.z_dim = z_dim
        self.encoder = Mlp(x_dim, z_dim, hidden, "tanh", "gaussian", rng)
        self.classifier = Mlp(z_dim, 1, classifier_hidden, "tanh", "linear", rng)
        self.i_c = float(i_c)
        self.beta_lr = float(beta_lr)
        self.beta = float(beta)
        self.fixed_beta = fixed_beta

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.classifier.parameters()

    def encode(self, x, eps: np.ndarray | None = None):
        """Returns ``(mu, sigma, z)``; ``eps=None`` is evaluation mode (``z = mu``)."""
        head: GaussianHead = self.encoder(x)
        sigma = head.std
        if eps is None:
            return head.mean, sigma, head.mean
        return head.mean, sigma, head.mean + sigma * Tensor(eps)

    def logits(self, x, eps: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        mu, sigma, z = self.encode(x, eps)
        kl = kl_to_prior(mu, sigma.reshape(1, -1) if sigma.ndim == 1 else sigma)
        return self.classifier(z).reshape(-1), kl

    def prob_real(self, x) -> np.ndarray:
        with no_grad():
            logit, _ = self.logits(np.asarray(x, dtype=np.float64))
        return 1.0 / (1.0 + np.exp(-logit.data))

    def beta_update(self, mean_kl: float) -> float:
        """Projected dual ascent ``beta <- max(0, beta + lr (kl - i_c))``."""
        if not self.fixed_beta:
            self.beta = max(0.0, self.beta + self.beta_lr * (mean_kl - self.i_c))
        return self.beta

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"cls.{k}": v for k, v in self.classifier.state_dict().items()})
        out["beta"] = np.array([self.beta])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("enc.")})
        self.classifier.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("cls.")})
        self.beta = float(state["beta"][0])


@dataclass
class VdbLosses:
    d_loss: Tensor
    g_loss: Tensor
    mean_kl: float
    real_term: float
    fake_term: float


def vdb_losses(disc: VdbDiscriminator, batch: TransitionBatch, rng: np.random.Generator | None = None
               ) -> VdbLosses:
    """Discriminator and non-saturating generator losses for one batch.

    ``d_loss = E_real[-log D] + E_fake[-log(1 - D)] + beta (E_mix[KL] - i_c)``;
    ``g_loss = E_fake[-log D]``. With ``rng=None`` codes are taken at the mean.
    """
    real = np.asarray(batch.real, dtype=np.float64)
    fake = batch.fake
    n_real = len(real)
    x = concat([Tensor(real), fake], axis=0) if isinstance(fake, Tensor) else Tensor(
        np.concatenate([real, np.asarray(fake, dtype=np.float64)], axis=0))
    eps = None if rng is None else rng.standard_normal((x.shape[0], disc.z_dim))
    logit, kl = disc.logits(x, eps)
    n = x.shape[0]
    sel_real = np.zeros(n)
    sel_real[:n_real] = 1.0 / n_real
    sel_fake = np.zeros(n)
    sel_fake[n_real:] = 1.0 / (n - n_real)
    # -log D = -log_sigmoid(l);  -log(1 - D) = -log_sigmoid(-l)
    real_term = -(logit.log_sigmoid() * Tensor(sel_real)).sum()
    fake_term = -((-logit).log_sigmoid() * Tensor(sel_fake)).sum()
    g_loss = -(logit.log_sigmoid() * Tensor(sel_fake)).sum()
    mean_kl = kl.mean()
    d_loss = real_term + fake_term
    if disc.beta != 0.0:
        d_loss = d_loss + (mean_kl - disc.i_c) * disc.beta
    return VdbLosses(d_loss, g_loss, float(mean_kl.data), float(real_term.data), float(fake_term.data))


def generator_loss(disc: VdbDiscriminator, fake, rng: np.random.Generator | None = None) -> Tensor:
    """Non-saturating ``E_fake[-log D(z)]`` alone; cheaper than ``vdb_losses`` for policy steps."""
    fake = as_tensor(fake)
    eps = None if rng is None else rng.standard_normal((fake.shape[0], disc.z_dim))
    logit, _ = disc.logits(fake, eps)
    return -logit.log_sigmoid().mean()
