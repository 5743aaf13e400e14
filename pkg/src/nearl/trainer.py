"""Training loop for the four algorithm variants.

Each iteration runs, in order: collect a rollout batch with the current
policy; the variant's predicted-state step (adversarial discriminator and
generator updates, or supervised regression); the gated IDM update; the PPO
update of the joint policy. ``idm_before_gan`` swaps the middle two.

Every iteration draws its randomness from generators derived from
``(component seed, iteration)``, so a run resumed from a checkpoint replays
exactly what the uninterrupted run would have done.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Adam, Mlp, Tensor, concat, load_checkpoint, no_grad, save_checkpoint
from .config import TrainConfig, validate
from .discriminator import TransitionBatch, VdbDiscriminator, generator_loss, vdb_losses
from .envs import Env, NuisanceAugmenter, NuisanceConfig, make_env
from .imitation import DemoDataset, bc_loss, demo_bc_loss, inject_demos, pretrain
from .policy import (
    CombinedPolicy,
    FlatPolicy,
    InverseDynamicsModel,
    MetaPolicy,
    StateConstraint,
    apply_constraint,
    filter_indices,
)
from .rl import AdvantageBuffer, PPOConfig, RolloutBatch, ppo_update, reinforce_gradient

CSV_VERSION = 1
CSV_COLUMNS = (
    "iteration",
    "env_steps",
    "mean_return",
    "eval_return",
    "eval_score",
    "idm_mse",
    "idm_mse_post",
    "idm_nll",
    "gate_fired",
    "mean_kl",
    "beta",
    "d_loss",
    "g_loss",
    "sup_loss",
    "bc_loss",
    "approx_kl",
    "entropy",
)
EVAL_SEED = 7919
SCORE_THRESHOLD = 0.9
FINAL_WINDOW = 20


class TrainingError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class IdmGate:
    """Fires when the IDM's mean-prediction error reaches the threshold."""

    threshold: float
    metric: float = math.nan

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("gate threshold must be > 0")

    def check(self, mse: float) -> bool:
        self.metric = float(mse)
        return self.metric >= self.threshold


@dataclass
class IterationReport:
    iteration: int
    env_steps: int
    mean_return: float = math.nan
    eval_return: float = math.nan
    eval_score: float = math.nan
    idm_mse: float = math.nan
    idm_mse_post: float = math.nan
    idm_nll: float = math.nan
    gate_fired: bool = False
    mean_kl: float = math.nan
    beta: float = math.nan
    d_loss: float = math.nan
    g_loss: float = math.nan
    sup_loss: float = math.nan
    bc_loss: float = math.nan
    approx_kl: float = math.nan
    entropy: float = math.nan
    wall_time: float = 0.0

    def csv_row(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            out.append(str(int(v)) if isinstance(v, (bool, int)) else repr(float(v)))
        return out


def _finite(value: float, what: str, iteration: int) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} at iteration {iteration}")
    return value


# -- IDM and supervised steps ---------------------------------------------------

def idm_mse(idm: InverseDynamicsModel, s, s_next, a) -> float:
    """Mean squared error of the IDM mean against the executed actions."""
    pred = idm.mean(s, np.asarray(s_next)[..., list(idm.input_indices)])
    return float(np.mean((pred - np.asarray(a)) ** 2))


def idm_update(idm: InverseDynamicsModel, s, s_next, a, opt: Adam, epochs: int = 4,
               minibatch_size: int = 256, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Gaussian NLL minimisation on reached transitions. Returns ``(post mse, last nll)``."""
    s, s_next, a = (np.asarray(v, dtype=np.float64) for v in (s, s_next, a))
    n = len(s)
    if n == 0:
        raise ValueError("idm_update needs at least one transition")
    rng = rng if rng is not None else np.random.default_rng(0)
    nll = math.nan
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, minibatch_size):
            idx = order[start : start + minibatch_size]
            loss = -idm.from_states(s[idx], s_next[idx]).log_prob(a[idx]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            nll = float(loss.data)
    return idm_mse(idm, s, s_next, a), nll


def nearl_supervised_step(pi: MetaPolicy, s, s_next, opt: Adam, epochs: int = 1,
                          minibatch_size: int = 256, rng: np.random.Generator | None = None,
                          variant: str = "nearl_original") -> float:
    """Regress the meta policy's mean onto observed next states; returns the final full-batch loss."""
    if variant != "nearl_original":
        raise ValueError(f"supervised meta-policy step is only used by nearl_original, not {variant!r}")
    s = np.asarray(s, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    if len(s) == 0:
        raise ValueError("supervised step needs at least one transition")
    rng = rng if rng is not None else np.random.default_rng(0)
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
        return float(bc_loss(pi, s, s_next).data)


# -- vectorised env -------------------------------------------------------------

class VecEnv:
    """``n`` independent copies of an env with optional nuisance observation dims."""

    def __init__(self, env: Env, nuisance: NuisanceConfig, n: int):
        self.env = env
        self.n = n
        self.base_dim = env.spec.state_dim
        self.nuisance = nuisance
        self.aug = NuisanceAugmenter(nuisance, self.base_dim) if nuisance.extra_dims else None
        self.x = np.zeros((n, self.base_dim))
        self.extra = np.zeros((n, nuisance.extra_dims))
        self.t = np.zeros(n, dtype=np.int64)
        self.ep_return = np.zeros(n)

    @property
    def obs_dim(self) -> int:
        return self.base_dim + self.nuisance.extra_dims

    def obs(self) -> np.ndarray:
        return np.concatenate([self.x, self.extra], axis=1) if self.aug else self.x.copy()

    def reset(self, mask: np.ndarray, rng: np.random.Generator, starts: np.ndarray | None = None) -> None:
        k = int(mask.sum())
        if k == 0:
            return
        x0 = starts if starts is not None else self.env.sample_start(rng, k)
        self.x[mask] = x0
        if self.aug:
            self.extra[mask] = self.aug.initial(x0, rng)
        self.t[mask] = 0
        self.ep_return[mask] = 0.0

    def step(self, u: np.ndarray, rng: np.random.Generator):
        """Returns ``(next_obs, reward, done, finished_returns)``; done envs are left for the caller to reset."""
        x_next, r = self.env.step_batch(self.x, u)
        if self.aug:
            self.extra = self.aug.advance(x_next, self.extra, rng)
        self.x = x_next
        self.t += 1
        self.ep_return += r
        done = self.t >= self.env.spec.horizon
        return self.obs(), r, done, self.ep_return[done].copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"venv.x": self.x.copy(), "venv.extra": self.extra.copy(),
                "venv.t": self.t.astype(np.float64), "venv.ep_return": self.ep_return.copy()}

    def load_state_dict(self, st: dict[str, np.ndarray]) -> None:
        self.x = np.array(st["venv.x"]).reshape(self.n, self.base_dim)
        self.extra = np.array(st["venv.extra"]).reshape(self.n, self.nuisance.extra_dims)
        self.t = np.array(st["venv.t"]).astype(np.int64)
        self.ep_return = np.array(st["venv.ep_return"])


def evaluate(agent, env: Env, nuisance: NuisanceConfig, n_episodes: int, seed: int = EVAL_SEED,
             idm: InverseDynamicsModel | None = None) -> tuple[np.ndarray, float]:
    """Deterministic-mode episodes from seeded starts. Returns per-episode returns and IDM mse."""
    rng = np.random.default_rng(seed)
    venv = VecEnv(env, nuisance, n_episodes)
    venv.reset(np.ones(n_episodes, dtype=bool), rng)
    idm = idm if idm is not None else getattr(agent, "idm", None)
    sq, count = 0.0, 0
    for _ in range(env.spec.horizon):
        s = venv.obs()
        smp = agent.act(s, None, deterministic=True)
        s_next, _, _, _ = venv.step(smp.action, rng)
        if idm is not None:
            pred = idm.mean(s, s_next[:, list(idm.input_indices)])
            sq += float(np.sum((pred - env.clip_action(smp.action)) ** 2))
            count += smp.action.size
    return venv.ep_return.copy(), (sq / count if count else math.nan)


def reference_returns(env: Env, n_episodes: int, seed: int = EVAL_SEED) -> tuple[float, float]:
    """Mean expert and uniform-random returns on the evaluation starts."""
    rng = np.random.default_rng(seed)
    x0 = env.sample_start(rng, n_episodes)
    _, rs = env.expert_rollout(x0)
    rand = env.random_rollout(x0, np.random.default_rng(seed + 1))
    return float(rs.sum(0).mean()), float(rand.sum(0).mean())


def expert_fraction(ret: float, expert: float) -> float:
    """How close a (non-positive) return comes to the expert's: ``expert_cost / cost``.

    1.0 matches the expert; a policy with twice the expert's cost scores 0.5.
    """
    cost, expert_cost = -float(ret), -float(expert)
    if expert_cost <= 0:
        raise ValueError("expert return must be negative for a cost ratio")
    return expert_cost / cost if cost > 0 else math.inf


# -- trainer ---------------------------------------------------------------------

_COMPONENTS = ("meta", "idm", "flat", "critic", "disc", "passive_idm", "collect", "update", "bc")


@dataclass
class TrainResult:
    reports: list[IterationReport]
    summary: dict


class Trainer:
    def __init__(self, cfg: TrainConfig, demos: DemoDataset | None = None):
        validate(cfg)
        self.cfg = cfg
        e, a, o = cfg.env, cfg.algorithm, cfg.optimization
        self.variant = a.variant
        self.env = make_env(e.name, e.dt, e.horizon)
        self.nuisance = NuisanceConfig(e.nuisance.extra_dims, e.nuisance.kind, e.nuisance.seed)
        self.venv = VecEnv(self.env, self.nuisance, o.n_envs)
        obs_dim = self.venv.obs_dim
        act_dim = self.env.spec.action_dim
        self.obs_dim = obs_dim
        hidden = tuple(a.hidden)
        spec = self.env.spec
        if self.nuisance.extra_dims:
            from .envs import augmented_spec
            spec = augmented_spec(spec, self.nuisance)
        self.indices = filter_indices(spec, a.state_filter)
        rng = lambda name: np.random.default_rng(cfg.component_seed(name))

        self.meta = self.idm = self.flat = self.disc = self.passive_idm = None
        if self.variant == "rl_pure":
            self.flat = FlatPolicy(obs_dim, act_dim, hidden, rng=rng("flat"), init_log_std=a.action_init_log_std)
            self.agent = self.flat
            if a.passive_idm:
                self.passive_idm = InverseDynamicsModel(
                    obs_dim, self.indices, act_dim, hidden, rng=rng("passive_idm"), init_log_std=a.action_init_log_std,
                    delta_scale=self.env.spec.dt if a.delta_parameterization else None)
        else:
            bounds = e.constraint.bounds
            if bounds is not None and not isinstance(bounds[0], list):
                bounds = [bounds] * len(self.indices)
            constraint = StateConstraint(e.constraint.kind, bounds)
            scale = self.env.spec.dt if a.delta_parameterization else None
            self.meta = MetaPolicy(obs_dim, self.indices, hidden, rng=rng("meta"), init_log_std=a.meta_init_log_std,
                                   residual_scale=scale)
            self.idm = InverseDynamicsModel(obs_dim, self.indices, act_dim, hidden, rng=rng("idm"),
                                            init_log_std=a.action_init_log_std, delta_scale=scale)
            self.agent = CombinedPolicy(self.meta, self.idm, constraint)
            if self.variant in ("pid2_gan", "pid2_ib"):
                fixed = self.variant == "pid2_gan"
                self.disc = VdbDiscriminator(2 * len(self.indices), a.z_dim, hidden, i_c=a.i_c,
                                             beta_lr=a.beta_lr, beta=0.0 if fixed else a.beta_init,
                                             fixed_beta=fixed, rng=rng("disc"))
        self.critic = Mlp(obs_dim, 1, hidden, "tanh", "linear", rng("critic"))
        self.gate = IdmGate(a.sigma_i) if a.sigma_i is not None else None

        scale = None
        if self.idm is not None:
            scale = [1.0] * len(self.meta.parameters()) + [o.idm_ppo_lr_scale] * len(self.idm.parameters())
        self.opt_policy = Adam(self.agent.parameters(), lr=o.lr_policy, lr_scale=scale)
        self.opt_critic = Adam(self.critic.parameters(), lr=o.lr_critic)
        idm = self.idm or self.passive_idm
        self.opt_idm = Adam(idm.parameters(), lr=o.lr_idm) if idm is not None else None
        self.opt_disc = Adam(self.disc.parameters(), lr=o.lr_disc) if self.disc else None
        self.opt_gen = Adam(self.meta.parameters(), lr=o.lr_gen) if self.disc else None
        self.opt_sup = Adam(self.meta.body_parameters(), lr=o.lr_supervised) if self.variant == "nearl_original" else None
        self.ppo_cfg = PPOConfig(o.clip_eps, o.ppo_epochs, o.minibatch_size, o.ent_coef, 1.0, o.target_kl, o.max_grad_norm)

        self.demos = demos
        self.demo_pairs = None
        if demos is not None:
            if self.variant == "rl_pure":
                raise TrainingError("rl_pure cannot use state-only demonstrations")
            if demos.state_dim != self.env.spec.state_dim:
                raise TrainingError(f"demo state width {demos.state_dim} != env state width {self.env.spec.state_dim}")
            if demos.env != self.env.spec.name:
                raise TrainingError(f"demos are for {demos.env!r}, run uses {self.env.spec.name!r}")
            s, s_next = demos.pairs()
            if self.nuisance.extra_dims:
                s = np.concatenate([s, np.zeros((len(s), self.nuisance.extra_dims))], axis=1)
                s_next = np.concatenate([s_next, np.zeros((len(s_next), self.nuisance.extra_dims))], axis=1)
            self._demo_s, self._demo_s_next = s, s_next
            idx = list(self.indices)
            self.demo_pairs = self._pair(s[:, idx], s_next[:, idx])
            self._demo_starts = demos.all_states()

        self.iteration = 0
        self.env_steps = 0
        self.episodes_started = 0
        self.pretrain_history: list[float] = []
        self.expert_return, self.random_return = reference_returns(self.env, o.eval_episodes)
        self._started = False

    def _pair(self, s_f, next_f):
        """Discriminator input for a transition, recoded like the IDM input."""
        scale = self.idm.delta_scale if self.idm is not None else None
        if isinstance(next_f, Tensor):
            s_t = Tensor(s_f)
            return concat([s_t, next_f if scale is None else (next_f - s_t) * (1.0 / scale)])
        return np.concatenate([s_f, next_f if scale is None else (next_f - s_f) / scale], axis=1)

    # -- randomness ---------------------------------------------------------------
    def _rng(self, name: str, iteration: int | None = None) -> np.random.Generator:
        it = self.iteration if iteration is None else iteration
        return np.random.default_rng([self.cfg.component_seed(name), it])

    # -- setup ----------------------------------------------------------------------
    def start(self) -> None:
        """BC pretraining (when demos are given) and the initial resets."""
        if self._started:
            return
        self._started = True
        a = self.cfg.algorithm
        if self.demos is not None and a.bc_epochs > 0:
            self.pretrain_history = pretrain(
                self.meta, self._demo_dataset_view(), a.bc_epochs, self.cfg.optimization.lr_bc,
                self.cfg.optimization.minibatch_size, self._rng("bc", 0))
        all_envs = np.ones(self.venv.n, dtype=bool)
        self._reset(all_envs, self._rng("init", 0))

    def _demo_dataset_view(self) -> DemoDataset:
        if not self.nuisance.extra_dims:
            return self.demos
        pad = self.nuisance.extra_dims
        eps = tuple(np.concatenate([ep, np.zeros((len(ep), pad))], axis=1) for ep in self.demos.episodes)
        return DemoDataset(eps, self.demos.env, self.obs_dim, seeds=self.demos.seeds)

    def _isd_active(self) -> bool:
        a = self.cfg.algorithm
        if not a.isd or self.demos is None:
            return False
        return a.isd_episodes is None or self.episodes_started < a.isd_episodes

    def _reset(self, mask: np.ndarray, rng: np.random.Generator) -> None:
        k = int(mask.sum())
        if k == 0:
            return
        starts = None
        if self._isd_active():
            starts = self._demo_starts[rng.integers(len(self._demo_starts), size=k)].copy()
        self.venv.reset(mask, rng, starts)
        self.episodes_started += k

    # -- phases -----------------------------------------------------------------------
    def collect(self, n_steps: int, rng: np.random.Generator) -> tuple[RolloutBatch, list[float]]:
        T = n_steps // self.venv.n
        n = self.venv.n
        keys = ("states", "preds_raw", "preds", "actions", "next_states", "rewards", "dones", "logprobs")
        buf = {k: [] for k in keys}
        finished = []
        for _ in range(T):
            s = self.venv.obs()
            smp = self.agent.act(s, rng)
            s_next, r, done, rets = self.venv.step(smp.action, rng)
            for k, v in zip(keys, (s, smp.pred_raw, smp.pred, smp.action, s_next, r, done, smp.logprob)):
                buf[k].append(v)
            finished.extend(rets.tolist())
            self._reset(done, rng)
        self.env_steps += T * n
        batch = RolloutBatch(*(np.stack(buf[k]) for k in keys))
        return batch, finished

    def _adversarial_step(self, batch: RolloutBatch, rng: np.random.Generator, rep: IterationReport) -> None:
        a, o = self.cfg.algorithm, self.cfg.optimization
        idx = list(self.indices)
        s = batch.flat("states")
        s_next = batch.flat("next_states")
        real_all = self._pair(s[:, idx], s_next[:, idx])
        n = len(s)
        mb = min(o.minibatch_size, n)
        kls, dls, gls = [], [], []
        for _ in range(a.disc_steps):
            rows = rng.choice(n, size=mb, replace=False)
            with no_grad():
                head = self.meta(s[rows])
                pred = head.mean.data + np.exp(head.log_std.data) * rng.standard_normal(head.mean.shape)
            pred = apply_constraint(pred, self.agent.constraint)
            fake = self._pair(s[rows][:, idx], pred)
            tb = TransitionBatch(real_all[rows], fake)
            if self.demo_pairs is not None:
                tb = inject_demos(tb, self.demo_pairs, a.demo_fraction, rng)
            losses = vdb_losses(self.disc, tb, rng)
            self.opt_disc.zero_grad()
            losses.d_loss.backward()
            self.opt_disc.step()
            self.disc.beta_update(losses.mean_kl)
            kls.append(losses.mean_kl)
            dls.append(float(losses.d_loss.data))
        for _ in range(a.gen_steps):
            rows = rng.choice(n, size=mb, replace=False)
            head = self.meta(s[rows])
            pred = apply_constraint(head.rsample(rng.standard_normal(head.mean.shape)), self.agent.constraint)
            fake = self._pair(s[rows][:, idx], pred)
            g = generator_loss(self.disc, fake, rng) * a.gan_weight
            self.opt_gen.zero_grad()
            g.backward()
            self.opt_gen.step()
            gls.append(float(g.data))
        it = self.iteration
        if kls:
            rep.mean_kl = _finite(float(np.mean(kls)), "mean_kl", it)
            rep.d_loss = _finite(float(np.mean(dls)), "discriminator loss", it)
        if gls:
            rep.g_loss = _finite(float(np.mean(gls)), "generator loss", it)
        rep.beta = self.disc.beta

    def _supervised_step(self, batch: RolloutBatch, rng: np.random.Generator, rep: IterationReport) -> None:
        a, o = self.cfg.algorithm, self.cfg.optimization
        loss = nearl_supervised_step(self.meta, batch.flat("states"), batch.flat("next_states"), self.opt_sup,
                                     a.supervised_epochs, o.minibatch_size, rng)
        rep.sup_loss = _finite(loss, "supervised loss", self.iteration)

    def _idm_step(self, batch: RolloutBatch, rng: np.random.Generator, rep: IterationReport) -> None:
        a, o = self.cfg.algorithm, self.cfg.optimization
        idm = self.idm or self.passive_idm
        if idm is None:
            return
        s, s_next = batch.flat("states"), batch.flat("next_states")
        # the executed (clipped) action is what realised the transition
        act = self.env.clip_action(batch.flat("actions"))
        mse = _finite(idm_mse(idm, s, s_next, act), "IDM mse", self.iteration)
        rep.idm_mse = mse
        fire = True if self.gate is None else self.gate.check(mse)
        rep.gate_fired = bool(fire)
        if fire:
            post, nll = idm_update(idm, s, s_next, act, self.opt_idm, a.idm_epochs, o.minibatch_size, rng)
            rep.idm_mse_post = _finite(post, "IDM mse", self.iteration)
            rep.idm_nll = _finite(nll, "IDM nll", self.iteration)
        else:
            rep.idm_mse_post = mse

    def _policy_step(self, batch: RolloutBatch, rng: np.random.Generator, rep: IterationReport) -> None:
        o = self.cfg.optimization
        # re-evaluate log-probabilities under the parameters the PPO phase starts from
        with no_grad():
            lp = self.agent.log_prob(batch.flat("states"), batch.flat("preds_raw"), batch.flat("preds"),
                                     batch.flat("actions")).data
        batch.logprobs = lp.reshape(batch.rewards.shape)
        if o.estimator == "reinforce":
            grads = reinforce_gradient(batch.trajectories(), self.agent, o.gamma)
            self.opt_policy.zero_grad()
            for p, g in zip(self.agent.parameters(), grads):
                p.grad = -g
            self.opt_policy.step()
            return
        buffer = AdvantageBuffer.from_rollout(batch, self.critic, o.gamma, o.lam)
        stats = ppo_update(buffer, self.agent, self.critic, self.ppo_cfg, self.opt_policy, self.opt_critic, rng)
        rep.approx_kl = _finite(stats.approx_kl, "approx_kl", self.iteration)
        rep.entropy = stats.entropy
        if not math.isfinite(stats.policy_loss) or not math.isfinite(stats.value_loss):
            raise TrainingError(f"non-finite PPO loss at iteration {self.iteration}")

    def _evaluate(self, rep: IterationReport) -> None:
        o = self.cfg.optimization
        if not o.eval_every or self.iteration % o.eval_every:
            return
        rets, _ = evaluate(self.agent, self.env, self.nuisance, o.eval_episodes)
        rep.eval_return = float(np.mean(rets))
        rep.eval_score = self.normalize(rep.eval_return)

    def normalize(self, ret: float) -> float:
        return expert_fraction(ret, self.expert_return)

    def run_iteration(self) -> IterationReport:
        self.start()
        t0 = time.perf_counter()
        o, a = self.cfg.optimization, self.cfg.algorithm
        rep = IterationReport(self.iteration, 0)
        batch, finished = self.collect(o.batch_size, self._rng("collect"))
        rep.env_steps = self.env_steps
        rep.mean_return = float(np.mean(finished)) if finished else math.nan
        upd = self._rng("update")
        pred_step = None
        if self.disc is not None:
            pred_step = self._adversarial_step
        elif self.variant == "nearl_original":
            pred_step = self._supervised_step
        steps = [pred_step, self._idm_step] if not a.idm_before_gan else [self._idm_step, pred_step]
        for fn in steps:
            if fn is not None:
                fn(batch, upd, rep)
        self._policy_step(batch, upd, rep)
        if self.disc is not None:
            rep.beta = self.disc.beta
        if self.demos is not None:
            rep.bc_loss = demo_bc_loss(self.meta, self._demo_dataset_view())
        self._evaluate(rep)
        self.iteration += 1
        rep.wall_time = time.perf_counter() - t0
        return rep

    # -- checkpoints ---------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        st: dict[str, np.ndarray] = {}
        nets = {"critic": self.critic}
        if self.meta is not None:
            nets.update(meta=self.meta.net, idm=self.idm.net)
        if self.flat is not None:
            nets["flat"] = self.flat.net
        if self.passive_idm is not None:
            nets["passive_idm"] = self.passive_idm.net
        for name, net in nets.items():
            st.update({f"{name}.{k}": v for k, v in net.state_dict().items()})
        if self.disc is not None:
            st.update({f"disc.{k}": v for k, v in self.disc.state_dict().items()})
        for name in ("policy", "critic", "idm", "disc", "gen", "sup"):
            opt = getattr(self, f"opt_{name}")
            if opt is not None:
                st.update(opt.state_dict(f"opt.{name}."))
        st.update(self.venv.state_dict())
        st["counters"] = np.array([self.iteration, self.env_steps, self.episodes_started], dtype=np.float64)
        st["config_json"] = np.frombuffer(self.cfg.to_json().encode(), dtype=np.uint8).astype(np.float64)
        return st

    def load_state_dict(self, st: dict[str, np.ndarray]) -> None:
        cfg_json = bytes(np.asarray(st["config_json"], dtype=np.uint8)).decode()
        saved = json.loads(cfg_json)
        if saved["env"]["name"] != self.cfg.env.name:
            raise CheckpointMismatch(f"checkpoint is for env {saved['env']['name']!r}, config uses {self.cfg.env.name!r}")
        if saved["algorithm"]["variant"] != self.variant:
            raise CheckpointMismatch(f"checkpoint variant {saved['algorithm']['variant']!r} != {self.variant!r}")
        self._started = True
        sub = lambda p: {k[len(p):]: v for k, v in st.items() if k.startswith(p)}
        self.critic.load_state_dict(sub("critic."))
        if self.meta is not None:
            self.meta.net.load_state_dict(sub("meta."))
            self.idm.net.load_state_dict(sub("idm."))
        if self.flat is not None:
            self.flat.net.load_state_dict(sub("flat."))
        if self.passive_idm is not None:
            self.passive_idm.net.load_state_dict(sub("passive_idm."))
        if self.disc is not None:
            self.disc.load_state_dict(sub("disc."))
        for name in ("policy", "critic", "idm", "disc", "gen", "sup"):
            opt = getattr(self, f"opt_{name}")
            if opt is not None:
                opt.load_state_dict(st, f"opt.{name}.")
        self.venv.load_state_dict(st)
        it, steps, eps = st["counters"]
        self.iteration, self.env_steps, self.episodes_started = int(it), int(steps), int(eps)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))


def checkpoint_config(path) -> TrainConfig:
    """Config snapshot stored inside a checkpoint."""
    from .config import from_dict

    st = load_checkpoint(path)
    if "config_json" not in st:
        raise CheckpointMismatch(f"{path} is not a training checkpoint")
    return from_dict(json.loads(bytes(np.asarray(st["config_json"], dtype=np.uint8)).decode()))


# -- metrics -----------------------------------------------------------------------

def csv_header() -> str:
    return f"# nearl-metrics v{CSV_VERSION}\n" + ",".join(CSV_COLUMNS) + "\n"


def reports_to_csv(reports: list[IterationReport]) -> str:
    out = io.StringIO()
    out.write(csv_header())
    w = csv.writer(out, lineterminator="\n")
    for r in reports:
        w.writerow(r.csv_row())
    return out.getvalue()


def summarize(trainer: Trainer, reports: list[IterationReport]) -> dict:
    evals = [r for r in reports if math.isfinite(r.eval_return)]
    tail = evals[-FINAL_WINDOW:]
    half = reports[len(reports) // 2 :]
    first_hit = next((r.env_steps for r in evals if r.eval_score >= SCORE_THRESHOLD), None)
    mean_of = lambda rows, key: (float(np.nanmean([getattr(r, key) for r in rows]))
                                 if rows and any(math.isfinite(getattr(r, key)) for r in rows) else None)
    betas = [r.beta for r in reports if math.isfinite(r.beta)]
    return {
        "config_hash": trainer.cfg.hash(),
        "seed": trainer.cfg.seed.seed,
        "variant": trainer.variant,
        "env": trainer.env.spec.name,
        "iterations": len(reports),
        "env_steps": trainer.env_steps,
        "expert_return": trainer.expert_return,
        "random_return": trainer.random_return,
        "final_return": float(np.mean([r.eval_return for r in tail])) if tail else None,
        "final_score": float(np.mean([r.eval_score for r in tail])) if tail else None,
        "steps_to_threshold": first_hit,
        "idm_mse_last_half": mean_of(half, "idm_mse"),
        "mean_kl_last_half": mean_of(half, "mean_kl"),
        "min_beta": min(betas) if betas else None,
        "pretrain_bc_loss": trainer.pretrain_history[-1] if trainer.pretrain_history else None,
    }


class RunWriter:
    """CSV + JSONL metric streams and periodic checkpoints under one run directory."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.run_dir / "metrics.csv"
        self.jsonl_path = self.run_dir / "metrics.jsonl"
        self.ckpt_dir = self.run_dir / "checkpoints"
        self.csv_path.write_text(csv_header(), encoding="utf-8")
        self.jsonl_path.write_text("", encoding="utf-8")

    def write(self, rep: IterationReport) -> None:
        with open(self.csv_path, "a", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rep.csv_row())
        with open(self.jsonl_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(_jsonable(asdict(rep))) + "\n")

    def checkpoint(self, trainer: Trainer, name: str) -> Path:
        path = self.ckpt_dir / name
        trainer.save(path)
        return path


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def load_demos_for(cfg: TrainConfig) -> DemoDataset | None:
    if cfg.algorithm.demo_path is None:
        return None
    return DemoDataset.load(cfg.algorithm.demo_path, expect_env=cfg.env.name)


def train(cfg: TrainConfig, run_dir: str | Path | None = None, demos: DemoDataset | None = None,
          resume_from: str | Path | None = None, max_iterations: int | None = None,
          callback: Callable[[IterationReport], None] | None = None) -> TrainResult:
    """Run until the env-step budget is spent (or ``max_iterations`` more iterations)."""
    if demos is None:
        demos = load_demos_for(cfg)
    trainer = Trainer(cfg, demos)
    if resume_from is not None:
        trainer.load(resume_from)
    writer = RunWriter(run_dir) if run_dir is not None else None
    o = cfg.optimization
    reports: list[IterationReport] = []
    done = 0
    while trainer.env_steps + o.batch_size <= o.budget:
        if max_iterations is not None and done >= max_iterations:
            break
        rep = trainer.run_iteration()
        reports.append(rep)
        done += 1
        if writer:
            writer.write(rep)
            if o.checkpoint_every and trainer.iteration % o.checkpoint_every == 0:
                writer.checkpoint(trainer, f"iter_{trainer.iteration:06d}.ckpt")
        if callback:
            callback(rep)
    summary = summarize(trainer, reports)
    if writer:
        summary["checkpoint"] = str(writer.checkpoint(trainer, "final.ckpt"))
        (writer.run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                     encoding="utf-8")
    return TrainResult(reports, summary)
