"""Experiment configuration: dataclass blocks, validation, JSON round trip.

A config file is a JSON object with up to four blocks (``env``, ``algorithm``,
``optimization``, ``seed``). Every field has a default; unknown keys are
rejected. ``config_schema()`` publishes the JSON-schema description.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

VARIANTS = ("rl_pure", "nearl_original", "pid2_gan", "pid2_ib")
FILTER_MODES = ("correct", "full", "missing_key")
ENV_NAMES = ("PointMass2D", "Pendulum", "LinearSystem")
NUISANCE_KINDS = ("gaussian_noise", "random_walk", "duplicated_sensors")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class NuisanceBlock:
    extra_dims: int = 0
    kind: str = "gaussian_noise"
    seed: int = 0


@dataclass
class ConstraintBlock:
    kind: str = "none"
    # one [lo, hi] for every predicted dim, or a list with one pair per dim
    bounds: list | None = None


@dataclass
class EnvBlock:
    name: str = "PointMass2D"
    dt: float | None = None
    horizon: int | None = None
    nuisance: NuisanceBlock = field(default_factory=NuisanceBlock)
    constraint: ConstraintBlock = field(default_factory=ConstraintBlock)


@dataclass
class AlgorithmBlock:
    variant: str = "pid2_ib"
    sigma_i: float | None = None  # 0.5 for hierarchical variants; rejected for rl_pure
    i_c: float | None = None  # 0.5 for pid2 variants
    beta_lr: float | None = None
    beta_init: float = 0.0
    z_dim: int = 8
    hidden: list = field(default_factory=lambda: [32, 32])
    state_filter: str = "full"
    demo_path: str | None = None
    demo_fraction: float = 0.5
    isd: bool = False
    isd_episodes: int | None = None  # None: ISD resets for the whole run
    bc_epochs: int = 200
    disc_steps: int = 1
    gen_steps: int = 1
    idm_epochs: int = 40
    supervised_epochs: int = 4
    idm_before_gan: bool = False
    gan_weight: float = 1.0
    meta_init_log_std: float = -3.0
    action_init_log_std: float = 0.0
    passive_idm: bool = True
    # meta mean = s_f + dt * net(s); IDM input = (s_f, (s'_f - s_f) / dt)
    delta_parameterization: bool = True


@dataclass
class OptimizationBlock:
    lr_policy: float = 3e-4
    idm_ppo_lr_scale: float = 0.01  # multiplier on lr_policy for the IDM's share of the PPO step
    lr_critic: float = 1e-3
    lr_idm: float = 1e-2
    lr_disc: float = 3e-4
    lr_gen: float = 1e-4
    lr_supervised: float = 3e-4
    lr_bc: float = 1e-3
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    minibatch_size: int = 256
    batch_size: int = 2048
    n_envs: int = 8
    budget: int = 200_000
    ent_coef: float = 0.0
    target_kl: float = 0.03
    max_grad_norm: float | None = 0.5
    estimator: str = "ppo"
    eval_every: int = 1
    eval_episodes: int = 8
    checkpoint_every: int = 0


@dataclass
class SeedBlock:
    seed: int = 0


@dataclass
class TrainConfig:
    env: EnvBlock = field(default_factory=EnvBlock)
    algorithm: AlgorithmBlock = field(default_factory=AlgorithmBlock)
    optimization: OptimizationBlock = field(default_factory=OptimizationBlock)
    seed: SeedBlock = field(default_factory=SeedBlock)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @property
    def hierarchical(self) -> bool:
        return self.algorithm.variant != "rl_pure"

    def component_seed(self, name: str) -> int:
        """Stable per-component seed derived from the global seed."""
        digest = hashlib.sha256(f"{self.seed.seed}:{name}".encode()).digest()
        return int.from_bytes(digest[:8], "little")


_BLOCKS = {"env": EnvBlock, "algorithm": AlgorithmBlock, "optimization": OptimizationBlock, "seed": SeedBlock}
_NESTED = {("env", "nuisance"): NuisanceBlock, ("env", "constraint"): ConstraintBlock}


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        sub = _NESTED.get((path, f.name))
        if sub is not None:
            kwargs[f.name] = _build(sub, data[f.name], f"{path}.{f.name}")
        else:
            kwargs[f.name] = data[f.name]
    return cls(**kwargs)


def from_dict(data: dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in data:
        if key not in _BLOCKS:
            raise ConfigError(key, "unknown key")
    cfg = TrainConfig(**{k: _build(cls, data.get(k, {}), k) for k, cls in _BLOCKS.items()})
    validate(cfg)
    return cfg


def parse_config(path: str | os.PathLike, overrides: list[str] | None = None) -> TrainConfig:
    """Read, apply dotted-path overrides (``optimization.budget=0``), validate."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"parse error: {exc}") from exc
    for ov in overrides or []:
        apply_override(data, ov)
    cfg = from_dict(data)
    demo = cfg.algorithm.demo_path
    if demo is not None and not Path(demo).is_absolute():
        cfg.algorithm.demo_path = str((Path(path).parent / demo).resolve())
    validate(cfg, check_files=True)
    return cfg


def apply_override(data: dict, override: str) -> None:
    if "=" not in override:
        raise ConfigError(override, "override must look like block.key=value")
    key, raw = override.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "cannot override inside a non-object")
    node[parts[-1]] = value


def _num(key, value, *, lo=None, hi=None, lo_open=False, integer=False, allow_inf=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if integer and not float(value).is_integer():
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if math.isnan(value) or (math.isinf(value) and not allow_inf):
        raise ConfigError(key, "must be finite")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise ConfigError(key, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(key, f"must be <= {hi}, got {value}")


def _choice(key, value, options):
    if value not in options:
        raise ConfigError(key, f"must be one of {list(options)}, got {value!r}")


def validate(cfg: TrainConfig, check_files: bool = False) -> None:
    e, a, o = cfg.env, cfg.algorithm, cfg.optimization
    _choice("env.name", e.name, ENV_NAMES)
    if e.dt is not None:
        _num("env.dt", e.dt, lo=0, lo_open=True)
    if e.horizon is not None:
        _num("env.horizon", e.horizon, lo=1, integer=True)
    _num("env.nuisance.extra_dims", e.nuisance.extra_dims, lo=0, integer=True)
    _choice("env.nuisance.kind", e.nuisance.kind, NUISANCE_KINDS)
    _num("env.nuisance.seed", e.nuisance.seed, lo=0, integer=True)
    _choice("env.constraint.kind", e.constraint.kind, ("none", "box_clamp"))
    if e.constraint.kind == "box_clamp":
        b = e.constraint.bounds
        if not isinstance(b, list) or not b:
            raise ConfigError("env.constraint.bounds", "box_clamp needs bounds")
        pairs = [b] if not isinstance(b[0], list) else b
        for p in pairs:
            if len(p) != 2 or p[0] > p[1]:
                raise ConfigError("env.constraint.bounds", f"bad pair {p!r}")

    _choice("algorithm.variant", a.variant, VARIANTS)
    if a.variant == "rl_pure":
        for name in ("sigma_i", "i_c", "beta_lr"):
            if getattr(a, name) is not None:
                raise ConfigError(f"algorithm.{name}", "not used by variant rl_pure")
        if e.constraint.kind != "none":
            raise ConfigError("env.constraint.kind", "rl_pure has no predicted state to constrain")
    else:
        if a.sigma_i is None:
            a.sigma_i = 0.5
        if a.i_c is None:
            a.i_c = 0.5
        if a.beta_lr is None:
            a.beta_lr = 1e-4
        _num("algorithm.sigma_i", a.sigma_i, lo=0, lo_open=True)
        _num("algorithm.i_c", a.i_c, lo=0, lo_open=True, allow_inf=True)
        _num("algorithm.beta_lr", a.beta_lr, lo=0)
    _num("algorithm.beta_init", a.beta_init, lo=0)
    _num("algorithm.z_dim", a.z_dim, lo=1, integer=True)
    if not isinstance(a.hidden, list) or not all(isinstance(h, int) and h > 0 for h in a.hidden):
        raise ConfigError("algorithm.hidden", "must be a list of positive integers")
    _choice("algorithm.state_filter", a.state_filter, FILTER_MODES)
    _num("algorithm.demo_fraction", a.demo_fraction, lo=0, hi=1)
    if not isinstance(a.isd, bool):
        raise ConfigError("algorithm.isd", "must be true or false")
    if a.isd and a.demo_path is None:
        raise ConfigError("algorithm.isd", "needs algorithm.demo_path")
    if a.isd_episodes is not None:
        _num("algorithm.isd_episodes", a.isd_episodes, lo=0, integer=True)
    for name in ("bc_epochs", "disc_steps", "gen_steps", "idm_epochs", "supervised_epochs"):
        _num(f"algorithm.{name}", getattr(a, name), lo=0, integer=True)
    _num("algorithm.gan_weight", a.gan_weight, lo=0)
    _num("algorithm.meta_init_log_std", a.meta_init_log_std, lo=-5, hi=2)
    _num("algorithm.action_init_log_std", a.action_init_log_std, lo=-5, hi=2)
    if a.demo_path is not None and a.variant == "rl_pure":
        raise ConfigError("algorithm.demo_path", "state-only demos need a hierarchical variant")
    if check_files and a.demo_path is not None and not Path(a.demo_path).is_file():
        raise ConfigError("algorithm.demo_path", f"file not found: {a.demo_path}")

    for name in ("lr_policy", "lr_critic", "lr_idm", "lr_disc", "lr_gen", "lr_supervised", "lr_bc"):
        _num(f"optimization.{name}", getattr(o, name), lo=0)
    _num("optimization.idm_ppo_lr_scale", o.idm_ppo_lr_scale, lo=0)
    _num("optimization.gamma", o.gamma, lo=0, hi=1)
    _num("optimization.lam", o.lam, lo=0, hi=1)
    _num("optimization.clip_eps", o.clip_eps, lo=0, lo_open=True, allow_inf=True)
    _num("optimization.ppo_epochs", o.ppo_epochs, lo=0, integer=True)
    _num("optimization.minibatch_size", o.minibatch_size, lo=1, integer=True)
    _num("optimization.batch_size", o.batch_size, lo=1, integer=True)
    _num("optimization.n_envs", o.n_envs, lo=1, integer=True)
    if o.batch_size % o.n_envs:
        raise ConfigError("optimization.batch_size", "must be a multiple of optimization.n_envs")
    _num("optimization.budget", o.budget, lo=0, integer=True)
    _num("optimization.ent_coef", o.ent_coef, lo=0)
    _num("optimization.target_kl", o.target_kl, lo=0, lo_open=True, allow_inf=True)
    if o.max_grad_norm is not None:
        _num("optimization.max_grad_norm", o.max_grad_norm, lo=0, lo_open=True)
    _choice("optimization.estimator", o.estimator, ("ppo", "reinforce"))
    _num("optimization.eval_every", o.eval_every, lo=0, integer=True)
    _num("optimization.eval_episodes", o.eval_episodes, lo=1, integer=True)
    _num("optimization.checkpoint_every", o.checkpoint_every, lo=0, integer=True)
    _num("seed.seed", cfg.seed.seed, lo=0, integer=True)


def serialize(cfg: TrainConfig) -> str:
    return cfg.to_json()


def _schema_for(cls, path: str) -> dict:
    props = {}
    defaults = cls()
    for f in fields(cls):
        sub = _NESTED.get((path, f.name))
        if sub is not None:
            props[f.name] = _schema_for(sub, f"{path}.{f.name}")
            continue
        default = getattr(defaults, f.name)
        kind = {bool: "boolean", int: "integer", float: "number", str: "string", list: "array"}.get(type(default))
        entry: dict = {"default": default}
        if kind:
            entry["type"] = [kind, "number"] if kind == "integer" and f.name.startswith("lr") else kind
        props[f.name] = entry
    return {"type": "object", "additionalProperties": False, "properties": props}


def config_schema() -> dict:
    """JSON-schema description of the config file, defaults included."""
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "NEARL TrainConfig",
        "type": "object",
        "additionalProperties": False,
        "properties": {k: _schema_for(cls, k) for k, cls in _BLOCKS.items()},
    }
