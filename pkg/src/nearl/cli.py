"""Command line entry point: ``nearl {gen-demos,train,eval,validate}``."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, config_schema, parse_config, serialize
from .envs import EnvError, make_env
from .imitation import DemoDataset, DemoError, generate_demos

log = logging.getLogger("nearl")

RUN_DIR_ENV = "NEARL_RUN_DIR"
DEFAULT_RUN_ROOT = "runs"


def _run_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(RUN_DIR_ENV) or DEFAULT_RUN_ROOT)


def _run_dir(root: Path, cfg: TrainConfig) -> Path:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    path = root / f"{stamp}-{cfg.hash()}"
    k = 1
    while path.exists():
        path = root / f"{stamp}-{cfg.hash()}-{k}"
        k += 1
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(run_dir: Path, cfg: TrainConfig, **extra) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "code_version": __version__,
        "started": _now(),
        "ended": None,
        "artifacts": {
            "metrics_csv": "metrics.csv",
            "metrics_jsonl": "metrics.jsonl",
            "summary": "summary.json",
            "checkpoints": "checkpoints/",
        },
    }
    manifest.update(extra)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _finish_manifest(run_dir: Path, status: str) -> None:
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["ended"] = _now()
    manifest["status"] = status
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands -----------------------------------------------------------------

def cmd_gen_demos(args) -> int:
    env = make_env(args.env, args.dt, args.horizon)
    demos = generate_demos(env, args.episodes, seed=args.seed)
    demos.save(args.out)
    returns = [env.episode_return_from_states(ep) for ep in demos.episodes]
    print(f"wrote {len(demos)} episodes to {args.out}")
    print(f"mean expert return {float(np.mean(returns)):.6f}")
    return 0


def cmd_validate(args) -> int:
    if args.schema:
        print(json.dumps(config_schema(), indent=2))
        return 0
    if args.config is None:
        print("error: validate needs a config path (or --schema)", file=sys.stderr)
        return 2
    cfg = parse_config(args.config, args.override)
    print(serialize(cfg))
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainingError, train

    cfg = parse_config(args.config, args.override)
    run_dir = Path(args.run_dir) if args.run_dir else _run_dir(_run_root(None), cfg)
    write_manifest(run_dir, cfg, dry_run=bool(args.dry_run))
    print(f"run directory {run_dir}")
    if args.dry_run:
        _finish_manifest(run_dir, "dry_run")
        return 0
    try:
        result = train(cfg, run_dir=run_dir, resume_from=args.resume,
                       callback=(lambda r: print(_progress(r))) if args.verbose else None)
    except (TrainingError, FloatingPointError) as exc:
        _finish_manifest(run_dir, "aborted")
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    _finish_manifest(run_dir, "completed")
    s = result.summary
    print(f"iterations {s['iterations']}  env steps {s['env_steps']}  final return {s['final_return']}")
    return 0


def _progress(r) -> str:
    fmt = lambda v: "nan" if not math.isfinite(v) else f"{v:.4g}"
    return (f"iter {r.iteration:4d} steps {r.env_steps:7d} return {fmt(r.mean_return)} "
            f"eval {fmt(r.eval_return)} idm_mse {fmt(r.idm_mse)} gate {int(r.gate_fired)} "
            f"kl {fmt(r.mean_kl)} beta {fmt(r.beta)}")


def cmd_eval(args) -> int:
    from .trainer import EVAL_SEED, CheckpointMismatch, Trainer, checkpoint_config, evaluate

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return 2
    cfg = checkpoint_config(ckpt)
    manifest = args.manifest
    if manifest is None:
        guess = ckpt.parent.parent / "manifest.json"
        manifest = guess if guess.is_file() else None
    if manifest is not None:
        recorded = json.loads(Path(manifest).read_text(encoding="utf-8"))["config"]["env"]["name"]
        if recorded != cfg.env.name:
            raise CheckpointMismatch(f"manifest env {recorded!r} does not match checkpoint env {cfg.env.name!r}")
    if args.env is not None and args.env != cfg.env.name:
        raise CheckpointMismatch(f"requested env {args.env!r} does not match checkpoint env {cfg.env.name!r}")
    trainer = Trainer(cfg)
    trainer.load(ckpt)
    rets, mse = evaluate(trainer.agent, trainer.env, trainer.nuisance, args.episodes,
                         seed=EVAL_SEED if args.seed is None else args.seed,
                         idm=trainer.idm or trainer.passive_idm)
    report = {
        "env": cfg.env.name,
        "variant": cfg.algorithm.variant,
        "episodes": int(args.episodes),
        "mean_return": float(np.mean(rets)),
        "std_return": float(np.std(rets)),
        "idm_mse": None if not math.isfinite(mse) else mse,
        "expert_fraction": trainer.normalize(float(np.mean(rets))),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="nearl", description=__doc__, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"nearl {__version__}")
    p.add_argument("--log-level", default="WARNING", help="logging level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="write state-only expert demonstrations (JSON Lines)", formatter_class=fmt)
    g.add_argument("--env", required=True, help="environment name")
    g.add_argument("--episodes", type=int, default=25, help="number of episodes")
    g.add_argument("--seed", type=int, default=0, help="start-state seed")
    g.add_argument("--dt", type=float, default=None, help="override the env time step")
    g.add_argument("--horizon", type=int, default=None, help="override the episode length")
    g.add_argument("--out", required=True, help="output .jsonl path")
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", help="train one configuration", formatter_class=fmt)
    t.add_argument("config", help="JSON config file")
    t.add_argument("--override", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                   help="dotted-path config override; repeatable")
    t.add_argument("--run-dir", default=None,
                   help=f"exact run directory (default: <${RUN_DIR_ENV} or {DEFAULT_RUN_ROOT}>/<time>-<hash>)")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--dry-run", action="store_true", help="validate and write the manifest only")
    t.add_argument("--verbose", action="store_true", help="print one line per iteration")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="deterministic evaluation of a checkpoint", formatter_class=fmt)
    e.add_argument("checkpoint", help="checkpoint file written by train")
    e.add_argument("--episodes", type=int, default=20, help="number of evaluation episodes")
    e.add_argument("--seed", type=int, default=None, help="start-state seed (default: the fixed eval seed)")
    e.add_argument("--env", default=None, help="expected env name; mismatch is an error")
    e.add_argument("--manifest", default=None, help="run manifest to check against (default: found next to the run)")
    e.add_argument("--out", default=None, help="also write the report to this JSON file")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("validate", help="validate a config and print it with defaults filled", formatter_class=fmt)
    v.add_argument("config", nargs="?", default=None, help="JSON config file")
    v.add_argument("--override", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                   help="dotted-path config override; repeatable")
    v.add_argument("--schema", action="store_true", help="print the config JSON schema instead")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except (ConfigError, DemoError, EnvError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
