"""Command-line entry points: blueprint generation, training, evaluation,
reset-free evaluation, trajectory replay, and attention dumps.

Exit codes: 0 success, 2 config/load error, 3 determinism violation,
64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np
import torch

from . import nets, reports, training
from .blocks import (
    blockset_to_dict,
    blueprint_to_dict,
    default_blockset,
    generate_blueprints,
    load_blockset,
    load_library,
    save_library,
    validate_blueprint,
)
from .env import (
    EnvConfig,
    MagneticAssemblyEnv,
    OracleTeleportPolicy,
    RandomPolicy,
    replay_trajectory,
    reset_free_run,
    rollout_trajectory,
)
from .errors import MagnaforgeError, NonFiniteLoss
from .nets import NetConfig
from .observe import obs_dims
from .training import PPOConfig, TorchPolicy, evaluate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


class UsageError(Exception):
    pass


def _load_blockset(path: str | None):
    if path is None:
        return default_blockset()
    return load_blockset(path)


def _content_hash(*payloads: dict) -> str:
    digest = hashlib.sha256()
    for payload in payloads:
        digest.update(json.dumps(payload, sort_keys=True).encode())
    return digest.hexdigest()


def _write_manifest(out_dir: str, **fields):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(fields, f, indent=1, sort_keys=True)
    return path


def _flat_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise MagnaforgeError(f"{path}: config must be a flat JSON object")
    return data


def _split_flat(flat: dict) -> tuple:
    groups: dict = {"env": {}, "ppo": {}, "net": {}, "train": {}}
    for key, value in flat.items():
        if "." not in key:
            raise MagnaforgeError(f"config key {key!r} must be namespaced like 'env.d_snap'")
        ns, name = key.split(".", 1)
        if ns not in groups:
            raise MagnaforgeError(f"unknown config namespace {ns!r} in {key!r}")
        groups[ns][name] = value
    return groups["env"], groups["ppo"], groups["net"], groups["train"]


def _build_policy_arg(args, blockset, env_cfg):
    """Resolve --policy/--checkpoint into an acting object."""
    kind = getattr(args, "policy", "checkpoint")
    if kind == "oracle":
        return OracleTeleportPolicy(), "oracle"
    if kind == "random":
        return RandomPolicy(np.random.default_rng(args.seed)), "random"
    if not args.checkpoint:
        raise MagnaforgeError("--checkpoint is required unless --policy oracle/random")
    policy, _, _ = nets.load_checkpoint(args.checkpoint)
    expected = obs_dims(blockset, env_cfg)
    cfg = policy.cfg
    if (cfg.n_blocks, cfg.d_node, cfg.d_edge, cfg.d_global) != (
        expected["n_blocks"], expected["d_node"], expected["d_edge"], expected["d_global"]
    ):
        raise nets.CheckpointMismatch(
            "checkpoint observation dims do not match the blockset/env config"
        )
    return TorchPolicy(policy, deterministic=True), cfg.arch


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_blueprints(args) -> int:
    if args.min_blocks > args.max_blocks:
        raise UsageError("--min-blocks must not exceed --max-blocks")
    if args.min_blocks < 2 or args.max_blocks > 16:
        raise UsageError("block range must lie within [2, 16]")
    blockset = _load_blockset(args.blockset)
    library = generate_blueprints(
        args.seed, args.count, (args.min_blocks, args.max_blocks), blockset
    )
    save_library(library, args.out)
    report = {}
    all_valid = True
    for bp in library.all():
        violations = [str(v) for v in validate_blueprint(bp, blockset)]
        report[bp.id] = violations
        all_valid = all_valid and not violations
    report_path = args.out + ".validation.json"
    with open(report_path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    print(f"wrote {len(library.train)} train / {len(library.test)} test blueprints to {args.out}")
    print(f"validation report: {report_path}")
    return EXIT_OK if all_valid else 1


_TRAIN_MODES = ("multi", "single", "no-attention", "resnet", "single-gripper",
                "no-curriculum", "delay")


def _parse_mode(mode: str):
    head, _, arg = mode.partition(":")
    if head not in _TRAIN_MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {_TRAIN_MODES}")
    if head == "single" and not arg:
        raise UsageError("mode single requires a blueprint id: single:<bp_id>")
    if head == "delay":
        try:
            arg = int(arg)
        except ValueError:
            raise UsageError("mode delay requires an integer: delay:<k>") from None
    return head, arg


def cmd_train(args) -> int:
    mode, mode_arg = _parse_mode(args.mode)
    blockset = _load_blockset(args.blockset)
    env_flat, ppo_flat, net_flat, train_flat = _split_flat(_flat_config(args.config))

    env_cfg = EnvConfig(**{**env_flat})
    if mode == "single-gripper":
        env_cfg = EnvConfig(**{**env_flat, "n_grippers": 1})
    elif mode == "delay":
        env_cfg = EnvConfig(**{**env_flat, "gripper_transition_delay": int(mode_arg)})

    ppo_kwargs = dict(ppo_flat)
    if args.steps is not None:
        ppo_kwargs["total_env_steps"] = args.steps
    workers_env = os.environ.get("MAGNAFORGE_WORKERS")
    if workers_env is not None:
        ppo_kwargs["n_workers"] = int(workers_env)
    if args.workers is not None:
        ppo_kwargs["n_workers"] = args.workers
    ppo_cfg = PPOConfig(**ppo_kwargs)

    library = load_library(args.library, blockset)
    if mode == "single":
        blueprints = [library.by_id(mode_arg)]
    else:
        blueprints = list(library.train)
    if not blueprints:
        raise MagnaforgeError("no training blueprints")

    dims = obs_dims(blockset, env_cfg)
    arch = nets.ARCH_GAT
    if mode == "no-attention":
        arch = nets.ARCH_NO_ATTENTION
    elif mode == "resnet":
        arch = nets.ARCH_RESNET
    net_cfg = NetConfig(
        n_blocks=dims["n_blocks"], d_node=dims["d_node"], d_edge=dims["d_edge"],
        d_global=dims["d_global"], n_grippers=env_cfg.n_grippers, arch=arch,
        **net_flat,
    )
    sampling_mode = "uniform" if mode == "no-curriculum" else "curriculum"

    manifest_path = _write_manifest(
        args.out,
        run_id=os.path.basename(os.path.normpath(args.out)),
        command="train",
        mode=args.mode,
        arch=arch,
        seed=args.seed,
        config_paths=[p for p in (args.config, args.library, args.blockset) if p],
        content_hash=_content_hash(
            blockset_to_dict(blockset),
            {"library": [blueprint_to_dict(bp) for bp in library.all()]},
        ),
        env_config=env_cfg.to_flat_dict(),
        ppo_config={k: v for k, v in vars(ppo_cfg).items()},
        net_config={k: v for k, v in vars(net_cfg).items()},
        start_step=0,
        end_step=None,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    try:
        result = training.train(
            blockset, blueprints, env_cfg, ppo_cfg, net_cfg, args.out,
            seed=args.seed, sampling_mode=sampling_mode, resume=args.resume,
            eval_every=train_flat.get("eval_every", args.eval_every),
            eval_episodes=train_flat.get("eval_episodes", args.eval_episodes),
            checkpoint_every=train_flat.get("checkpoint_every", 100),
            success_stop=args.success_stop,
        )
    except NonFiniteLoss as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    with open(manifest_path) as f:
        manifest = json.load(f)
    manifest["end_step"] = result.env_steps
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    reports.write_training_curves(result.metrics_path, os.path.join(args.out, "training.png"))
    print(f"trained {result.env_steps} env steps over {result.updates} updates")
    print(f"final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    blockset = _load_blockset(args.blockset)
    env_flat, _, _, _ = _split_flat(_flat_config(args.config))
    env_cfg = EnvConfig(**env_flat)
    library = load_library(args.library, blockset)
    if args.split == "train":
        blueprints, flags = list(library.train), [False] * len(library.train)
    elif args.split == "test":
        blueprints, flags = list(library.test), [True] * len(library.test)
    else:
        blueprints = list(library.train) + list(library.test)
        flags = [False] * len(library.train) + [True] * len(library.test)
    if not blueprints:
        raise MagnaforgeError(f"split {args.split!r} has no blueprints")

    actor, arch = _build_policy_arg(args, blockset, env_cfg)
    rng = np.random.default_rng(args.seed)
    report = evaluate(
        None, blueprints, blockset, env_cfg, rng,
        n_episodes=args.episodes, test_flags=flags, policy_override=actor,
    )
    paths = reports.write_eval_report(report, blueprints, flags, args.out)
    _write_manifest(
        args.out, run_id=os.path.basename(os.path.normpath(args.out)), command="eval",
        seed=args.seed, arch=arch, split=args.split, episodes=args.episodes,
        config_paths=[p for p in (args.config, args.library, args.blockset, args.checkpoint) if p],
        content_hash=_content_hash(
            blockset_to_dict(blockset),
            {"library": [blueprint_to_dict(bp) for bp in library.all()]},
        ),
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    if args.dump_trajectories > 0:
        traj_dir = os.path.join(args.out, "trajectories")
        os.makedirs(traj_dir, exist_ok=True)
        env = MagneticAssemblyEnv(blockset, env_cfg)
        for i in range(args.dump_trajectories):
            bp = blueprints[i % len(blueprints)]
            rollout_trajectory(
                env, bp, actor, seed=args.seed + 1000 + i,
                path=os.path.join(traj_dir, f"episode_{i:04d}.jsonl"),
            )
    print(json.dumps(report.buckets, indent=1))
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_reset_free(args) -> int:
    blockset = _load_blockset(args.blockset)
    env_flat, _, _, _ = _split_flat(_flat_config(args.config))
    env_cfg = EnvConfig(**env_flat)
    library = load_library(args.library, blockset)
    pool = [bp for bp in library.train if bp.n_blocks_used >= args.min_blocks]
    if not pool:
        raise MagnaforgeError(
            f"no training blueprints with at least {args.min_blocks} blocks"
        )
    actor, _ = _build_policy_arg(args, blockset, env_cfg)
    rng = np.random.default_rng(args.seed)
    per_episode = []
    for _ in range(args.episodes):
        flags = reset_free_run(
            actor, pool, blockset, env_cfg, rng,
            n_targets=args.targets, per_target_cap=args.cap,
        )
        per_episode.append([bool(v) for v in flags])
    rates = np.array([[1.0 if v else 0.0 for v in row] for row in per_episode])
    episode_rates = rates.mean(axis=1)
    result = {
        "mean": float(episode_rates.mean()),
        "std": float(episode_rates.std()),
        "per_episode": [[int(v) for v in row] for row in per_episode],
        "episodes": args.episodes,
        "targets": args.targets,
        "min_blocks": args.min_blocks,
        "per_target_cap": args.cap,
    }
    paths = reports.write_reset_free_report(result, args.out)
    print(f"reset-free success {result['mean']:.3f} +/- {result['std']:.3f} "
          f"over {args.episodes} x {args.targets} targets")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_replay(args) -> int:
    blockset = _load_blockset(args.blockset)
    ok, step = replay_trajectory(args.trajectory, blockset)
    if ok:
        print("replay reproduced the log bit-exactly")
        return EXIT_OK
    print(f"replay diverged at step {step}", file=sys.stderr)
    return EXIT_DIVERGED


def cmd_attention(args) -> int:
    blockset = _load_blockset(args.blockset)
    policy, _, _ = nets.load_checkpoint(args.checkpoint)
    if policy.cfg.arch == nets.ARCH_RESNET:
        raise MagnaforgeError("attention dumps require a graph architecture checkpoint")
    from .blocks import blueprint_from_dict
    from .env import EnvConfig as EC, action_from_jsonable

    with open(args.trajectory) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    header = lines[0]
    env_cfg = EC.from_flat_dict(header["env_config"])
    blueprint = blueprint_from_dict(header["blueprint"], blockset)
    preset = None
    if header.get("preset"):
        preset = blueprint_from_dict(header["preset"], blockset)
    env = MagneticAssemblyEnv(blockset, env_cfg)
    rng = np.random.default_rng(int(header["seed"]))
    env.reset(blueprint, rng, preset=preset)
    obs_seq = [env.build_obs()]
    for rec in lines[1:-1]:
        env.step(action_from_jsonable(rec["action"]))
        obs_seq.append(env.build_obs())
    training.attention_dump(policy, obs_seq, args.out)
    print(f"wrote attention for {len(obs_seq)} steps to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="magnaforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-blueprints", help="generate a blueprint library")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--min-blocks", type=int, default=2)
    p.add_argument("--max-blocks", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--blockset")
    p.set_defaults(func=cmd_gen_blueprints)

    p = sub.add_parser("train", help="train an agent")
    p.add_argument("--out", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--mode", default="multi",
                   help="multi | single:<bp_id> | no-attention | resnet | "
                        "single-gripper | no-curriculum | delay:<k>")
    p.add_argument("--config", help="flat key-value JSON config overlay")
    p.add_argument("--blockset")
    p.add_argument("--resume")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="override ppo.total_env_steps")
    p.add_argument("--workers", type=int)
    p.add_argument("--eval-every", type=int, default=20)
    p.add_argument("--eval-episodes", type=int, default=8)
    p.add_argument("--success-stop", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a library")
    p.add_argument("--checkpoint")
    p.add_argument("--policy", default="checkpoint", choices=["checkpoint", "oracle", "random"])
    p.add_argument("--library", required=True)
    p.add_argument("--split", default="all", choices=["train", "test", "all"])
    p.add_argument("--episodes", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--blockset")
    p.add_argument("--dump-trajectories", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reset-free", help="reset-free evaluation protocol")
    p.add_argument("--checkpoint")
    p.add_argument("--policy", default="checkpoint", choices=["checkpoint", "oracle", "random"])
    p.add_argument("--library", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--targets", type=int, default=10)
    p.add_argument("--min-blocks", type=int, default=12)
    p.add_argument("--cap", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--blockset")
    p.set_defaults(func=cmd_reset_free)

    p = sub.add_parser("replay", help="re-simulate a trajectory log and audit determinism")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--blockset")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("attention", help="dump per-layer per-head attention for a trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--blockset")
    p.set_defaults(func=cmd_attention)

    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MagnaforgeError, FileNotFoundError, json.JSONDecodeError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
