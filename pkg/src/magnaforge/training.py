"""PPO learner, rollout workers, curriculum task sampling, and the
evaluation protocols.

Orchestration contract: a single learner owns the parameters; each rollout
worker owns a private environment and rng stream and steps with a frozen
snapshot for a full segment (synchronous PPO, so importance ratios stay
well-defined). The default driver advances all workers in lockstep so the
policy evaluation batches across them; segments are concatenated in worker
order, which keeps full runs deterministic for a fixed seed and worker
count.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import nets
from .blocks import BlockSet, Blueprint
from .env import Action, EnvConfig, MagneticAssemblyEnv
from .errors import LengthMismatch, NonFiniteLoss
from .nets import NetConfig, PolicyOutput, forward_obs, log_prob_torch, entropy_torch
from .observe import obs_dims


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs_per_batch: int = 4
    minibatch_size: int = 256
    learning_rate: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    target_kl: float | None = 0.05
    adam_eps: float = 1e-5
    rollout_length: int = 128
    n_workers: int = 8
    total_env_steps: int = 1_000_000

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")


@dataclass
class CurriculumState:
    success_rates: np.ndarray
    probs: np.ndarray
    tau: float = 0.2
    temp: float = 0.5
    decay: float = 0.99

    @staticmethod
    def init(n_blueprints: int, tau: float = 0.2, temp: float = 0.5,
             decay: float = 0.99) -> "CurriculumState":
        return CurriculumState(
            success_rates=np.zeros(n_blueprints, dtype=np.float64),
            probs=np.full(n_blueprints, 1.0 / float(n_blueprints)),
            tau=tau, temp=temp, decay=decay,
        )


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def curriculum_update(cs: CurriculumState, episode_results) -> CurriculumState:
    """EMA the per-blueprint success rates, decay everything, re-soften.

    episode_results: iterable of (blueprint_index, success in {0, 1}).
    The decay keeps every blueprint's sampling probability strictly
    positive, so nothing starves.
    """
    rates = cs.success_rates.copy()
    for b_i, s in episode_results:
        if not 0 <= b_i < len(rates):
            raise IndexError(f"unknown blueprint index {b_i}")
        rates[b_i] = (1.0 - cs.tau) * rates[b_i] + cs.tau * float(s)
    rates *= cs.decay
    probs = _softmax((1.0 - rates) / cs.temp)
    return CurriculumState(rates, probs, cs.tau, cs.temp, cs.decay)


def sample_blueprint(cs: CurriculumState, rng: np.random.Generator,
                     mode: str = "curriculum") -> int:
    if mode == "uniform":
        return int(rng.integers(0, len(cs.probs)))
    if mode != "curriculum":
        raise ValueError(f"unknown sampling mode {mode!r}")
    return int(rng.choice(len(cs.probs), p=cs.probs))


# ---------------------------------------------------------------------------
# GAE
# ---------------------------------------------------------------------------

def gae(rewards, values, dones, bootstrap: float, gamma: float, lam: float):
    """Generalized advantage estimation over one contiguous segment.

    dones mark episode boundaries; `bootstrap` is V(s_T) for a segment cut
    mid-episode. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise LengthMismatch(
            f"rewards/values/dones lengths differ: {len(rewards)}/{len(values)}/{len(dones)}"
        )
    t = len(rewards)
    adv = np.zeros(t, dtype=np.float64)
    last = 0.0
    next_value = float(bootstrap)
    for i in reversed(range(t)):
        not_done = 1.0 - dones[i]
        delta = rewards[i] + gamma * next_value * not_done - values[i]
        last = delta + gamma * lam * not_done * last
        adv[i] = last
        next_value = values[i]
    return adv, adv + values


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    obs: list
    choices: np.ndarray  # (T, G)
    moves: np.ndarray  # (T, N, 6)
    log_probs: np.ndarray  # (T,)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    blueprint_ids: np.ndarray
    bootstrap: float
    episode_results: list  # (blueprint_index, success)
    episode_rewards: list  # completed-episode returns


class TorchPolicy:
    """Adapts a nets policy module to the environment's policy protocol."""

    def __init__(self, policy: torch.nn.Module, rng: np.random.Generator | None = None,
                 deterministic: bool = False):
        self.policy = policy
        self.rng = rng or np.random.default_rng(0)
        self.deterministic = deterministic

    def act(self, obs, env: MagneticAssemblyEnv) -> Action:
        with torch.no_grad():
            out = forward_obs(self.policy, obs)
        sample = nets.sample_action(out, self.rng, deterministic=self.deterministic)
        return Action(sample.gripper_choice, sample.block_moves)


class RolloutWorker:
    """Owns one environment; collects fixed-length segments with a frozen
    parameter snapshot. Episode state persists across segments."""

    def __init__(self, worker_id: int, blockset: BlockSet, blueprints: list,
                 env_config: EnvConfig, seed: int, sampling_mode: str = "curriculum"):
        self.worker_id = worker_id
        self.blueprints = blueprints
        self.env = MagneticAssemblyEnv(blockset, env_config)
        self.rng = np.random.default_rng([seed, worker_id])
        self.sampling_mode = sampling_mode
        self.bp_index = None
        self.obs = None
        self.episode_reward = 0.0

    def _reset_episode(self, curriculum: CurriculumState):
        self.bp_index = sample_blueprint(curriculum, self.rng, self.sampling_mode)
        bp = self.blueprints[self.bp_index]
        preset = None
        if self.rng.random() < self.env.config.blueprint_reset_prob:
            preset = self.blueprints[int(self.rng.integers(0, len(self.blueprints)))]
        result = self.env.reset(bp, self.rng, preset=preset)
        self.obs = result.obs
        self.episode_reward = 0.0

    def collect(self, policy: torch.nn.Module, steps: int,
                curriculum: CurriculumState) -> RolloutBatch:
        n = self.env.blockset.n_blocks
        g = self.env.config.n_grippers
        obs_list, choices, moves = [], np.zeros((steps, g), dtype=np.int64), np.zeros((steps, n, 6))
        log_probs = np.zeros(steps)
        rewards = np.zeros(steps)
        values = np.zeros(steps)
        dones = np.zeros(steps, dtype=bool)
        bp_ids = np.zeros(steps, dtype=np.int64)
        episode_results = []
        episode_rewards = []
        with torch.no_grad():
            if self.obs is None or self.env.done:
                self._reset_episode(curriculum)
            for t in range(steps):
                out = forward_obs(policy, self.obs)
                sample = nets.sample_action(out, self.rng)
                obs_list.append(self.obs)
                choices[t] = sample.gripper_choice
                moves[t] = sample.block_moves
                log_probs[t] = sample.log_prob
                values[t] = float(out.value[0])
                bp_ids[t] = self.bp_index
                result = self.env.step(Action(sample.gripper_choice, sample.block_moves))
                rewards[t] = result.reward
                dones[t] = result.done
                self.obs = result.obs
                self.episode_reward += result.reward
                if result.done:
                    episode_results.append((self.bp_index, 1.0 if result.info["success"] else 0.0))
                    episode_rewards.append(self.episode_reward)
                    self._reset_episode(curriculum)
            if dones[-1]:
                bootstrap = 0.0
            else:
                out = forward_obs(policy, self.obs)
                bootstrap = float(out.value[0])
        return RolloutBatch(obs_list, choices, moves, log_probs, rewards, values,
                            dones, bp_ids, bootstrap, episode_results, episode_rewards)


def collect_lockstep(workers: list, policy: torch.nn.Module, steps: int,
                     curriculum: CurriculumState) -> list:
    """Step all workers in lockstep with one batched forward per step.

    Semantically equivalent to each worker collecting its own segment
    (private envs and rng streams, frozen snapshot, worker-ordered output);
    batching the policy evaluation is what makes small machines viable.
    """
    n_workers = len(workers)
    if n_workers == 0:
        return []
    n = workers[0].env.blockset.n_blocks
    g = workers[0].env.config.n_grippers
    per = [
        {
            "obs": [], "choices": np.zeros((steps, g), dtype=np.int64),
            "moves": np.zeros((steps, n, 6)), "log_probs": np.zeros(steps),
            "rewards": np.zeros(steps), "values": np.zeros(steps),
            "dones": np.zeros(steps, dtype=bool),
            "bp_ids": np.zeros(steps, dtype=np.int64),
            "episode_results": [], "episode_rewards": [],
        }
        for _ in range(n_workers)
    ]
    with torch.no_grad():
        for w in workers:
            if w.obs is None or w.env.done:
                w._reset_episode(curriculum)
        for t in range(steps):
            out = forward_obs(policy, [w.obs for w in workers])
            for i, w in enumerate(workers):
                sample = nets.sample_action(out, w.rng, index=i)
                rec = per[i]
                rec["obs"].append(w.obs)
                rec["choices"][t] = sample.gripper_choice
                rec["moves"][t] = sample.block_moves
                rec["log_probs"][t] = sample.log_prob
                rec["values"][t] = float(out.value[i])
                rec["bp_ids"][t] = w.bp_index
                result = w.env.step(Action(sample.gripper_choice, sample.block_moves))
                rec["rewards"][t] = result.reward
                rec["dones"][t] = result.done
                w.obs = result.obs
                w.episode_reward += result.reward
                if result.done:
                    rec["episode_results"].append(
                        (w.bp_index, 1.0 if result.info["success"] else 0.0)
                    )
                    rec["episode_rewards"].append(w.episode_reward)
                    w._reset_episode(curriculum)
        boot_out = forward_obs(policy, [w.obs for w in workers])
    batches = []
    for i, w in enumerate(workers):
        rec = per[i]
        bootstrap = 0.0 if rec["dones"][-1] else float(boot_out.value[i])
        batches.append(RolloutBatch(
            rec["obs"], rec["choices"], rec["moves"], rec["log_probs"],
            rec["rewards"], rec["values"], rec["dones"], rec["bp_ids"],
            bootstrap, rec["episode_results"], rec["episode_rewards"],
        ))
    return batches


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

def ppo_loss(policy: torch.nn.Module, obs_tensors: tuple, choices: torch.Tensor,
             moves: torch.Tensor, old_log_probs: torch.Tensor,
             advantages: torch.Tensor, returns: torch.Tensor, cfg: PPOConfig):
    """Clipped-surrogate PPO objective on one minibatch.

    Returns (loss, parts) where parts carries the unweighted components and
    diagnostics (clip fraction, sample KL estimate).
    """
    out = policy(*obs_tensors)
    logp = log_prob_torch(out, choices, moves)
    ratio = torch.exp(logp - old_log_probs)
    surr = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    policy_loss = -torch.min(surr, clipped).mean()
    value_loss = ((out.value - returns) ** 2).mean()
    entropy = entropy_torch(out).mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    with torch.no_grad():
        parts = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "clip_frac": float(((ratio - 1.0).abs() > cfg.clip_eps).float().mean()),
            "approx_kl": float((old_log_probs - logp).mean()),
        }
    return loss, parts


def prepare_advantages(batches: list, cfg: PPOConfig):
    """Per-segment GAE, then per-update normalization (mean 0, std 1)."""
    adv_list, ret_list = [], []
    for b in batches:
        a, r = gae(b.rewards, b.values, b.dones, b.bootstrap, cfg.gamma, cfg.gae_lambda)
        adv_list.append(a)
        ret_list.append(r)
    advantages = np.concatenate(adv_list)
    returns = np.concatenate(ret_list)
    std = float(advantages.std())
    advantages = (advantages - advantages.mean()) / max(std, 1e-8)
    return advantages, returns


def ppo_update(policy: torch.nn.Module, optimizer: torch.optim.Optimizer,
               batches: list, cfg: PPOConfig, rng: np.random.Generator) -> dict:
    """One synchronous PPO update over per-worker segments.

    Raises NonFiniteLoss (with parameters restored) if any loss goes
    non-finite.
    """
    device_dtype = next(policy.parameters()).dtype
    advantages, returns = prepare_advantages(batches, cfg)

    obs_all = [o for b in batches for o in b.obs]
    obs_tensors = nets.obs_to_tensors(obs_all, policy.cfg, dtype=device_dtype)
    choices = torch.as_tensor(np.concatenate([b.choices for b in batches]), dtype=torch.long)
    moves = torch.as_tensor(np.concatenate([b.moves for b in batches]), dtype=device_dtype)
    old_log_probs = torch.as_tensor(
        np.concatenate([b.log_probs for b in batches]), dtype=device_dtype
    )
    adv_t = torch.as_tensor(advantages, dtype=device_dtype)
    ret_t = torch.as_tensor(returns, dtype=device_dtype)

    total = len(obs_all)
    snapshot = {k: v.detach().clone() for k, v in policy.state_dict().items()}
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "clip_frac": 0.0, "approx_kl": 0.0}
    n_minibatches = 0
    first_step = True
    stop = False
    try:
        for _ in range(cfg.epochs_per_batch):
            if stop:
                break
            perm = rng.permutation(total)
            for start in range(0, total, cfg.minibatch_size):
                idx_t = torch.as_tensor(perm[start:start + cfg.minibatch_size],
                                        dtype=torch.long)
                mb = tuple(t[idx_t] for t in obs_tensors)
                if first_step:
                    # parameters provably unchanged since the rollout snapshot,
                    # so the true ratio is exactly 1; recompute old-logp through
                    # the identical batched path to avoid float noise
                    with torch.no_grad():
                        out0 = policy(*mb)
                        mb_old = log_prob_torch(out0, choices[idx_t], moves[idx_t])
                    first_step = False
                else:
                    mb_old = old_log_probs[idx_t]
                loss, parts = ppo_loss(
                    policy, mb, choices[idx_t], moves[idx_t], mb_old,
                    adv_t[idx_t], ret_t[idx_t], cfg,
                )
                if cfg.target_kl is not None and parts["approx_kl"] > 1.5 * cfg.target_kl:
                    stop = True
                    break
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite loss ({parts})")
                optimizer.zero_grad()
                loss.backward()
                if cfg.max_grad_norm > 0:
                    torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
                optimizer.step()
                for k in stats:
                    stats[k] += parts[k]
                n_minibatches += 1
    except NonFiniteLoss:
        policy.load_state_dict(snapshot)
        raise
    for k in stats:
        stats[k] /= max(n_minibatches, 1)
    stats["kl_stopped"] = 1.0 if stop else 0.0
    stats["adv_mean"] = float(advantages.mean())
    stats["adv_std"] = float(advantages.std())
    stats["n_minibatches"] = float(n_minibatches)
    return stats


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_blueprint: dict  # id -> success rate
    buckets: dict  # bucket name -> rate or None
    n_episodes: int

    def to_dict(self) -> dict:
        return {"per_blueprint": self.per_blueprint, "buckets": self.buckets,
                "n_episodes": self.n_episodes}


def bucket_of(bp: Blueprint, is_test: bool) -> str | None:
    n = bp.n_blocks_used
    if is_test:
        return "test12_16" if 12 <= n <= 16 else "test_other"
    if 2 <= n <= 6:
        return "train2_6"
    if 7 <= n <= 11:
        return "train7_11"
    if 12 <= n <= 16:
        return "train12_16"
    return None


def evaluate(policy: torch.nn.Module, blueprints: list, blockset: BlockSet,
             env_config: EnvConfig, rng: np.random.Generator,
             n_episodes: int = 40, test_flags: list | None = None,
             policy_override=None) -> EvalReport:
    """Deterministic-policy success rates from scattered resets.

    test_flags marks which blueprints belong to the held-out split (for
    bucket aggregation). policy_override substitutes any object with an
    ``act(obs, env)`` method (oracle or random baselines).
    """
    test_flags = test_flags or [False] * len(blueprints)
    env = MagneticAssemblyEnv(blockset, env_config)
    actor = policy_override or TorchPolicy(policy, deterministic=True)
    per_bp = {}
    bucket_hits: dict = {}
    for bp, is_test in zip(blueprints, test_flags):
        wins = 0
        for _ in range(n_episodes):
            env.reset(bp, rng)
            while not env.done:
                result = env.step(actor.act(env.build_obs(), env))
                if result.info["success"]:
                    wins += 1
                    break
        rate = wins / n_episodes
        per_bp[bp.id] = rate
        bucket = bucket_of(bp, is_test)
        if bucket:
            bucket_hits.setdefault(bucket, []).append(rate)
    buckets = {
        name: (float(np.mean(vals)) if vals else None)
        for name, vals in sorted(bucket_hits.items())
    }
    for name in ("train2_6", "train7_11", "train12_16", "test12_16"):
        buckets.setdefault(name, None)
    return EvalReport(per_bp, buckets, n_episodes)


# ---------------------------------------------------------------------------
# Attention dumps
# ---------------------------------------------------------------------------

def attention_dump(policy: torch.nn.Module, obs_sequence, out_path):
    """One JSONL record per (step, layer, head): row-stochastic block
    attention matrices."""
    with open(out_path, "w") as f, torch.no_grad():
        for step, obs in enumerate(obs_sequence):
            out = forward_obs(policy, obs, want_attention=True)
            for layer, att in enumerate(out.attention):
                mats = att[0].cpu().numpy()
                for head in range(mats.shape[0]):
                    rec = {
                        "step": step,
                        "layer": layer,
                        "head": head,
                        "weights": [[float(x) for x in row] for row in mats[head]],
                    }
                    f.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    env_steps: int
    updates: int
    final_checkpoint: str
    last_eval: dict | None
    metrics_path: str


def save_training_checkpoint(path, policy, optimizer, env_steps: int, updates: int,
                             curriculum: CurriculumState):
    opt_arrays = {}
    for i, state in optimizer.state_dict()["state"].items():
        for key, val in state.items():
            if isinstance(val, torch.Tensor):
                opt_arrays[f"opt__{i}__{key}"] = val.cpu().numpy()
            else:
                opt_arrays[f"opt__{i}__{key}"] = np.asarray(val)
    opt_arrays["curriculum__rates"] = curriculum.success_rates
    opt_arrays["curriculum__probs"] = curriculum.probs
    nets.save_checkpoint(
        path, policy,
        extra={"env_steps": env_steps, "updates": updates,
               "curriculum": {"tau": curriculum.tau, "temp": curriculum.temp,
                              "decay": curriculum.decay}},
        extra_arrays=opt_arrays,
    )


def load_training_state(path):
    policy, extra, arrays = nets.load_checkpoint(path)
    curriculum = None
    if "curriculum__rates" in arrays and "curriculum" in extra:
        c = extra["curriculum"]
        curriculum = CurriculumState(
            arrays["curriculum__rates"].astype(np.float64),
            arrays["curriculum__probs"].astype(np.float64),
            c["tau"], c["temp"], c["decay"],
        )
    opt_state = {}
    for name, arr in arrays.items():
        if not name.startswith("opt__"):
            continue
        _, idx, key = name.split("__", 2)
        opt_state.setdefault(int(idx), {})[key] = arr
    return policy, extra, curriculum, opt_state


def _restore_optimizer(optimizer: torch.optim.Optimizer, opt_state: dict, policy):
    if not opt_state:
        return
    sd = optimizer.state_dict()
    params = sd["param_groups"][0]["params"]
    state = {}
    for i in params:
        if i in opt_state:
            entry = {}
            for key, arr in opt_state[i].items():
                tensor = torch.as_tensor(arr)
                entry[key] = tensor
            state[i] = entry
    sd["state"] = state
    optimizer.load_state_dict(sd)


def train(blockset: BlockSet, blueprints: list, env_config: EnvConfig,
          ppo_config: PPOConfig, net_config: NetConfig, out_dir: str,
          seed: int = 0, sampling_mode: str = "curriculum",
          resume: str | None = None, eval_every: int = 20,
          checkpoint_every: int = 50, eval_episodes: int = 8,
          success_stop: float | None = None, test_blueprints: list | None = None,
          log=print) -> TrainResult:
    """Synchronous multi-task PPO. Writes metrics JSONL and checkpoints to
    out_dir; returns a summary.

    Deterministic for a fixed seed and worker count on one machine.
    ``success_stop`` ends training early once the recent train success rate
    reaches the threshold (evaluated at eval points).
    """
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(seed)
    if resume:
        policy, extra, curriculum, opt_state = load_training_state(resume)
        if asdict(policy.cfg) != asdict(net_config):
            raise nets.CheckpointMismatch(
                "resume checkpoint architecture differs from requested net config"
            )
        env_steps = int(extra.get("env_steps", 0))
        updates = int(extra.get("updates", 0))
        if curriculum is None or len(curriculum.probs) != len(blueprints):
            curriculum = CurriculumState.init(len(blueprints))
    else:
        policy = nets.build_policy(net_config)
        curriculum = CurriculumState.init(len(blueprints))
        opt_state = {}
        env_steps = 0
        updates = 0
    optimizer = torch.optim.Adam(
        policy.parameters(), lr=ppo_config.learning_rate, eps=ppo_config.adam_eps
    )
    _restore_optimizer(optimizer, opt_state, policy)

    workers = [
        RolloutWorker(w, blockset, blueprints, env_config, seed, sampling_mode)
        for w in range(ppo_config.n_workers)
    ]
    update_rng = np.random.default_rng([seed, 917])
    eval_rng_seed = [seed, 421]
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    metrics_f = open(metrics_path, "a")
    last_eval = None
    recent_results = []
    start_time = time.time()
    final_ckpt = os.path.join(out_dir, "checkpoint_final.npz")
    try:
        while env_steps < ppo_config.total_env_steps:
            policy.eval()
            batches = collect_lockstep(workers, policy, ppo_config.rollout_length, curriculum)
            policy.train()
            stats = ppo_update(policy, optimizer, batches, ppo_config, update_rng)
            episode_results = [r for b in batches for r in b.episode_results]
            episode_rewards = [r for b in batches for r in b.episode_rewards]
            if sampling_mode == "curriculum" and episode_results:
                curriculum = curriculum_update(curriculum, episode_results)
            recent_results.extend(episode_results)
            recent_results = recent_results[-200:]
            env_steps += ppo_config.rollout_length * ppo_config.n_workers
            updates += 1

            record = {
                "update": updates,
                "env_steps": env_steps,
                "wall_clock_s": round(time.time() - start_time, 2),
                "mean_episode_reward": (
                    float(np.mean(episode_rewards)) if episode_rewards else None
                ),
                "recent_success_rate": (
                    float(np.mean([s for _, s in recent_results])) if recent_results else None
                ),
                **{k: round(v, 6) for k, v in stats.items()},
            }
            if updates % eval_every == 0:
                report = evaluate(
                    policy, blueprints, blockset, env_config,
                    np.random.default_rng(eval_rng_seed + [updates]),
                    n_episodes=eval_episodes,
                )
                last_eval = report.to_dict()
                record["eval"] = last_eval
                train_rate = float(np.mean(list(report.per_blueprint.values())))
                record["eval_train_rate"] = train_rate
                log(f"update {updates} steps {env_steps} "
                    f"eval success {train_rate:.2f} reward {record['mean_episode_reward']}")
                if success_stop is not None and train_rate >= success_stop:
                    metrics_f.write(json.dumps(record) + "\n")
                    break
            metrics_f.write(json.dumps(record) + "\n")
            metrics_f.flush()
            if updates % checkpoint_every == 0:
                save_training_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{updates:06d}.npz"),
                    policy, optimizer, env_steps, updates, curriculum,
                )
    finally:
        metrics_f.close()
        save_training_checkpoint(final_ckpt, policy, optimizer, env_steps, updates, curriculum)
    return TrainResult(env_steps, updates, final_ckpt, last_eval, metrics_path)
