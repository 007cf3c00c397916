"""Desk-scale learning probe: single 2-block blueprint, small net."""

import sys
import numpy as np
import torch

torch.set_num_threads(2)

from magnaforge import blocks, env, nets, observe, training

arch = sys.argv[1] if len(sys.argv) > 1 else "gat"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 150_000
d_model = int(sys.argv[3]) if len(sys.argv) > 3 else 32

bs = blocks.default_blockset()
lib = blocks.generate_blueprints(11, 10, (2, 2))
bp = lib.train[0]
print("blueprint", bp.id, "blocks", bp.blocks, flush=True)

ecfg = env.EnvConfig()
dims = observe.obs_dims(bs, ecfg)
ncfg = nets.NetConfig(
    n_blocks=16, d_node=dims["d_node"], d_edge=dims["d_edge"],
    d_global=dims["d_global"], n_grippers=2, arch=arch,
    d_model=d_model, d_key=d_model // 2, d_ff=d_model * 2, critic_width=256,
)
pcfg = training.PPOConfig(total_env_steps=steps, rollout_length=128, n_workers=8,
                          minibatch_size=256)
result = training.train(
    bs, [bp], ecfg, pcfg, ncfg, out_dir=f"/tmp/probe_{arch}_{d_model}",
    seed=0, eval_every=25, eval_episodes=16, success_stop=0.85,
)
print("DONE", result.env_steps, "steps", result.last_eval, flush=True)
