import numpy as np
import pytest
import torch

from magnaforge import nets
from magnaforge.blocks import default_blockset, generate_blueprints
from magnaforge.env import EnvConfig, MagneticAssemblyEnv, RandomPolicy
from magnaforge.errors import CheckpointMismatch, ShapeError
from magnaforge.nets import (
    ARCH_GAT,
    ARCH_NO_ATTENTION,
    ARCH_RESNET,
    NetConfig,
    build_policy,
    entropy_torch,
    forward_obs,
    load_checkpoint,
    log_prob_torch,
    obs_to_tensors,
    sample_action,
    save_checkpoint,
)

from util import permute_obs, permute_problem

torch.set_num_threads(2)

BS = default_blockset()
LIB = generate_blueprints(13, 6, (2, 6), BS)
ENV_CFG = EnvConfig()


def micro_cfg(arch=ARCH_GAT, n_blocks=16):
    from magnaforge.observe import obs_dims

    dims = obs_dims(BS, ENV_CFG)
    return NetConfig(
        n_blocks=n_blocks, d_node=dims["d_node"], d_edge=dims["d_edge"],
        d_global=2 * (6 + 3 + 3 + n_blocks + 1), n_grippers=2, arch=arch,
        d_model=16, n_heads=2, d_key=8, d_ff=16, critic_width=16,
        resnet_blocks=2, resnet_width=16 * n_blocks,
    )


def rollout_obs(seed=0, steps=6):
    env = MagneticAssemblyEnv(BS, ENV_CFG)
    bp = LIB.all()[seed % len(LIB.all())]
    env.reset(bp, np.random.default_rng(seed))
    policy = RandomPolicy(np.random.default_rng(seed + 1))
    for _ in range(steps):
        if env.done:
            break
        env.step(policy.act(None, env))
    return env, env.build_obs()


# -- encoder behavior ---------------------------------------------------------

def test_encode_permutation_equivariance_and_global_invariance():
    env, obs = rollout_obs(1)
    torch.manual_seed(0)
    policy = build_policy(micro_cfg()).double()
    nodes, edges, globals_ = obs_to_tensors(obs, policy.cfg, dtype=torch.float64)
    h, g, _ = policy.encode(nodes, edges, globals_)
    perm = np.random.default_rng(3).permutation(16)
    bs2, bp2, st2 = permute_problem(BS, env.blueprint, env.state, perm)
    from magnaforge.observe import build_obs

    obs_p = build_obs(st2, bp2, bs2, ENV_CFG)
    h2, g2, _ = policy.encode(*obs_to_tensors(obs_p, policy.cfg, dtype=torch.float64))
    assert (h2[0][perm] - h[0]).abs().max() < 1e-9
    assert (g2 - g).abs().max() < 1e-6


def test_zero_weights_give_zero_node_embeddings():
    _, obs = rollout_obs(2)
    policy = build_policy(micro_cfg()).double()
    with torch.no_grad():
        for p in policy.parameters():
            p.zero_()
    nodes, edges, globals_ = obs_to_tensors(obs, policy.cfg, dtype=torch.float64)
    h, g, _ = policy.encode(nodes, edges, globals_)
    assert h.abs().max() == 0.0
    assert g.abs().max() == 0.0


def test_attention_rows_sum_to_one():
    _, obs = rollout_obs(3)
    torch.manual_seed(1)
    policy = build_policy(micro_cfg()).double()
    out = forward_obs(policy, obs, want_attention=True)
    assert len(out.attention) == policy.cfg.n_layers
    for att in out.attention:
        assert att.shape == (1, 2, 16, 16)
        sums = att.sum(dim=-1)
        assert (sums - 1.0).abs().max() < 1e-9
        assert att.min() >= 0.0
        assert torch.all(att[0, :, torch.arange(16), torch.arange(16)] == 0.0)


def test_no_attention_equals_attention_on_symmetric_input():
    cfg = micro_cfg(ARCH_GAT)
    torch.manual_seed(2)
    gat = build_policy(cfg).double()
    noatt = build_policy(micro_cfg(ARCH_NO_ATTENTION)).double()
    noatt.load_state_dict(gat.state_dict())
    # identical blocks: every node/edge feature constant -> equal logits
    nodes = torch.full((1, 16, cfg.d_node), 0.3, dtype=torch.float64)
    edges = torch.full((1, 16, 15, cfg.d_edge), -0.2, dtype=torch.float64)
    globals_ = torch.full((1, cfg.d_global), 0.1, dtype=torch.float64)
    out_a = gat(nodes, edges, globals_)
    out_b = noatt(nodes, edges, globals_)
    assert (out_a.move_mean - out_b.move_mean).abs().max() < 1e-9
    assert (out_a.value - out_b.value).abs().max() < 1e-9


def test_no_attention_differs_on_asymmetric_input():
    _, obs = rollout_obs(4)
    torch.manual_seed(3)
    gat = build_policy(micro_cfg(ARCH_GAT)).double()
    noatt = build_policy(micro_cfg(ARCH_NO_ATTENTION)).double()
    noatt.load_state_dict(gat.state_dict())
    out_a = forward_obs(gat, obs)
    out_b = forward_obs(noatt, obs)
    assert (out_a.move_mean - out_b.move_mean).abs().max() > 1e-8


# -- policy decoding ------------------------------------------------------------

def test_key_scaling_preserves_argmax():
    _, obs = rollout_obs(5)
    torch.manual_seed(4)
    policy = build_policy(micro_cfg()).double()
    out1 = forward_obs(policy, obs)
    with torch.no_grad():
        policy.heads.key_head.weight.mul_(3.0)
        policy.heads.key_head.bias.mul_(3.0)
    out2 = forward_obs(policy, obs)
    assert torch.allclose(out2.select_logits, out1.select_logits * 3.0, atol=1e-9)
    assert torch.equal(out1.select_logits.argmax(-1), out2.select_logits.argmax(-1))


def test_value_matches_critic_on_global_embedding():
    _, obs = rollout_obs(6)
    torch.manual_seed(5)
    policy = build_policy(micro_cfg()).double()
    nodes, edges, globals_ = obs_to_tensors(obs, policy.cfg, dtype=torch.float64)
    h, g, _ = policy.encode(nodes, edges, globals_)
    direct = policy.heads.critic(g).squeeze(-1)
    out = forward_obs(policy, obs)
    assert torch.allclose(out.value, direct, atol=1e-12)


def test_policy_permutation_equivariance_full():
    env, obs = rollout_obs(7)
    for arch in (ARCH_GAT, ARCH_NO_ATTENTION):
        torch.manual_seed(6)
        policy = build_policy(micro_cfg(arch)).double()
        out = forward_obs(policy, obs)
        perm = np.random.default_rng(8).permutation(16)
        bs2, bp2, st2 = permute_problem(BS, env.blueprint, env.state, perm)
        from magnaforge.observe import build_obs

        out_p = forward_obs(policy, build_obs(st2, bp2, bs2, ENV_CFG))
        assert (out_p.select_logits[0][:, perm] - out.select_logits[0]).abs().max() < 1e-5
        assert (out_p.move_mean[0][perm] - out.move_mean[0]).abs().max() < 1e-5
        assert (out_p.value - out.value).abs().max() < 1e-5


# -- sampling -------------------------------------------------------------------

def test_sample_deterministic_mode_reproducible():
    _, obs = rollout_obs(8)
    torch.manual_seed(7)
    policy = build_policy(micro_cfg()).double()
    out = forward_obs(policy, obs)
    a = sample_action(out, np.random.default_rng(0), deterministic=True)
    b = sample_action(out, np.random.default_rng(99), deterministic=True)
    assert np.array_equal(a.gripper_choice, b.gripper_choice)
    assert np.array_equal(a.block_moves, b.block_moves)
    assert np.array_equal(a.gripper_choice, out.select_logits[0].argmax(-1).numpy())


def test_sample_log_prob_matches_torch_and_is_finite():
    _, obs = rollout_obs(9)
    torch.manual_seed(8)
    policy = build_policy(micro_cfg()).double()
    out = forward_obs(policy, obs)
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = sample_action(out, rng)
        assert np.isfinite(s.log_prob)
        lp = log_prob_torch(
            out, torch.as_tensor(s.gripper_choice)[None], torch.as_tensor(s.block_moves)[None]
        )
        assert abs(float(lp) - s.log_prob) < 1e-9
        ent = entropy_torch(out)
        assert abs(float(ent) - s.entropy) < 1e-9


@pytest.mark.slow
def test_sampled_moves_monte_carlo_mean():
    _, obs = rollout_obs(10)
    torch.manual_seed(9)
    policy = build_policy(micro_cfg()).double()
    out = forward_obs(policy, obs)
    rng = np.random.default_rng(2)
    n = 100_000
    acc = np.zeros((16, 6))
    for _ in range(n):
        acc += sample_action(out, rng).block_moves
    mean = acc / n
    target = out.move_mean[0].detach().numpy()
    sigma = np.exp(out.move_log_std.detach().numpy())
    assert np.all(np.abs(mean - target) < 3.0 * sigma / np.sqrt(n) + 1e-9)


# -- resnet ---------------------------------------------------------------------

def test_resnet_zero_input_finite():
    cfg = micro_cfg(ARCH_RESNET)
    policy = build_policy(cfg).double()
    flat = torch.zeros((1, cfg.flat_dim), dtype=torch.float64)
    out = policy(flat)
    assert torch.isfinite(out.select_logits).all()
    assert torch.isfinite(out.value).all()


def test_resnet_not_permutation_equivariant():
    env, obs = rollout_obs(11)
    torch.manual_seed(10)
    policy = build_policy(micro_cfg(ARCH_RESNET)).double()
    out = forward_obs(policy, obs)
    perm = np.random.default_rng(12).permutation(16)
    bs2, bp2, st2 = permute_problem(BS, env.blueprint, env.state, perm)
    from magnaforge.observe import build_obs

    out_p = forward_obs(policy, build_obs(st2, bp2, bs2, ENV_CFG))
    assert (out_p.select_logits[0][:, perm] - out.select_logits[0]).abs().max() > 1e-4


def test_resnet_fixed_width_rejects_other_block_counts():
    cfg = micro_cfg(ARCH_RESNET)
    policy = build_policy(cfg).double()
    with pytest.raises(ShapeError):
        policy(torch.zeros((1, cfg.flat_dim + 23), dtype=torch.float64))


def test_graph_shape_errors():
    cfg = micro_cfg()
    policy = build_policy(cfg).double()
    bad_nodes = torch.zeros((1, 15, cfg.d_node), dtype=torch.float64)
    edges = torch.zeros((1, 16, 15, cfg.d_edge), dtype=torch.float64)
    globals_ = torch.zeros((1, cfg.d_global), dtype=torch.float64)
    with pytest.raises(ShapeError):
        policy(bad_nodes, edges, globals_)


# -- gradients --------------------------------------------------------------------

def _projection_loss(out, water):
    a, b, c, d = water
    return (
        (out.select_logits * a).sum()
        + (out.move_mean * b).sum()
        + (out.value * c).sum()
        + (out.move_log_std * d).sum()
    )


def _fd_check(policy, tensors, rtol=1e-3, atol=1e-6, h=1e-5):
    torch.manual_seed(123)
    out = policy(*tensors)
    water = (
        torch.randn_like(out.select_logits),
        torch.randn_like(out.move_mean),
        torch.randn_like(out.value),
        torch.randn_like(out.move_log_std),
    )
    loss = _projection_loss(policy(*tensors), water)
    policy.zero_grad()
    loss.backward()
    for name, param in policy.named_parameters():
        grad = param.grad
        if grad is None:
            grad = torch.zeros_like(param)
        flat = param.detach().reshape(-1)
        n_check = min(flat.numel(), 6)
        idx = torch.linspace(0, flat.numel() - 1, n_check).long()
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(_projection_loss(policy(*tensors), water))
            flat[i] = orig - h
            down = float(_projection_loss(policy(*tensors), water))
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(grad.reshape(-1)[i])
            assert abs(fd - an) <= atol + rtol * max(abs(fd), abs(an)), (
                f"{name}[{int(i)}]: fd={fd} analytic={an}"
            )


@pytest.mark.parametrize("arch", [ARCH_GAT, ARCH_NO_ATTENTION, ARCH_RESNET])
def test_finite_difference_gradients(arch):
    cfg = micro_cfg(arch, n_blocks=4)
    cfg2 = NetConfig(**{**vars(cfg), "n_blocks": 4, "d_global": 2 * (6 + 3 + 3 + 5),
                        "resnet_width": 16 * 4})
    torch.manual_seed(11)
    policy = build_policy(cfg2).double()
    rng = np.random.default_rng(13)
    if arch == ARCH_RESNET:
        tensors = (torch.as_tensor(rng.normal(size=(2, cfg2.flat_dim))),)
    else:
        tensors = (
            torch.as_tensor(rng.normal(size=(2, 4, cfg2.d_node))),
            torch.as_tensor(rng.normal(size=(2, 4, 3, cfg2.d_edge))),
            torch.as_tensor(rng.normal(size=(2, cfg2.d_global))),
        )
    _fd_check(policy, tensors)


def test_constant_loss_zero_gradient():
    cfg = micro_cfg(n_blocks=4)
    cfg = NetConfig(**{**vars(cfg), "n_blocks": 4, "d_global": 2 * (6 + 3 + 3 + 5),
                       "resnet_width": 64})
    policy = build_policy(cfg).double()
    tensors = (
        torch.zeros((1, 4, cfg.d_node), dtype=torch.float64),
        torch.zeros((1, 4, 3, cfg.d_edge), dtype=torch.float64),
        torch.zeros((1, cfg.d_global), dtype=torch.float64),
    )
    out = policy(*tensors)
    loss = out.value.sum() * 0.0 + 7.0
    policy.zero_grad()
    loss.backward()
    for param in policy.parameters():
        if param.grad is not None:
            assert param.grad.abs().max() == 0.0


def test_gradients_permute_consistently():
    env, obs = rollout_obs(12)
    torch.manual_seed(14)
    policy = build_policy(micro_cfg()).double()

    def grads_for(o, perm=None):
        out = forward_obs(policy, o)
        logits = out.select_logits
        if perm is not None:
            logits = logits[:, :, perm]
        loss = (logits * torch.linspace(-1, 1, logits.numel()).reshape(logits.shape)).sum()
        policy.zero_grad()
        loss.backward()
        return {
            n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in policy.named_parameters()
        }

    perm = np.random.default_rng(15).permutation(16)
    bs2, bp2, st2 = permute_problem(BS, env.blueprint, env.state, perm)
    from magnaforge.observe import build_obs

    obs_p = build_obs(st2, bp2, bs2, ENV_CFG)
    g1 = grads_for(obs)
    # permuted obs with matching loss projection: same parameter gradients
    g2 = grads_for(obs_p, perm=perm)
    for name in g1:
        assert (g1[name] - g2[name]).abs().max() < 1e-8, name


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    _, obs = rollout_obs(13)
    torch.manual_seed(16)
    policy = build_policy(micro_cfg())
    path = tmp_path / "ck.npz"
    save_checkpoint(path, policy, extra={"env_steps": 5},
                    extra_arrays={"counter": np.arange(3)})
    again, extra, arrays = load_checkpoint(path)
    assert extra == {"env_steps": 5}
    assert np.array_equal(arrays["counter"], np.arange(3))
    for (n1, p1), (n2, p2) in zip(policy.state_dict().items(), again.state_dict().items()):
        assert n1 == n2
        assert torch.equal(p1, p2)


def test_checkpoint_shape_mismatch_raises(tmp_path):
    policy = build_policy(micro_cfg())
    path = tmp_path / "ck.npz"
    save_checkpoint(path, policy)
    import numpy as np_
    data = dict(np.load(path))
    data["heads.log_std"] = np_.zeros(7)
    with open(path, "wb") as f:
        np.savez(f, **data)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path)
