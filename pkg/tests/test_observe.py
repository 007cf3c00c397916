import numpy as np
import pytest

from magnaforge.blocks import default_blockset, generate_blueprints, realize_blueprint
from magnaforge.env import EnvConfig, MagneticAssemblyEnv, RandomPolicy
from magnaforge.geom import Pose, compose
from magnaforge.observe import build_obs, obs_dims

from util import ground_transform, permute_obs, permute_problem, transform_state


@pytest.fixture(scope="module")
def bs():
    return default_blockset()


@pytest.fixture(scope="module")
def lib(bs):
    return generate_blueprints(13, 8, (2, 8), bs)


def rollout_state(bs, bp, seed, steps=8):
    env = MagneticAssemblyEnv(bs, EnvConfig())
    env.reset(bp, np.random.default_rng(seed))
    policy = RandomPolicy(np.random.default_rng(seed + 1))
    for _ in range(steps):
        if env.done:
            break
        env.step(policy.act(None, env))
    return env


def test_obs_dims_contract(bs, lib):
    env = MagneticAssemblyEnv(bs, EnvConfig())
    dims = obs_dims(bs, env.config)
    for bp in lib.all()[:4]:
        env.reset(bp, np.random.default_rng(0))
        obs = env.build_obs()
        got = obs.dims()
        assert got == {k: dims[k] for k in got}
        assert np.all(np.isfinite(obs.nodes))
        assert np.all(np.isfinite(obs.edges))
        assert np.all(np.isfinite(obs.globals))


def test_edge_index_complete_digraph(bs):
    from magnaforge.observe import edge_index

    src, dst = edge_index(4)
    assert len(src) == 12
    assert np.all(src != dst)
    pairs = set(zip(src.tolist(), dst.tolist()))
    assert len(pairs) == 12


def test_realized_blueprint_zeroes_error_features(bs, lib):
    env = MagneticAssemblyEnv(bs, EnvConfig())
    bp = lib.all()[1]
    env.reset(bp, np.random.default_rng(0))
    s = env.state
    for b, p in realize_blueprint(bp, bs).items():
        s.poses[b] = p
    s.connections = set(c.canonical() for c in bp.connections)
    obs = build_obs(s, bp, bs, env.config)
    pair_set = bp.pair_set()
    from magnaforge.observe import edge_index

    src, dst = edge_index(16)
    for e in range(len(src)):
        key = (min(src[e], dst[e]), max(src[e], dst[e]))
        feat = obs.edges[e]
        if key in pair_set:
            assert np.max(np.abs(feat[0:18])) < 1e-6  # align + blueprint errors
            assert feat[21] == 1.0 and feat[22] == 1.0
        else:
            assert np.all(feat[0:18] == 0.0)
            assert feat[21] == 0.0


def test_non_blueprint_pairs_zeroed(bs, lib):
    env = rollout_state(bs, lib.all()[2], 5)
    obs = env.build_obs()
    from magnaforge.observe import edge_index

    src, dst = edge_index(16)
    pair_set = env.blueprint.pair_set()
    for e in range(len(src)):
        key = (min(src[e], dst[e]), max(src[e], dst[e]))
        if key not in pair_set:
            assert np.all(obs.edges[e][0:18] == 0.0)
            assert obs.edges[e][21] == 0.0


def test_ground_invariance_on_rollout_states(bs, lib):
    rng = np.random.default_rng(17)
    for i, bp in enumerate(lib.all()[:5]):
        env = rollout_state(bs, bp, 100 + i)
        obs = env.build_obs()
        for _ in range(3):
            g = ground_transform(rng)
            moved = transform_state(env.state, g)
            obs_t = build_obs(moved, bp, bs, env.config)
            for name in ("nodes", "edges", "globals"):
                assert np.max(np.abs(getattr(obs, name) - getattr(obs_t, name))) < 1e-6


def test_permutation_equivariance_on_rollout_states(bs, lib):
    rng = np.random.default_rng(23)
    for i, bp in enumerate(lib.all()[:5]):
        env = rollout_state(bs, bp, 200 + i)
        obs = env.build_obs()
        perm = rng.permutation(16)
        bs2, bp2, st2 = permute_problem(bs, bp, env.state, perm)
        obs_p = build_obs(st2, bp2, bs2, env.config)
        expected = permute_obs(obs, perm, env.config.n_grippers)
        for name in ("nodes", "edges", "globals"):
            assert np.max(np.abs(getattr(obs_p, name) - getattr(expected, name))) < 1e-9


def test_gripper_features_reflect_holding(bs, lib):
    from magnaforge.env import Action

    env = MagneticAssemblyEnv(bs, EnvConfig())
    env.reset(lib.all()[0], np.random.default_rng(0))
    act = Action.zeros(2, 16)
    act.gripper_choice[:] = [5, 9]
    act.block_moves[5, 1] = 0.4
    res = env.step(act)
    obs = res.obs
    n = 16
    per = obs.globals.reshape(2, -1)
    head = per.shape[1] - (n + 1)
    assert per[0, head + 5] == 1.0  # gripper 0 one-hot on block 5
    assert per[1, head + 9] == 1.0
    assert per[0, head + n] == 0.0
    assert obs.nodes[5, 1] == 1.0  # node held flag for gripper 0
    assert obs.nodes[9, 2] == 1.0
    # velocity features nonzero for the commanded gripper
    assert np.linalg.norm(per[0, 6:9]) > 0.01


def test_flatten_is_fixed_order(bs, lib):
    env = rollout_state(bs, lib.all()[0], 3)
    obs = env.build_obs()
    flat = obs.flatten()
    d = obs.dims()
    assert flat.shape == (
        d["n_blocks"] * d["d_node"] + d["n_edges"] * d["d_edge"] + d["d_global"],
    )
    assert np.array_equal(flat[: d["n_blocks"] * d["d_node"]], obs.nodes.ravel())
