"""Shared test oracles: scene rigid transforms, block relabelings, and
small hand-built worlds."""

import numpy as np

from magnaforge.blocks import BlockSet, Blueprint, Connection, default_blockset
from magnaforge.env import EnvConfig, MagneticAssemblyEnv, WorldState
from magnaforge.geom import Pose, compose, quat_rotate, quat_rotz
from magnaforge.observe import GraphObs, edge_index


def ground_transform(rng: np.random.Generator) -> Pose:
    """Random ground-preserving rigid motion: planar translation + yaw."""
    xy = rng.uniform(-3.0, 3.0, size=2)
    return Pose(np.array([xy[0], xy[1], 0.0]), quat_rotz(rng.uniform(0.0, 2.0 * np.pi)))


def transform_state(state: WorldState, g: Pose) -> WorldState:
    out = state.copy()
    out.poses = {b: compose(g, p) for b, p in state.poses.items()}
    out.gripper_velocity = [
        (quat_rotate(g.orientation, v), quat_rotate(g.orientation, w))
        for v, w in state.gripper_velocity
    ]
    return out


def permute_problem(blockset: BlockSet, blueprint: Blueprint, state: WorldState, perm):
    """Relabel blocks by new_id = perm[old_id] across blockset, blueprint, state."""
    perm = np.asarray(perm)
    instances = [None] * blockset.n_blocks
    for old, type_id in blockset.instances:
        instances[perm[old]] = (int(perm[old]), type_id)
    bs2 = BlockSet(blockset.types, instances)

    conns = [
        Connection(int(perm[c.block_a]), c.magnet_a, int(perm[c.block_b]), c.magnet_b).canonical()
        for c in blueprint.connections
    ]
    rel = {}
    for (a, b), pose in blueprint.relative_poses.items():
        na, nb = int(perm[a]), int(perm[b])
        if na < nb:
            rel[(na, nb)] = pose
        else:
            from magnaforge.geom import inverse

            rel[(nb, na)] = inverse(pose)
    bp2 = Blueprint(
        blueprint.id,
        sorted(int(perm[b]) for b in blueprint.blocks),
        conns,
        rel,
        blueprint.n_blocks_used,
    )

    st2 = state.copy()
    st2.poses = {int(perm[b]): p for b, p in state.poses.items()}
    st2.connections = {
        Connection(int(perm[c.block_a]), c.magnet_a, int(perm[c.block_b]), c.magnet_b).canonical()
        for c in state.connections
    }
    st2.gripper_holding = [
        None if h is None else int(perm[h]) for h in state.gripper_holding
    ]
    return bs2, bp2, st2


def permute_obs(obs: GraphObs, perm, n_grippers: int) -> GraphObs:
    """Expected observation after relabeling blocks by new_id = perm[old_id]."""
    perm = np.asarray(perm)
    n = obs.nodes.shape[0]
    nodes = np.zeros_like(obs.nodes)
    nodes[perm] = obs.nodes

    src, dst = edge_index(n)
    lookup = {}
    for e in range(len(src)):
        lookup[(int(perm[src[e]]), int(perm[dst[e]]))] = obs.edges[e]
    edges = np.stack([lookup[(int(s), int(d))] for s, d in zip(src, dst)])

    per = obs.globals.reshape(n_grippers, -1).copy()
    head_dim = per.shape[1] - (n + 1)
    for g in range(n_grippers):
        one_hot = per[g, head_dim:head_dim + n].copy()
        permuted = np.zeros_like(one_hot)
        permuted[perm] = one_hot
        per[g, head_dim:head_dim + n] = permuted
    return GraphObs(nodes, edges, src, dst, per.reshape(-1))


def random_settled_state(env: MagneticAssemblyEnv, blueprint, rng, n_steps: int = 5) -> WorldState:
    """A mid-episode state reached by random actions (connections possible)."""
    from magnaforge.env import RandomPolicy

    env.reset(blueprint, rng)
    policy = RandomPolicy(rng)
    for _ in range(n_steps):
        if env.done:
            break
        env.step(policy.act(None, env))
    return env.state


def two_cube_blueprint(blockset: BlockSet) -> Blueprint:
    """Cube 0's +x magnet mated to cube 1's -x magnet, end to end."""
    from magnaforge.blocks import attached_block_pose, magnet_world_pose
    from magnaforge.geom import relative

    pose0 = Pose.identity()
    pose1 = attached_block_pose(
        magnet_world_pose(pose0, blockset.magnet(0, 0)),
        blockset.magnet(1, 1).local_pose,
        0,
    )
    return Blueprint(
        id="test-two-cube",
        blocks=[0, 1],
        connections=[Connection(0, 0, 1, 1)],
        relative_poses={(0, 1): relative(pose0, pose1)},
        n_blocks_used=2,
    )
