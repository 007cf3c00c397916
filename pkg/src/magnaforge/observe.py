"""Graph observation builder.

All relative quantities are expressed in source-block local frames and all
gripper quantities in yaw-canonical or held-block frames, which makes the
observation invariant to ground-preserving rigid motions of the whole
scene (planar translation plus rotation about z). Orientations are encoded
as the first two rotation-matrix columns (6 numbers), with the identity
subtracted for error-style features so "no error" reads as all zeros.

Edge ordering contract (also the flat export layout): edges are
destination-major, ``for dst in 0..N-1: for src in 0..N-1 if src != dst``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockSet, Blueprint, magnet_world_pose
from .geom import inverse, relative

_IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class GraphObs:
    nodes: np.ndarray  # (N, d_node)
    edges: np.ndarray  # (E, d_edge), E = N * (N - 1)
    edge_src: np.ndarray  # (E,) int
    edge_dst: np.ndarray  # (E,) int
    globals: np.ndarray  # (d_global,)

    def dims(self) -> dict:
        return {
            "n_blocks": int(self.nodes.shape[0]),
            "d_node": int(self.nodes.shape[1]),
            "n_edges": int(self.edges.shape[0]),
            "d_edge": int(self.edges.shape[1]),
            "d_global": int(self.globals.shape[0]),
        }

    def flatten(self) -> np.ndarray:
        """Fixed-order flat vector: nodes, then edges, then globals."""
        return np.concatenate([self.nodes.ravel(), self.edges.ravel(), self.globals])


_EDGE_CACHE: dict = {}


def edge_index(n_blocks: int):
    """(src, dst) arrays for the complete directed graph without self-loops."""
    if n_blocks not in _EDGE_CACHE:
        src, dst = [], []
        for b in range(n_blocks):
            for a in range(n_blocks):
                if a != b:
                    src.append(a)
                    dst.append(b)
        lookup = {}
        for e, (a, b) in enumerate(zip(src, dst)):
            lookup[(a, b)] = e
        _EDGE_CACHE[n_blocks] = (
            np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), lookup,
        )
    src, dst, _ = _EDGE_CACHE[n_blocks]
    return src, dst


def edge_lookup(n_blocks: int) -> dict:
    """(src, dst) -> flat edge position within the export ordering."""
    edge_index(n_blocks)
    return _EDGE_CACHE[n_blocks][2]


def obs_dims(blockset: BlockSet, config) -> dict:
    n = blockset.n_blocks
    g = config.n_grippers
    return {
        "n_blocks": n,
        "d_node": 1 + g,
        "n_edges": n * (n - 1),
        "d_edge": 23,
        "d_global": g * (6 + 3 + 3 + n + 1),
    }


def _six_d(rot: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, row-major."""
    return rot[:, :2].T.ravel()


def _yaw_canonical(rot: np.ndarray) -> np.ndarray:
    """Rotation with the scene-yaw component removed (tilt relative to gravity)."""
    col = rot[:, 0]
    if np.hypot(col[0], col[1]) < 1e-6:
        col = rot[:, 1]
    theta = np.arctan2(col[1], col[0])
    c, s = np.cos(-theta), np.sin(-theta)
    unyaw = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return unyaw @ rot, unyaw


def _axis_align_rotation(z_from: np.ndarray, z_to: np.ndarray) -> np.ndarray:
    """Minimal rotation matrix taking unit vector z_from onto z_to."""
    c = float(np.clip(z_from @ z_to, -1.0, 1.0))
    axis = np.cross(z_from, z_to)
    n = float(np.linalg.norm(axis))
    if n < 1e-9:
        if c > 0.0:
            return np.eye(3)
        # antipodal: rotate pi about any axis orthogonal to z_from
        pick = np.argmin(np.abs(z_from))
        ortho = np.zeros(3)
        ortho[pick] = 1.0
        axis = np.cross(z_from, ortho)
        axis /= np.linalg.norm(axis)
        k = np.array([
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ])
        return np.eye(3) + 2.0 * (k @ k)
    axis = axis / n
    angle = np.arctan2(n, c)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _blueprint_magnet_choice(bp: Blueprint) -> dict:
    """Per ordered pair, the designated magnet slots (first connection by slot index)."""
    chosen = {}
    for c in sorted(
        (c.canonical() for c in bp.connections),
        key=lambda c: (c.block_a, c.magnet_a, c.block_b, c.magnet_b),
    ):
        if (c.block_a, c.block_b) not in chosen:
            chosen[(c.block_a, c.block_b)] = (c.magnet_a, c.magnet_b)
            chosen[(c.block_b, c.block_a)] = (c.magnet_b, c.magnet_a)
    return chosen


def build_obs(state, blueprint: Blueprint, blockset: BlockSet, config) -> GraphObs:
    n = blockset.n_blocks
    g = config.n_grippers
    poses = state.poses
    rots = {b: poses[b].rotation_matrix() for b in range(n)}

    nodes = np.zeros((n, 1 + g))
    for b in range(n):
        nodes[b, 0] = poses[b].position[2]
        for gi in range(g):
            nodes[b, 1 + gi] = 1.0 if state.gripper_holding[gi] == b else 0.0

    src, dst = edge_index(n)
    bp_pairs = blueprint.pair_set()
    magnet_choice = _blueprint_magnet_choice(blueprint)
    connected_pairs = {
        (min(c.block_a, c.block_b), max(c.block_a, c.block_b)) for c in state.connections
    }

    edges = np.zeros((n * (n - 1), 23))
    rot_stack = np.stack([rots[b] for b in range(n)])
    pos_stack = np.stack([poses[b].position for b in range(n)])
    # relative center of mass for every edge, in the source frame
    delta = pos_stack[dst] - pos_stack[src]
    edges[:, 18:21] = np.einsum("eij,ej->ei", rot_stack[src].transpose(0, 2, 1), delta)

    edge_of = {}
    for e in range(len(src)):
        edge_of[(int(src[e]), int(dst[e]))] = e
        key = (min(src[e], dst[e]), max(src[e], dst[e]))
        if key in bp_pairs:
            edges[e, 21] = 1.0
        if key in connected_pairs:
            edges[e, 22] = 1.0

    for (a, b) in bp_pairs:
        target_ab = blueprint.relative_poses[(a, b)]
        for a_, b_, target in ((a, b, target_ab), (b, a, inverse(target_ab))):
            feat = edges[edge_of[(a_, b_)]]
            ra = rots[a_]
            sa, sb = magnet_choice[(a_, b_)]
            mag_a = magnet_world_pose(poses[a_], blockset.magnet(a_, sa))
            mag_b = magnet_world_pose(poses[b_], blockset.magnet(b_, sb))
            # translation needed for the designated magnets to meet, in A's frame
            feat[0:3] = ra.T @ (mag_b.position - mag_a.position)
            # minimal rotation aligning B's magnet axis against A's, in A's frame
            za = mag_a.rotate_vector(np.array([0.0, 0.0, 1.0]))
            zb = mag_b.rotate_vector(np.array([0.0, 0.0, 1.0]))
            r_align = ra.T @ _axis_align_rotation(zb, -za) @ ra
            feat[3:9] = _six_d(r_align) - _IDENTITY_6D
            # live-vs-blueprint relative pose error
            rel_cur = relative(poses[a_], poses[b_])
            feat[9:12] = rel_cur.position - target.position
            r_err = rel_cur.rotation_matrix() @ target.rotation_matrix().T
            feat[12:18] = _six_d(r_err) - _IDENTITY_6D

    gfeats = []
    for gi in range(g):
        held = state.gripper_holding[gi]
        v_w, w_w = state.gripper_velocity[gi]
        if held is None:
            rot_canon = np.eye(3)
            unyaw = np.eye(3)
        else:
            rot_canon, unyaw = _yaw_canonical(rots[held])
        one_hot = np.zeros(n + 1)
        one_hot[held if held is not None else n] = 1.0
        gfeats.append(np.concatenate([
            _six_d(rot_canon),
            unyaw @ v_w,
            unyaw @ w_w,
            one_hot,
        ]))

    return GraphObs(nodes, edges, src, dst, np.concatenate(gfeats))
