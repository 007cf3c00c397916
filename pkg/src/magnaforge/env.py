"""Episode engine: quasi-static block world with magnet snap/detach,
potential-difference rewards, success detection, and the reset variants.

Step pipeline, in order: gripper assignment (with transition-delay rule),
kinematic integration of held rigid groups, collision push-out with force
penalty accumulation, magnet detach/snap, gravity settling of unheld
groups, potential-difference reward, success check.

Velocities commanded for a block are interpreted in that block's local
frame, which keeps the optimal policy expressible from the invariant
observations. A magnet connection breaks when the commanded displacement
gap across it in one step exceeds ``detach_stretch`` (an unheld side
counts as commanded to stay put), so yanking a held block detaches it
while slow transport keeps structures intact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import observe
from .blocks import (
    BlockSet,
    Blueprint,
    Connection,
    blueprint_from_dict,
    blueprint_to_dict,
    magnet_gap,
    magnet_world_pose,
    realize_blueprint,
    weld_transform,
)
from .boxes import box_corners, obb_penetration
from .errors import PlacementFailure, ShapeError
from .geom import (
    Pose,
    compose,
    quat_angle,
    quat_from_axis_angle,
    quat_rotate,
    quat_rotz,
    relative,
)

_GROUND_EPS = 1e-9
_SAME_GROUP_SNAP_TOL = 1e-6


@dataclass
class EnvConfig:
    n_grippers: int = 2
    episode_len: int = 100
    dt: float = 0.1
    blueprint_reset_prob: float = 0.2
    v_max: float = 2.0
    omega_max: float = 2.0 * np.pi
    d_snap: float = 0.05
    theta_snap: float = np.deg2rad(30.0)
    detach_stretch: float = 0.05
    c_force: float = 0.02
    c_magnet_dense: float = 1.0
    c_pose_dense: float = 1.0
    eps_pos: float = 0.02
    eps_rot: float = 0.15
    gripper_transition_delay: int = 0
    arena_half: float = 1.0
    shaping_dist_scale: float = 0.5
    shaping_ang_scale: float = 1.5

    def __post_init__(self):
        if self.n_grippers not in (1, 2):
            raise ValueError("n_grippers must be 1 or 2")
        positive = [
            "episode_len", "dt", "v_max", "omega_max", "d_snap", "theta_snap",
            "detach_stretch", "eps_pos", "eps_rot", "arena_half",
            "shaping_dist_scale", "shaping_ang_scale",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gripper_transition_delay < 0:
            raise ValueError("gripper_transition_delay must be >= 0")

    def to_flat_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}

    @staticmethod
    def from_flat_dict(d: dict) -> "EnvConfig":
        allowed = set(EnvConfig().to_flat_dict())
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        return EnvConfig(**d)


@dataclass
class WorldState:
    poses: dict  # block_id -> Pose
    connections: set  # canonical Connection
    gripper_holding: list  # block_id or None, per gripper
    gripper_disabled_until: list  # step index per gripper
    gripper_velocity: list  # (v_world, omega_world) per gripper
    step_count: int = 0
    force_accum: float = 0.0

    def copy(self) -> "WorldState":
        return WorldState(
            poses={b: p.copy() for b, p in self.poses.items()},
            connections=set(self.connections),
            gripper_holding=list(self.gripper_holding),
            gripper_disabled_until=list(self.gripper_disabled_until),
            gripper_velocity=[(v.copy(), w.copy()) for v, w in self.gripper_velocity],
            step_count=self.step_count,
            force_accum=self.force_accum,
        )


@dataclass
class Action:
    gripper_choice: np.ndarray  # (n_grippers,) int
    block_moves: np.ndarray  # (n_blocks, 6): linear m/s + angular rad/s, block-local

    @staticmethod
    def zeros(n_grippers: int, n_blocks: int) -> "Action":
        return Action(np.zeros(n_grippers, dtype=np.int64), np.zeros((n_blocks, 6)))


@dataclass
class StepResult:
    obs: "observe.GraphObs"
    reward: float
    done: bool
    info: dict


def connected_groups(n_blocks: int, connections) -> list:
    """Connected components over all blocks (singletons included), sorted sets."""
    parent = list(range(n_blocks))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for c in connections:
        ra, rb = find(c.block_a), find(c.block_b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for b in range(n_blocks):
        groups.setdefault(find(b), set()).add(b)
    return [groups[r] for r in sorted(groups)]


class _SlotTable:
    """Static per-blockset magnet slot arrays for vectorized snap scans."""

    def __init__(self, blockset: BlockSet):
        from .blocks import POSITIVE

        entries = []
        for b in range(blockset.n_blocks):
            for s, mag in enumerate(blockset.type_of(b).magnets):
                entries.append((b, s, mag.anchor, mag.axis,
                                1 if mag.polarity == POSITIVE else -1))
        self.block = np.array([e[0] for e in entries], dtype=np.int64)
        self.slot = np.array([e[1] for e in entries], dtype=np.int64)
        self.local_anchor = np.array([e[2] for e in entries])
        self.local_axis = np.array([e[3] for e in entries])
        self.polarity = np.array([e[4] for e in entries], dtype=np.int64)
        self.lookup = {(int(b), int(s)): i for i, (b, s) in enumerate(zip(self.block, self.slot))}
        self.by_block = [np.nonzero(self.block == b)[0] for b in range(blockset.n_blocks)]
        n_slots = len(entries)
        pa, pb = [], []
        for i in range(n_slots):
            for j in range(i + 1, n_slots):
                if self.block[i] != self.block[j] and self.polarity[i] != self.polarity[j]:
                    pa.append(i)
                    pb.append(j)
        self.pair_a = np.array(pa, dtype=np.int64)
        self.pair_b = np.array(pb, dtype=np.int64)

    def world_data(self, poses: dict):
        anchors = np.empty_like(self.local_anchor)
        axes = np.empty_like(self.local_axis)
        for b, idx in enumerate(self.by_block):
            if len(idx) == 0:
                continue
            rot = poses[b].rotation_matrix()
            anchors[idx] = poses[b].position + self.local_anchor[idx] @ rot.T
            axes[idx] = self.local_axis[idx] @ rot.T
        return anchors, axes

    def free_mask(self, connections) -> np.ndarray:
        free = np.ones(len(self.block), dtype=bool)
        for c in connections:
            free[self.lookup[(c.block_a, c.magnet_a)]] = False
            free[self.lookup[(c.block_b, c.magnet_b)]] = False
        return free


class MagneticAssemblyEnv:
    """Single-threaded episode engine over one blockset instance."""

    def __init__(self, blockset: BlockSet, config: EnvConfig | None = None):
        self.blockset = blockset
        self.config = config or EnvConfig()
        self.blueprint: Blueprint | None = None
        self.state: WorldState | None = None
        self._slots = _SlotTable(blockset)
        self._halves = [blockset.type_of(b).half_extents for b in range(blockset.n_blocks)]
        self._potential = 0.0
        self._potential_terms = {}
        self._done = True

    # -- resets ------------------------------------------------------------

    def reset(self, blueprint: Blueprint, rng: np.random.Generator,
              preset: Blueprint | None = None) -> StepResult:
        """Start an episode: blocks scattered, optionally with `preset` pre-built."""
        cfg = self.config
        self.blueprint = blueprint
        poses = {}
        connections = set()
        if preset is not None:
            realized = realize_blueprint(preset, self.blockset)
            placed = self._place_structure(realized, rng)
            poses.update(placed)
            connections = set(c.canonical() for c in preset.connections)
        remaining = [b for b in range(self.blockset.n_blocks) if b not in poses]
        self._scatter(poses, remaining, rng)
        g = cfg.n_grippers
        self.state = WorldState(
            poses=poses,
            connections=connections,
            gripper_holding=[None] * g,
            gripper_disabled_until=[0] * g,
            gripper_velocity=[(np.zeros(3), np.zeros(3)) for _ in range(g)],
        )
        self._potential, self._potential_terms = self.compute_potential(self.state)
        self._done = False
        obs = self.build_obs()
        success = self.check_success(self.state)
        return StepResult(obs, 0.0, False, {"success": success, "reward_terms": {}, "potential": self._potential})

    def retarget(self, blueprint: Blueprint):
        """Swap the goal blueprint on the live world (reset-free mode)."""
        if self.state is None:
            raise RuntimeError("retarget requires a live episode")
        self.blueprint = blueprint
        self.state.step_count = 0
        self.state.force_accum = 0.0
        self._potential, self._potential_terms = self.compute_potential(self.state)
        self._done = False

    def _place_structure(self, realized: dict, rng: np.random.Generator) -> dict:
        cfg = self.config
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        g_rot = Pose(np.zeros(3), quat_rotz(yaw))
        rotated = {b: compose(g_rot, p) for b, p in realized.items()}
        corners = np.concatenate([
            box_corners(p.position, p.rotation_matrix(), self.blockset.type_of(b).half_extents)
            for b, p in rotated.items()
        ])
        radius = float(np.max(np.abs(corners[:, :2])))
        min_z = float(np.min(corners[:, 2]))
        span = max(cfg.arena_half - radius, 0.0)
        xy = rng.uniform(-span, span, size=2)
        shift = Pose(np.array([xy[0], xy[1], -min_z]))
        return {b: compose(shift, p) for b, p in rotated.items()}

    def _scatter(self, poses: dict, block_ids: list, rng: np.random.Generator,
                 max_attempts: int = 400):
        cfg = self.config
        radii = {
            o: float(np.linalg.norm(self.blockset.type_of(o).half_extents))
            for o in range(self.blockset.n_blocks)
        }
        for b in sorted(block_ids):
            half = self.blockset.type_of(b).half_extents
            span = max(cfg.arena_half - float(np.max(half)) * 1.5, 0.1)
            for attempt in range(max_attempts):
                xy = rng.uniform(-span, span, size=2)
                yaw = rng.uniform(0.0, 2.0 * np.pi)
                pose = Pose(np.array([xy[0], xy[1], half[2]]), quat_rotz(yaw))
                rot = None
                ok = True
                for other, opose in poses.items():
                    # bounding-sphere rejection before the exact SAT test
                    if float(np.linalg.norm(opose.position - pose.position)) > radii[b] + radii[other]:
                        continue
                    if rot is None:
                        rot = pose.rotation_matrix()
                    depth, _ = obb_penetration(
                        pose.position, rot, half,
                        opose.position, opose.rotation_matrix(),
                        self.blockset.type_of(other).half_extents,
                    )
                    if depth > 1e-9:
                        ok = False
                        break
                if ok:
                    poses[b] = pose
                    break
            else:
                raise PlacementFailure(
                    f"no non-overlapping spot for block {b} after {max_attempts} attempts"
                )

    # -- stepping ----------------------------------------------------------

    def step(self, action: Action) -> StepResult:
        if self.state is None or self.blueprint is None:
            raise RuntimeError("call reset() before step()")
        if self._done:
            raise RuntimeError("episode is done; call reset()")
        cfg = self.config
        n = self.blockset.n_blocks
        choice = np.asarray(action.gripper_choice)
        moves = np.asarray(action.block_moves, dtype=np.float64)
        if choice.shape != (cfg.n_grippers,):
            raise ShapeError(f"gripper_choice must have shape ({cfg.n_grippers},), got {choice.shape}")
        if moves.shape != (n, 6):
            raise ShapeError(f"block_moves must have shape ({n}, 6), got {moves.shape}")
        if not np.all((choice >= 0) & (choice < n)):
            raise ShapeError("gripper_choice entries out of range")
        if not np.all(np.isfinite(moves)):
            raise ShapeError("block_moves must be finite")

        s = self.state.copy()

        # (1) gripper assignment with transition-delay rule
        effective = self.assign_grippers(s, choice)

        # (2) kinematic integration of held rigid groups
        motions = {}
        for g in range(cfg.n_grippers):
            b = effective[g]
            if b is None:
                s.gripper_velocity[g] = (np.zeros(3), np.zeros(3))
                continue
            motion, v_w, w_w = self._command_motion(s.poses[b], moves[b])
            motions[g] = motion
            s.gripper_velocity[g] = (v_w, w_w)

        # evaluate detach stretches against pre-motion anchors
        breaks = self._commanded_breaks(s, effective, motions)

        groups = connected_groups(n, s.connections)
        block_group = {b: i for i, grp in enumerate(groups) for b in grp}
        moved = set()
        moved_groups = []
        for g in range(cfg.n_grippers):
            b = effective[g]
            if b is None or block_group[b] in moved:
                continue
            moved.add(block_group[b])
            grp = groups[block_group[b]]
            self._apply_transform(s, grp, motions[g])
            moved_groups.append(grp)

        # (3) collision resolution with force accumulation
        for grp in moved_groups:
            self._resolve_collisions(s, grp)

        # (4) magnet detach + snap
        for c in breaks:
            s.connections.discard(c)
        self._snap_pass(s, effective, exclude=breaks)

        # (5) gravity settling of unheld groups
        self._settle(s, effective)

        # (6) potential-difference reward
        s.step_count += 1
        new_potential, terms = self.compute_potential(s)
        reward = new_potential - self._potential
        term_deltas = {k: terms[k] - self._potential_terms.get(k, 0.0) for k in terms}

        # (7) success check
        success = self.check_success(s)
        done = success or s.step_count >= cfg.episode_len

        self.state = s
        self._potential = new_potential
        self._potential_terms = terms
        self._done = done
        obs = self.build_obs()
        return StepResult(obs, float(reward), bool(done), {
            "success": bool(success),
            "reward_terms": term_deltas,
            "potential": float(new_potential),
        })

    def assign_grippers(self, s: WorldState, choice: np.ndarray) -> list:
        """Effective per-gripper block after the delay rule and same-block tie-break.

        Mutates holding/disabled bookkeeping on `s`.
        """
        cfg = self.config
        effective = []
        for g in range(cfg.n_grippers):
            want = int(choice[g])
            if s.step_count < s.gripper_disabled_until[g]:
                effective.append(None)
            elif (cfg.gripper_transition_delay > 0
                  and s.gripper_holding[g] is not None
                  and want != s.gripper_holding[g]):
                s.gripper_disabled_until[g] = s.step_count + cfg.gripper_transition_delay
                effective.append(None)
            else:
                effective.append(want)
        for g in range(1, cfg.n_grippers):
            if effective[g] is not None and effective[g] in effective[:g]:
                effective[g] = None
        s.gripper_holding = list(effective)
        return effective

    def _command_motion(self, block_pose: Pose, move: np.ndarray):
        """World rigid transform for one step of a block-local velocity command."""
        cfg = self.config
        v_local, w_local = move[:3], move[3:]
        v_w = block_pose.rotate_vector(v_local)
        w_w = block_pose.rotate_vector(w_local)
        v_norm = float(np.linalg.norm(v_w))
        if v_norm > cfg.v_max:
            v_w = v_w * (cfg.v_max / v_norm)
        w_norm = float(np.linalg.norm(w_w))
        if w_norm > cfg.omega_max:
            w_w = w_w * (cfg.omega_max / w_norm)
        pivot = block_pose.position
        dq = quat_from_axis_angle(w_w, float(np.linalg.norm(w_w)) * cfg.dt)
        shift = pivot - quat_rotate(dq, pivot) + v_w * cfg.dt
        return Pose(shift, dq), v_w, w_w

    def _commanded_breaks(self, s: WorldState, effective: list, motions: dict) -> set:
        cfg = self.config
        holder = {}
        for g, b in enumerate(effective):
            if b is not None:
                holder[b] = g
        breaks = set()
        for c in s.connections:
            anchor = magnet_world_pose(
                s.poses[c.block_a], self.blockset.magnet(c.block_a, c.magnet_a)
            ).position
            disp = []
            for blk in (c.block_a, c.block_b):
                g = holder.get(blk)
                if g is None or g not in motions:
                    disp.append(np.zeros(3))
                else:
                    disp.append(motions[g].transform_point(anchor) - anchor)
            if float(np.linalg.norm(disp[0] - disp[1])) > cfg.detach_stretch:
                breaks.add(c)
        return breaks

    @staticmethod
    def _apply_transform(s: WorldState, group: set, g: Pose):
        for b in group:
            s.poses[b] = compose(g, s.poses[b])

    def _resolve_collisions(self, s: WorldState, group: set, max_iters: int = 8):
        others = [b for b in range(self.blockset.n_blocks) if b not in group]
        for _ in range(max_iters):
            rots = {b: s.poses[b].rotation_matrix() for b in range(self.blockset.n_blocks)}
            reach = {b: np.abs(rots[b]) @ self._halves[b] for b in rots}
            worst_depth = 0.0
            worst_dir = None
            for b in sorted(group):
                pose = s.poses[b]
                half = self._halves[b]
                bottom = float(pose.position[2] - reach[b][2])
                if bottom < -_GROUND_EPS and -bottom > worst_depth:
                    worst_depth = -bottom
                    worst_dir = np.array([0.0, 0.0, 1.0])
                for o in others:
                    opose = s.poses[o]
                    # cheap AABB rejection before the exact SAT test
                    if np.any(np.abs(opose.position - pose.position) > reach[b] + reach[o]):
                        continue
                    depth, direction = obb_penetration(
                        opose.position, rots[o], self._halves[o],
                        pose.position, rots[b], half,
                    )
                    if depth > worst_depth:
                        worst_depth = depth
                        worst_dir = direction
            if worst_depth <= _GROUND_EPS or worst_dir is None:
                break
            push = Pose(worst_dir * worst_depth)
            self._apply_transform(s, group, push)
            s.force_accum += worst_depth

    def _held_groups(self, s: WorldState, effective: list):
        groups = connected_groups(self.blockset.n_blocks, s.connections)
        held = [any(b in grp for b in effective if b is not None) for grp in groups]
        return groups, held

    def _snap_pass(self, s: WorldState, effective: list, exclude: set, max_welds: int = 64):
        cfg = self.config
        slots = self._slots
        excluded = np.zeros(len(slots.pair_a), dtype=bool)
        for c in exclude:
            ia = slots.lookup[(c.block_a, c.magnet_a)]
            ib = slots.lookup[(c.block_b, c.magnet_b)]
            excluded |= ((slots.pair_a == min(ia, ib)) & (slots.pair_b == max(ia, ib)))
        for _ in range(max_welds):
            anchors, axes = slots.world_data(s.poses)
            free = slots.free_mask(s.connections)
            pa, pb = slots.pair_a, slots.pair_b
            active = free[pa] & free[pb] & ~excluded
            if not np.any(active):
                return
            diff = anchors[pa[active]] - anchors[pb[active]]
            dist = np.linalg.norm(diff, axis=1)
            cosang = np.clip(-(axes[pa[active]] * axes[pb[active]]).sum(axis=1), -1.0, 1.0)
            ang = np.arccos(cosang)
            near = (dist < cfg.d_snap) & (ang < cfg.theta_snap)
            if not np.any(near):
                return
            groups, held = self._held_groups(s, effective)
            block_group = {b: i for i, grp in enumerate(groups) for b in grp}
            candidate_rows = np.nonzero(active)[0][np.nonzero(near)[0]]
            snapped = False
            for row in candidate_rows:
                ia, ib = int(pa[row]), int(pb[row])
                ba, sa = int(slots.block[ia]), int(slots.slot[ia])
                bb, sb = int(slots.block[ib]), int(slots.slot[ib])
                ga, gb = block_group[ba], block_group[bb]
                d = float(np.linalg.norm(anchors[ia] - anchors[ib]))
                a = float(np.arccos(np.clip(-(axes[ia] @ axes[ib]), -1.0, 1.0)))
                if ga == gb:
                    if d <= _SAME_GROUP_SNAP_TOL and a <= _SAME_GROUP_SNAP_TOL:
                        s.connections.add(Connection(ba, sa, bb, sb).canonical())
                        snapped = True
                        break
                    continue
                mag_a = magnet_world_pose(s.poses[ba], self.blockset.magnet(ba, sa))
                mag_b = magnet_world_pose(s.poses[bb], self.blockset.magnet(bb, sb))
                # pick the group that moves: prefer unheld, then lighter, then higher id
                mass_a = sum(self.blockset.type_of(b).mass for b in groups[ga])
                mass_b = sum(self.blockset.type_of(b).mass for b in groups[gb])
                key_a = (held[ga], mass_a, -min(groups[ga]))
                key_b = (held[gb], mass_b, -min(groups[gb]))
                if key_b <= key_a:
                    mover, stat_mag, move_mag = gb, mag_a, mag_b
                else:
                    mover, stat_mag, move_mag = ga, mag_b, mag_a
                weld = weld_transform(stat_mag, move_mag)
                self._apply_transform(s, groups[mover], weld)
                s.connections.add(Connection(ba, sa, bb, sb).canonical())
                snapped = True
                break
            if not snapped:
                return

    def _settle(self, s: WorldState, effective: list):
        groups, held = self._held_groups(s, effective)
        n = self.blockset.n_blocks
        # axis-aligned bounds per block, updated as groups translate vertically
        lo = np.empty((n, 3))
        hi = np.empty((n, 3))
        for b in range(n):
            reach = np.abs(s.poses[b].rotation_matrix()) @ self._halves[b]
            lo[b] = s.poses[b].position - reach
            hi[b] = s.poses[b].position + reach
        order = []
        for i, grp in enumerate(groups):
            if held[i]:
                continue
            order.append((float(min(lo[b][2] for b in grp)), min(grp), grp))
        order.sort(key=lambda t: (t[0], t[1]))
        for _, _, grp in order:
            drop = np.inf
            for b in grp:
                bottom = lo[b][2]
                drop = min(drop, bottom)  # ground support
                for o in range(n):
                    if o in grp:
                        continue
                    if (hi[o][0] < lo[b][0] + 1e-9 or lo[o][0] > hi[b][0] - 1e-9
                            or hi[o][1] < lo[b][1] + 1e-9 or lo[o][1] > hi[b][1] - 1e-9):
                        continue
                    candidate = bottom - hi[o][2]
                    if candidate >= -1e-6:  # only blocks currently below can support
                        drop = min(drop, candidate)
            if abs(drop) > _GROUND_EPS and np.isfinite(drop):
                self._apply_transform(s, grp, Pose(np.array([0.0, 0.0, -drop])))
                for b in grp:
                    lo[b][2] -= drop
                    hi[b][2] -= drop

    # -- reward and success ------------------------------------------------

    def compute_potential(self, s: WorldState):
        """State potential and its component terms for the current blueprint."""
        cfg = self.config
        bp = self.blueprint
        live = {c.canonical() for c in s.connections}
        required = bp.connection_set()
        correct = live & required
        wrong = live - required

        magnet_shaping = 0.0
        for c in sorted(required, key=lambda c: (c.block_a, c.magnet_a, c.block_b, c.magnet_b)):
            if c in correct:
                magnet_shaping += 1.0
                continue
            mag_a = magnet_world_pose(s.poses[c.block_a], self.blockset.magnet(c.block_a, c.magnet_a))
            mag_b = magnet_world_pose(s.poses[c.block_b], self.blockset.magnet(c.block_b, c.magnet_b))
            dist, ang = magnet_gap(mag_a, mag_b)
            magnet_shaping += float(np.exp(-dist / cfg.shaping_dist_scale - ang / cfg.shaping_ang_scale))

        pose_shaping = 0.0
        for (a, b) in sorted(bp.pair_set()):
            target = bp.relative_poses[(a, b)]
            rel = relative(s.poses[a], s.poses[b])
            dp = float(np.linalg.norm(rel.position - target.position))
            da = quat_angle(rel.orientation, target.orientation)
            pose_shaping += float(np.exp(-dp / cfg.shaping_dist_scale - da / cfg.shaping_ang_scale))

        terms = {
            "force_penalty": -cfg.c_force * s.force_accum,
            "wrong_connections": -float(len(wrong)),
            "correct_connections": float(len(correct)),
            "magnet_shaping": cfg.c_magnet_dense * magnet_shaping,
            "pose_shaping": cfg.c_pose_dense * pose_shaping,
        }
        return float(sum(terms.values())), terms

    def check_success(self, s: WorldState) -> bool:
        cfg = self.config
        bp = self.blueprint
        live = {c.canonical() for c in s.connections}
        if live != bp.connection_set():
            return False
        for (a, b) in bp.pair_set():
            target = bp.relative_poses[(a, b)]
            rel = relative(s.poses[a], s.poses[b])
            if float(np.linalg.norm(rel.position - target.position)) > cfg.eps_pos:
                return False
            if quat_angle(rel.orientation, target.orientation) > cfg.eps_rot:
                return False
        return True

    def build_obs(self):
        return observe.build_obs(self.state, self.blueprint, self.blockset, self.config)

    @property
    def done(self) -> bool:
        return self._done


# ---------------------------------------------------------------------------
# Reset-free evaluation harness
# ---------------------------------------------------------------------------

def reset_free_run(policy, blueprints: list, blockset: BlockSet, config: EnvConfig,
                   rng: np.random.Generator, n_targets: int = 10,
                   per_target_cap: int = 100) -> list:
    """Run consecutive targets on one persistent world; per-target success flags.

    The target switches on success or after `per_target_cap` steps; block
    poses and connections persist across switches.
    """
    if not blueprints:
        raise ValueError("need at least one blueprint")
    env = MagneticAssemblyEnv(blockset, config)
    successes = []
    for t in range(n_targets):
        bp = blueprints[int(rng.integers(0, len(blueprints)))]
        if t == 0:
            env.reset(bp, rng)
        else:
            env.retarget(bp)
        solved = False
        for _ in range(per_target_cap):
            action = policy.act(env.build_obs(), env)
            result = env.step(action)
            if result.info["success"]:
                solved = True
                break
            if result.done:
                break
        successes.append(solved)
    return successes


class RandomPolicy:
    """Uniform random block choices with Gaussian velocity noise."""

    def __init__(self, rng: np.random.Generator, move_scale: float = 0.5):
        self.rng = rng
        self.move_scale = move_scale

    def act(self, obs, env: MagneticAssemblyEnv) -> Action:
        n = env.blockset.n_blocks
        return Action(
            self.rng.integers(0, n, size=env.config.n_grippers),
            self.rng.normal(0.0, self.move_scale, size=(n, 6)),
        )


class OracleTeleportPolicy:
    """Test double: teleports blocks into the realized target and lets the
    snap pass connect them. Upper-bound harness check, not a learned agent."""

    def act(self, obs, env: MagneticAssemblyEnv) -> Action:
        bp = env.blueprint
        realized = realize_blueprint(bp, env.blockset)
        s = env.state
        s.connections.clear()
        corners = np.concatenate([
            box_corners(p.position, p.rotation_matrix(), env.blockset.type_of(b).half_extents)
            for b, p in realized.items()
        ])
        lift = -float(np.min(corners[:, 2]))
        for b, p in realized.items():
            s.poses[b] = compose(Pose(np.array([0.0, 0.0, lift])), p)
        # park distractors on a line far outside any realizable structure,
        # spaced beyond snap range of each other
        others = [b for b in range(env.blockset.n_blocks) if b not in realized]
        far = env.config.arena_half + 4.0
        for k, b in enumerate(others):
            half = env.blockset.type_of(b).half_extents
            s.poses[b] = Pose(np.array([far + 0.8 * k, 0.0, half[2]]))
        return Action.zeros(env.config.n_grippers, env.blockset.n_blocks)


# ---------------------------------------------------------------------------
# Trajectory logs
# ---------------------------------------------------------------------------

def state_digest(state: WorldState) -> str:
    """Order-stable hash of all block poses; catches any replay divergence."""
    import hashlib

    payload = np.concatenate([state.poses[b].as_array() for b in sorted(state.poses)])
    return hashlib.sha256(payload.tobytes()).hexdigest()[:16]


def action_to_jsonable(action: Action) -> dict:
    return {
        "choice": [int(c) for c in action.gripper_choice],
        "moves": [[float(v) for v in row] for row in action.block_moves],
    }


def action_from_jsonable(d: dict) -> Action:
    return Action(np.array(d["choice"], dtype=np.int64), np.array(d["moves"], dtype=np.float64))


class TrajectoryWriter:
    """JSONL trajectory log: self-contained header plus one record per step."""

    def __init__(self, path, config: EnvConfig, blueprint: Blueprint, seed: int,
                 preset: Blueprint | None = None):
        self.f = open(path, "w")
        header = {
            "type": "header",
            "env_config": config.to_flat_dict(),
            "blueprint": blueprint_to_dict(blueprint),
            "preset": blueprint_to_dict(preset) if preset is not None else None,
            "seed": int(seed),
        }
        self.f.write(json.dumps(header) + "\n")

    def record(self, step: int, action: Action, result: StepResult, digest: str = ""):
        rec = {
            "step": int(step),
            "action": action_to_jsonable(action),
            "reward": float(result.reward),
            "reward_terms": {k: float(v) for k, v in result.info["reward_terms"].items()},
            "connections": [
                [c.block_a, c.magnet_a, c.block_b, c.magnet_b]
                for c in result.info.get("connections", [])
            ],
            "success": bool(result.info["success"]),
            "state_digest": digest,
        }
        self.f.write(json.dumps(rec) + "\n")

    def close(self):
        self.f.close()


def rollout_trajectory(env: MagneticAssemblyEnv, blueprint: Blueprint, policy,
                       seed: int, path, preset: Blueprint | None = None) -> bool:
    """Run one episode, logging every step; returns episode success."""
    rng = np.random.default_rng(seed)
    writer = TrajectoryWriter(path, env.config, blueprint, seed, preset)
    env.reset(blueprint, rng, preset=preset)
    success = False
    step = 0
    try:
        while not env.done:
            action = policy.act(env.build_obs(), env)
            result = env.step(action)
            result.info["connections"] = sorted(
                env.state.connections,
                key=lambda c: (c.block_a, c.magnet_a, c.block_b, c.magnet_b),
            )
            writer.record(step, action, result, digest=state_digest(env.state))
            success = success or result.info["success"]
            step += 1
    finally:
        writer.close()
    return success


def replay_trajectory(path, blockset: BlockSet):
    """Re-simulate a logged episode; returns (ok, first_divergent_step).

    Divergence means any reward, connection set, or success flag fails to
    reproduce bit-exactly.
    """
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    header = lines[0]
    if header.get("type") != "header":
        raise ValueError(f"{path}: first record must be the header")
    config = EnvConfig.from_flat_dict(header["env_config"])
    blueprint = blueprint_from_dict(header["blueprint"], blockset, where=f"{path}:blueprint")
    preset = None
    if header.get("preset") is not None:
        preset = blueprint_from_dict(header["preset"], blockset, where=f"{path}:preset")
    env = MagneticAssemblyEnv(blockset, config)
    rng = np.random.default_rng(int(header["seed"]))
    env.reset(blueprint, rng, preset=preset)
    for rec in lines[1:]:
        action = action_from_jsonable(rec["action"])
        result = env.step(action)
        live = sorted(
            [c.block_a, c.magnet_a, c.block_b, c.magnet_b] for c in env.state.connections
        )
        logged = sorted(list(c) for c in rec["connections"])
        digest_ok = (not rec.get("state_digest")
                     or rec["state_digest"] == state_digest(env.state))
        if (result.reward != rec["reward"] or live != logged
                or not digest_ok
                or bool(result.info["success"]) != bool(rec["success"])):
            return False, int(rec["step"])
    return True, None
