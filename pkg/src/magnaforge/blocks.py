"""Block/magnet definitions, blueprint data model, file formats, validation,
and the procedural blueprint generator.

A magnet's local frame has +z pointing out of the block face and +x as the
roll reference tangent. Two magnets are attached when their frames are
face-to-face: child_frame == parent_frame * FLIP * Rz(k * 90deg) with the
anchors coincident. Blueprints therefore only ever contain quarter-turn
rolls, which is also what the simulator's snap produces.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import obb_penetration
from .errors import (
    GenerationExhausted,
    GeometryError,
    InconsistentBlueprint,
    ParseError,
    SchemaError,
)
from .geom import (
    Pose,
    compose,
    inverse,
    quat_angle,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_rotz,
    relative,
)

FORMAT_VERSION = 1

POSITIVE = "positive"
NEGATIVE = "negative"

# Rotation flipping a magnet frame onto its mate: z -> -z keeping x in plane.
MAGNET_FLIP = Pose(np.zeros(3), quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.pi))

_COINCIDENT_TOL = 1e-6


@dataclass
class MagnetSpec:
    local_pose: Pose
    polarity: str

    @property
    def anchor(self) -> np.ndarray:
        return self.local_pose.position

    @property
    def axis(self) -> np.ndarray:
        """Outward face normal in the block frame."""
        return self.local_pose.rotate_vector(np.array([0.0, 0.0, 1.0]))


@dataclass
class BlockType:
    id: int
    name: str
    half_extents: np.ndarray
    magnets: list
    mass: float


@dataclass
class BlockSet:
    types: list
    instances: list  # (instance_id, type_id) pairs; ids dense 0..N-1

    @property
    def n_blocks(self) -> int:
        return len(self.instances)

    def type_of(self, instance_id: int) -> BlockType:
        return self.types[self.instances[instance_id][1]]

    def magnet(self, instance_id: int, slot: int) -> MagnetSpec:
        return self.type_of(instance_id).magnets[slot]


@dataclass(frozen=True)
class Connection:
    block_a: int
    magnet_a: int
    block_b: int
    magnet_b: int

    def canonical(self) -> "Connection":
        if (self.block_a, self.magnet_a) <= (self.block_b, self.magnet_b):
            return self
        return Connection(self.block_b, self.magnet_b, self.block_a, self.magnet_a)


@dataclass
class Blueprint:
    id: str
    blocks: list  # used instance ids, sorted
    connections: list  # of Connection
    relative_poses: dict  # (a, b) with a < b -> Pose of b in a's frame
    n_blocks_used: int

    def connection_set(self) -> frozenset:
        return frozenset(c.canonical() for c in self.connections)

    def pair_set(self) -> frozenset:
        return frozenset(
            (min(c.block_a, c.block_b), max(c.block_a, c.block_b)) for c in self.connections
        )


@dataclass
class BlueprintLibrary:
    train: list
    test: list

    def all(self) -> list:
        return list(self.train) + list(self.test)

    def by_id(self, bp_id: str) -> Blueprint:
        for bp in self.all():
            if bp.id == bp_id:
                return bp
        raise KeyError(f"unknown blueprint id: {bp_id}")


@dataclass
class Violation:
    kind: str
    detail: str

    def __str__(self):
        return f"{self.kind}: {self.detail}"


# ---------------------------------------------------------------------------
# Default blockset
# ---------------------------------------------------------------------------

_DENSITY = 500.0  # kg / m^3


def _face_magnet(half_extents: np.ndarray, normal_axis: int, sign: float, polarity: str) -> MagnetSpec:
    normal = np.zeros(3)
    normal[normal_axis] = sign
    tangent = np.array([0.0, 0.0, 1.0]) if normal_axis != 2 else np.array([1.0, 0.0, 0.0])
    rot = np.column_stack([tangent, np.cross(normal, tangent), normal])
    anchor = normal * half_extents[normal_axis]
    return MagnetSpec(Pose(anchor, quat_from_matrix(rot)), polarity)


def _block_type(type_id: int, name: str, half_extents, magnet_faces) -> BlockType:
    he = np.asarray(half_extents, dtype=np.float64)
    mass = _DENSITY * 8.0 * float(np.prod(he))
    magnets = [_face_magnet(he, axis, sign, pol) for axis, sign, pol in magnet_faces]
    return BlockType(type_id, name, he, magnets, mass)


def default_blockset() -> BlockSet:
    """Six cuboid types, 16 instances total."""
    px, nx = (0, 1.0, POSITIVE), (0, -1.0, NEGATIVE)
    types = [
        _block_type(0, "cube", [0.05, 0.05, 0.05], [px, nx]),
        _block_type(1, "bar", [0.15, 0.05, 0.05], [px, nx]),
        _block_type(2, "plank", [0.10, 0.05, 0.025], [px, nx]),
        _block_type(3, "halfbar", [0.075, 0.05, 0.05], [px, nx]),
        _block_type(4, "cube4", [0.05, 0.05, 0.05],
                    [px, nx, (1, 1.0, POSITIVE), (1, -1.0, NEGATIVE)]),
        _block_type(5, "slab", [0.10, 0.10, 0.025], [px, nx]),
    ]
    multiplicity = {0: 4, 1: 3, 2: 3, 3: 2, 4: 2, 5: 2}
    instances = []
    for type_id in sorted(multiplicity):
        for _ in range(multiplicity[type_id]):
            instances.append((len(instances), type_id))
    return BlockSet(types, instances)


# ---------------------------------------------------------------------------
# Magnet attachment geometry
# ---------------------------------------------------------------------------

def magnet_world_pose(block_pose: Pose, magnet: MagnetSpec) -> Pose:
    return compose(block_pose, magnet.local_pose)


def attached_block_pose(parent_mag_world: Pose, child_mag_local: Pose, roll_quarter: int) -> Pose:
    """Block pose placing the child magnet face-to-face on the parent magnet."""
    roll = Pose(np.zeros(3), quat_rotz((roll_quarter % 4) * (np.pi / 2.0)))
    target = compose(compose(parent_mag_world, MAGNET_FLIP), roll)
    return compose(target, inverse(child_mag_local))


def weld_transform(stationary_mag_world: Pose, moving_mag_world: Pose) -> Pose:
    """World transform snapping the moving magnet onto the stationary one.

    The roll about the shared axis is quantized to the nearest quarter turn,
    mimicking flat faces settling flush.
    """
    r_s = stationary_mag_world.rotation_matrix()
    r_m = moving_mag_world.rotation_matrix()
    flip = MAGNET_FLIP.rotation_matrix()
    b = flip @ (r_s.T @ r_m)
    phi = np.arctan2(b[1, 0] - b[0, 1], b[0, 0] + b[1, 1])
    k = int(np.round(phi / (np.pi / 2.0))) % 4
    roll = Pose(np.zeros(3), quat_rotz(k * (np.pi / 2.0)))
    target = compose(compose(stationary_mag_world, MAGNET_FLIP), roll)
    return compose(target, inverse(moving_mag_world))


def magnet_gap(mag_a_world: Pose, mag_b_world: Pose):
    """(anchor distance, axis misalignment from antiparallel) for two magnets."""
    dist = float(np.linalg.norm(mag_a_world.position - mag_b_world.position))
    za = mag_a_world.rotate_vector(np.array([0.0, 0.0, 1.0]))
    zb = mag_b_world.rotate_vector(np.array([0.0, 0.0, 1.0]))
    cosang = float(np.clip(-(za @ zb), -1.0, 1.0))
    return dist, float(np.arccos(cosang))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _pose_to_list(p: Pose) -> list:
    return [float(v) for v in p.as_array()]


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise SchemaError(f"{where}: missing field '{key}'")
    return d[key]


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    return data


def _check_version(data: dict, where: str):
    version = _require(data, "format_version", where)
    if version != FORMAT_VERSION:
        raise SchemaError(f"{where}: unsupported format_version {version!r}")


def blockset_to_dict(bs: BlockSet) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "types": [
            {
                "id": t.id,
                "name": t.name,
                "half_extents": [float(v) for v in t.half_extents],
                "mass": float(t.mass),
                "magnets": [
                    {"pose": _pose_to_list(m.local_pose), "polarity": m.polarity}
                    for m in t.magnets
                ],
            }
            for t in bs.types
        ],
        "instances": [{"id": i, "type": t} for i, t in bs.instances],
    }


def save_blockset(bs: BlockSet, path):
    with open(path, "w") as f:
        json.dump(blockset_to_dict(bs), f, indent=1)


def load_blockset(path) -> BlockSet:
    data = _load_json(path)
    _check_version(data, str(path))
    types = []
    for entry in _require(data, "types", str(path)):
        he = np.asarray(_require(entry, "half_extents", "block type"), dtype=np.float64)
        if he.shape != (3,) or np.any(he <= 0):
            raise SchemaError(f"block type {entry.get('id')}: bad half_extents")
        magnets = []
        for m in _require(entry, "magnets", "block type"):
            pose = Pose.from_array(_require(m, "pose", "magnet"))
            pol = _require(m, "polarity", "magnet")
            if pol not in (POSITIVE, NEGATIVE):
                raise SchemaError(f"magnet polarity must be positive/negative, got {pol!r}")
            magnets.append(MagnetSpec(pose, pol))
        if not magnets:
            raise SchemaError(f"block type {entry.get('id')}: needs at least one magnet")
        btype = BlockType(
            int(_require(entry, "id", "block type")),
            str(entry.get("name", f"type{entry.get('id')}")),
            he,
            magnets,
            float(_require(entry, "mass", "block type")),
        )
        _check_magnet_geometry(btype)
        types.append(btype)
    if [t.id for t in types] != list(range(len(types))):
        raise SchemaError("block type ids must be dense 0..K-1")
    instances = []
    for inst in _require(data, "instances", str(path)):
        instances.append((int(_require(inst, "id", "instance")), int(_require(inst, "type", "instance"))))
    if [i for i, _ in instances] != list(range(len(instances))):
        raise SchemaError("instance ids must be dense 0..N-1")
    for _, t in instances:
        if not 0 <= t < len(types):
            raise SchemaError(f"instance references unknown type {t}")
    return BlockSet(types, instances)


def _check_magnet_geometry(btype: BlockType, tol: float = 1e-9):
    he = btype.half_extents
    for k, m in enumerate(btype.magnets):
        a = m.anchor
        if np.any(np.abs(a) > he + tol):
            raise GeometryError(f"type {btype.id} magnet {k}: anchor outside cuboid")
        on_face = [i for i in range(3) if abs(abs(a[i]) - he[i]) <= tol]
        if not on_face:
            raise GeometryError(f"type {btype.id} magnet {k}: anchor not on a face")
        axis = m.axis
        ok = False
        for i in on_face:
            normal = np.zeros(3)
            normal[i] = np.sign(a[i]) if a[i] != 0 else 1.0
            if np.linalg.norm(axis - normal) <= 1e-6:
                ok = True
        if not ok:
            raise GeometryError(f"type {btype.id} magnet {k}: axis is not the outward face normal")


def blueprint_to_dict(bp: Blueprint) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "id": bp.id,
        "n_blocks_used": bp.n_blocks_used,
        "blocks": list(bp.blocks),
        "connections": [
            {"block_a": c.block_a, "magnet_a": c.magnet_a, "block_b": c.block_b, "magnet_b": c.magnet_b}
            for c in bp.connections
        ],
        "relative_poses": [
            {"block_a": a, "block_b": b, "pose": _pose_to_list(p)}
            for (a, b), p in sorted(bp.relative_poses.items())
        ],
    }


def blueprint_from_dict(data: dict, blockset: BlockSet | None = None, where: str = "blueprint") -> Blueprint:
    _check_version(data, where)
    bp_id = str(_require(data, "id", where))
    blocks = [int(b) for b in _require(data, "blocks", where)]
    if sorted(set(blocks)) != sorted(blocks):
        raise SchemaError(f"{where}: duplicate block ids in 'blocks'")
    connections = []
    seen_slots = set()
    for c in _require(data, "connections", where):
        conn = Connection(
            int(_require(c, "block_a", "connection")),
            int(_require(c, "magnet_a", "connection")),
            int(_require(c, "block_b", "connection")),
            int(_require(c, "magnet_b", "connection")),
        )
        for slot in ((conn.block_a, conn.magnet_a), (conn.block_b, conn.magnet_b)):
            if slot in seen_slots:
                raise SchemaError(f"{where}: magnet slot {slot} used by more than one connection")
            seen_slots.add(slot)
        if blockset is not None:
            for blk, mag in ((conn.block_a, conn.magnet_a), (conn.block_b, conn.magnet_b)):
                if not 0 <= blk < blockset.n_blocks:
                    raise SchemaError(f"{where}: connection references unknown block {blk}")
                if not 0 <= mag < len(blockset.type_of(blk).magnets):
                    raise SchemaError(f"{where}: block {blk} has no magnet {mag}")
            pol_a = blockset.magnet(conn.block_a, conn.magnet_a).polarity
            pol_b = blockset.magnet(conn.block_b, conn.magnet_b).polarity
            if pol_a == pol_b:
                raise SchemaError(
                    f"{where}: connection {conn} pairs two {pol_a} magnets; "
                    "paired magnets must have opposite polarity"
                )
        connections.append(conn)
    rel = {}
    for r in _require(data, "relative_poses", where):
        a, b = int(_require(r, "block_a", "relative pose")), int(_require(r, "block_b", "relative pose"))
        if a >= b:
            raise SchemaError(f"{where}: relative pose keys must satisfy block_a < block_b")
        if (a, b) in rel:
            raise SchemaError(f"{where}: duplicate relative pose for pair ({a}, {b})")
        rel[(a, b)] = Pose.from_array(_require(r, "pose", "relative pose"))
    n_used = int(_require(data, "n_blocks_used", where))
    if n_used != len(blocks):
        raise SchemaError(f"{where}: n_blocks_used={n_used} but {len(blocks)} blocks listed")
    return Blueprint(bp_id, sorted(blocks), connections, rel, n_used)


def save_blueprint(bp: Blueprint, path):
    with open(path, "w") as f:
        json.dump(blueprint_to_dict(bp), f, indent=1)


def load_blueprint(path, blockset: BlockSet | None = None) -> Blueprint:
    return blueprint_from_dict(_load_json(path), blockset, where=str(path))


def save_library(lib: BlueprintLibrary, path):
    data = {
        "format_version": FORMAT_VERSION,
        "train": [blueprint_to_dict(bp) for bp in lib.train],
        "test": [blueprint_to_dict(bp) for bp in lib.test],
    }
    with open(path, "w") as f:
        json.dump(data, f, indent=1)


def load_library(path, blockset: BlockSet | None = None) -> BlueprintLibrary:
    data = _load_json(path)
    _check_version(data, str(path))
    train = [blueprint_from_dict(d, blockset, where=f"{path}:train[{i}]")
             for i, d in enumerate(_require(data, "train", str(path)))]
    test = [blueprint_from_dict(d, blockset, where=f"{path}:test[{i}]")
            for i, d in enumerate(_require(data, "test", str(path)))]
    ids = [bp.id for bp in train] + [bp.id for bp in test]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate blueprint ids across splits")
    return BlueprintLibrary(train, test)


# ---------------------------------------------------------------------------
# Realization and validation
# ---------------------------------------------------------------------------

def _pose_graph(bp: Blueprint) -> dict:
    adj = {}
    for (a, b), pose in bp.relative_poses.items():
        adj.setdefault(a, []).append((b, pose))
        adj.setdefault(b, []).append((a, inverse(pose)))
    return adj


def realize_blueprint(bp: Blueprint, blockset: BlockSet) -> dict:
    """World pose per used block, root (lowest id) at identity.

    Raises InconsistentBlueprint when cycle closures or magnet coincidence
    contradict the stored relative poses.
    """
    if not bp.blocks:
        raise InconsistentBlueprint(f"{bp.id}: blueprint uses no blocks")
    root = min(bp.blocks)
    poses = {root: Pose.identity()}
    adj = _pose_graph(bp)
    stack = [root]
    while stack:
        a = stack.pop()
        for b, rel_pose in adj.get(a, []):
            candidate = compose(poses[a], rel_pose)
            if b in poses:
                dp = np.linalg.norm(candidate.position - poses[b].position)
                da = quat_angle(candidate.orientation, poses[b].orientation)
                if dp > _COINCIDENT_TOL or da > _COINCIDENT_TOL:
                    raise InconsistentBlueprint(
                        f"{bp.id}: cycle through block {b} closes with error "
                        f"{dp:.2e} m / {da:.2e} rad"
                    )
            else:
                poses[b] = candidate
                stack.append(b)
    missing = set(bp.blocks) - set(poses)
    if missing:
        raise InconsistentBlueprint(f"{bp.id}: no relative pose chain reaches blocks {sorted(missing)}")
    for c in bp.connections:
        mag_a = magnet_world_pose(poses[c.block_a], blockset.magnet(c.block_a, c.magnet_a))
        mag_b = magnet_world_pose(poses[c.block_b], blockset.magnet(c.block_b, c.magnet_b))
        dist, ang = magnet_gap(mag_a, mag_b)
        if dist > _COINCIDENT_TOL or ang > _COINCIDENT_TOL:
            raise InconsistentBlueprint(
                f"{bp.id}: connection {c} has anchor gap {dist:.2e} m, axis error {ang:.2e} rad"
            )
    return {b: poses[b] for b in bp.blocks}


def validate_blueprint(bp: Blueprint, blockset: BlockSet) -> list:
    """All invariant violations as data; empty list means the blueprint is valid."""
    out = []
    for b in bp.blocks:
        if not 0 <= b < blockset.n_blocks:
            out.append(Violation("bad_block", f"block id {b} not in blockset"))
    if out:
        return out

    slot_use = {}
    for c in bp.connections:
        for blk, mag in ((c.block_a, c.magnet_a), (c.block_b, c.magnet_b)):
            if blk not in bp.blocks:
                out.append(Violation("bad_block", f"connection references unused block {blk}"))
                return out
            if not 0 <= mag < len(blockset.type_of(blk).magnets):
                out.append(Violation("bad_magnet", f"block {blk} has no magnet slot {mag}"))
                return out
            slot_use.setdefault((blk, mag), 0)
            slot_use[(blk, mag)] += 1
        if blockset.magnet(c.block_a, c.magnet_a).polarity == blockset.magnet(c.block_b, c.magnet_b).polarity:
            out.append(Violation("polarity", f"connection {c} pairs same-polarity magnets"))
    for slot, n in slot_use.items():
        if n > 1:
            out.append(Violation("duplicate_slot", f"magnet slot {slot} in {n} connections"))

    # connectivity over used blocks
    if len(bp.blocks) > 1:
        adj = {b: set() for b in bp.blocks}
        for c in bp.connections:
            adj[c.block_a].add(c.block_b)
            adj[c.block_b].add(c.block_a)
        seen = {min(bp.blocks)}
        stack = [min(bp.blocks)]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if seen != set(bp.blocks):
            out.append(Violation("disconnected", f"blocks {sorted(set(bp.blocks) - seen)} unreachable"))

    pairs = bp.pair_set()
    for (a, b) in bp.relative_poses:
        if (a, b) not in pairs:
            out.append(Violation("pose_extra", f"relative pose stored for unconnected pair ({a}, {b})"))
    for (a, b) in pairs:
        if (a, b) not in bp.relative_poses:
            out.append(Violation("pose_missing", f"no relative pose for connected pair ({a}, {b})"))

    if out:
        return out

    try:
        poses = realize_blueprint(bp, blockset)
    except InconsistentBlueprint as e:
        out.append(Violation("inconsistent", str(e)))
        return out

    ids = sorted(poses)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            depth, _ = obb_penetration(
                poses[a].position, poses[a].rotation_matrix(), blockset.type_of(a).half_extents,
                poses[b].position, poses[b].rotation_matrix(), blockset.type_of(b).half_extents,
            )
            if depth > 1e-4:
                out.append(Violation("penetration", f"blocks {a} and {b} overlap by {depth:.2e} m"))
    return out


# ---------------------------------------------------------------------------
# Procedural generation
# ---------------------------------------------------------------------------

def _free_slots(blockset: BlockSet, block_id: int, used_slots: set) -> list:
    return [
        s for s in range(len(blockset.type_of(block_id).magnets))
        if (block_id, s) not in used_slots
    ]


def _aligned_free_pairs(blockset: BlockSet, poses: dict, used_slots: set) -> list:
    """Coincident antiparallel opposite-polarity free slot pairs (will self-snap)."""
    found = []
    ids = sorted(poses)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            for sa in _free_slots(blockset, a, used_slots):
                for sb in _free_slots(blockset, b, used_slots):
                    ma, mb = blockset.magnet(a, sa), blockset.magnet(b, sb)
                    if ma.polarity == mb.polarity:
                        continue
                    dist, ang = magnet_gap(
                        magnet_world_pose(poses[a], ma), magnet_world_pose(poses[b], mb)
                    )
                    if dist <= _COINCIDENT_TOL and ang <= _COINCIDENT_TOL:
                        found.append((a, sa, b, sb))
    return found


def _try_generate(rng: np.random.Generator, blockset: BlockSet, n_blocks: int,
                  attempts_per_block: int = 60):
    order = list(rng.choice(blockset.n_blocks, size=n_blocks, replace=False))
    poses = {int(order[0]): Pose.identity()}
    used_slots = set()
    connections = []
    for raw in order[1:]:
        new_block = int(raw)
        placed = False
        for _ in range(attempts_per_block):
            host = int(rng.choice(sorted(poses)))
            host_free = _free_slots(blockset, host, used_slots)
            new_free = list(range(len(blockset.type_of(new_block).magnets)))
            if not host_free:
                continue
            hs = int(rng.choice(host_free))
            host_mag = blockset.magnet(host, hs)
            mates = [s for s in new_free
                     if blockset.magnet(new_block, s).polarity != host_mag.polarity]
            if not mates:
                continue
            ns = int(rng.choice(mates))
            roll = int(rng.integers(0, 4))
            pose = attached_block_pose(
                magnet_world_pose(poses[host], host_mag),
                blockset.magnet(new_block, ns).local_pose,
                roll,
            )
            collides = False
            for other, opose in poses.items():
                depth, _ = obb_penetration(
                    pose.position, pose.rotation_matrix(), blockset.type_of(new_block).half_extents,
                    opose.position, opose.rotation_matrix(), blockset.type_of(other).half_extents,
                )
                if depth > 1e-6:
                    collides = True
                    break
            if collides:
                continue
            poses[new_block] = pose
            connections.append(Connection(host, hs, new_block, ns))
            used_slots.update({(host, hs), (new_block, ns)})
            placed = True
            break
        if not placed:
            return None
    # any remaining coincident pairs would self-snap in the simulator, so the
    # blueprint must declare them as required connections
    for (a, sa, b, sb) in _aligned_free_pairs(blockset, poses, used_slots):
        connections.append(Connection(a, sa, b, sb))
        used_slots.update({(a, sa), (b, sb)})
    return poses, connections


def _split_is_train(bp_id: str) -> bool:
    digest = hashlib.sha256(bp_id.encode()).hexdigest()
    return int(digest, 16) % 100 < 85


def generate_blueprints(seed: int, count: int, n_blocks_range=(2, 16),
                        blockset: BlockSet | None = None,
                        max_restarts: int = 80) -> BlueprintLibrary:
    """Random spanning-tree growth; deterministic for a fixed seed.

    Splits ~85/15 train/test by id hash.
    """
    lo, hi = int(n_blocks_range[0]), int(n_blocks_range[1])
    blockset = blockset or default_blockset()
    if lo < 2 or hi > blockset.n_blocks or lo > hi:
        raise ValueError(f"n_blocks_range must lie within [2, {blockset.n_blocks}]")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for i in range(count):
        n = int(rng.integers(lo, hi + 1))
        result = None
        for _ in range(max_restarts):
            result = _try_generate(rng, blockset, n)
            if result is not None:
                break
        if result is None:
            raise GenerationExhausted(f"could not realize a {n}-block structure after {max_restarts} restarts")
        poses, connections = result
        blocks = sorted(poses)
        root = blocks[0]
        rel = {}
        for c in connections:
            a, b = sorted((c.block_a, c.block_b))
            rel[(a, b)] = relative(poses[a], poses[b])
        bp = Blueprint(
            id=f"bp-{seed}-{i:04d}-n{n}",
            blocks=blocks,
            connections=connections,
            relative_poses=rel,
            n_blocks_used=len(blocks),
        )
        violations = validate_blueprint(bp, blockset)
        if violations:
            raise GenerationExhausted(
                f"generated blueprint {bp.id} failed validation: {violations[0]}"
            )
        (train if _split_is_train(bp.id) else test).append(bp)
    return BlueprintLibrary(train, test)
