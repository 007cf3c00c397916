"""Minimal 3D rigid-transform math: quaternions, poses, frame changes.

Conventions: quaternions are scalar-first (w, x, y, z), unit norm,
right-handed, and encode active rotations. World z is "up"; the ground
plane is z = 0. Vectors and quaternions are plain float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([float(x), float(y), float(z)])


def quat_normalize(q: np.ndarray, tolerance: float = 1e-12) -> np.ndarray:
    """Normalize to unit length; already-unit quaternions pass through bit-exactly."""
    q = np.asarray(q, dtype=np.float64)
    mag2 = float(q @ q)
    if mag2 == 0.0:
        raise ValueError("cannot normalize zero quaternion")
    if abs(mag2 - 1.0) < tolerance:
        return q
    return q / np.sqrt(mag2)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 + y1 * w2 + z1 * x2 - x1 * z2,
        w1 * z2 + z1 * w2 + x1 * y2 - y1 * x2,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by unit quaternion q."""
    w, ux, uy, uz = q
    vx, vy, vz = v
    # t = u x v + w v;  result = v + 2 (u x t)   (np.cross is too slow here)
    tx = uy * vz - uz * vy + w * vx
    ty = uz * vx - ux * vz + w * vy
    tz = ux * vy - uy * vx + w * vz
    return np.array([
        vx + 2.0 * (uy * tz - uz * ty),
        vy + 2.0 * (uz * tx - ux * tz),
        vz + 2.0 * (ux * ty - uy * tx),
    ])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return QUAT_IDENTITY.copy()
    axis = axis / n
    half = 0.5 * angle
    s = np.sin(half)
    return np.array([np.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_rotz(angle: float) -> np.ndarray:
    half = 0.5 * angle
    return np.array([np.cos(half), 0.0, 0.0, np.sin(half)])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Convert a proper rotation matrix to a unit quaternion (w >= 0 branch-stable)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
        ])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([
            (m[2, 1] - m[1, 2]) / s,
            0.25 * s,
            (m[0, 1] + m[1, 0]) / s,
            (m[0, 2] + m[2, 0]) / s,
        ])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([
            (m[0, 2] - m[2, 0]) / s,
            (m[0, 1] + m[1, 0]) / s,
            0.25 * s,
            (m[1, 2] + m[2, 1]) / s,
        ])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([
            (m[1, 0] - m[0, 1]) / s,
            (m[0, 2] + m[2, 0]) / s,
            (m[1, 2] + m[2, 1]) / s,
            0.25 * s,
        ])
    return quat_normalize(q)


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions, in [0, pi]; sign-invariant.

    atan2 form: precise near both 0 and pi, unlike arccos of the dot product.
    """
    rel = quat_mul(quat_conjugate(a), b)
    return 2.0 * float(np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0])))


@dataclass
class Pose:
    """Rigid transform: rotate by `orientation`, then translate by `position`."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: QUAT_IDENTITY.copy())

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).copy()
        self.orientation = quat_normalize(np.asarray(self.orientation, dtype=np.float64))

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.orientation.copy())

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return self.position + quat_rotate(self.orientation, p)

    def rotate_vector(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.orientation, v)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    @staticmethod
    def from_array(a) -> "Pose":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (7,):
            raise ValueError(f"pose array must have 7 entries, got shape {a.shape}")
        return Pose(a[:3], a[3:])

    @staticmethod
    def identity() -> "Pose":
        return Pose()


def compose(a: Pose, b: Pose) -> Pose:
    """Apply b in a's frame: world_from_b = world_from_a * a_from_b."""
    return Pose(
        a.position + quat_rotate(a.orientation, b.position),
        quat_mul(a.orientation, b.orientation),
    )


def inverse(p: Pose) -> Pose:
    qc = quat_conjugate(p.orientation)
    return Pose(-quat_rotate(qc, p.position), qc)


def relative(a: Pose, b: Pose) -> Pose:
    """Pose of b expressed in a's frame; compose(a, relative(a, b)) == b."""
    return compose(inverse(a), b)


def pose_allclose(a: Pose, b: Pose, pos_tol: float = 1e-6, ang_tol: float = 1e-6) -> bool:
    return (
        float(np.linalg.norm(a.position - b.position)) <= pos_tol
        and quat_angle(a.orientation, b.orientation) <= ang_tol
    )


def random_quat(rng: np.random.Generator) -> np.ndarray:
    """Uniform random unit quaternion (Shoemake subgroup algorithm)."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    return np.array([
        a * np.sin(2 * np.pi * u2),
        a * np.cos(2 * np.pi * u2),
        b * np.sin(2 * np.pi * u3),
        b * np.cos(2 * np.pi * u3),
    ])


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> Pose:
    return Pose(rng.uniform(-scale, scale, size=3), random_quat(rng))
