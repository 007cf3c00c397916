"""Oriented-cuboid overlap tests (separating axis theorem).

Used for blueprint penetration validation, initial-layout rejection
sampling, and step-time collision push-out. Returns minimal-translation
data so callers can both measure and resolve penetrations.
"""

from __future__ import annotations

import numpy as np


def box_corners(center: np.ndarray, rot: np.ndarray, half: np.ndarray) -> np.ndarray:
    """All 8 world-frame corners of an oriented box, shape (8, 3)."""
    signs = np.array([
        [sx, sy, sz]
        for sx in (-1.0, 1.0)
        for sy in (-1.0, 1.0)
        for sz in (-1.0, 1.0)
    ])
    return center + (signs * half) @ rot.T


def box_aabb(center: np.ndarray, rot: np.ndarray, half: np.ndarray):
    """(min, max) corners of the axis-aligned bounding box."""
    reach = np.abs(rot) @ half
    return center - reach, center + reach


def obb_penetration(
    c1: np.ndarray,
    r1: np.ndarray,
    h1: np.ndarray,
    c2: np.ndarray,
    r2: np.ndarray,
    h2: np.ndarray,
):
    """Penetration depth and minimal push-out direction for two oriented boxes.

    Returns (depth, direction) where direction is the unit world vector along
    which box 2 must move by `depth` to separate. depth == 0.0 means the boxes
    do not overlap (direction is None).
    """
    t = c2 - c1
    face_axes = np.concatenate([r1.T, r2.T])  # 6 unit axes
    a = np.repeat(r1.T, 3, axis=0)
    b = np.tile(r2.T, (3, 1))
    crosses = np.cross(a, b)
    norms = np.linalg.norm(crosses, axis=1)
    keep = norms > 1e-9
    edge_axes = crosses[keep] / norms[keep, None]
    axes = np.concatenate([face_axes, edge_axes])

    ra = np.abs(axes @ r1) @ h1
    rb = np.abs(axes @ r2) @ h2
    dist = axes @ t
    overlap = ra + rb - np.abs(dist)
    if np.any(overlap <= 0.0):
        return 0.0, None
    i = int(np.argmin(overlap))
    axis = axes[i] if dist[i] >= 0.0 else -axes[i]
    return float(overlap[i]), axis


def max_pairwise_penetration(centers, rots, halves) -> float:
    """Deepest penetration over all box pairs (0.0 if none overlap)."""
    n = len(centers)
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            depth, _ = obb_penetration(
                centers[i], rots[i], halves[i], centers[j], rots[j], halves[j]
            )
            worst = max(worst, depth)
    return worst
