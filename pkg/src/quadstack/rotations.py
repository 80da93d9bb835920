"""Quaternion and rigid-transform helpers.

Quaternions are (w, x, y, z) numpy arrays of unit norm. World frame is
x forward, y left, z up; gravity points along -z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81  # m/s^2

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_rotvec(v):
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # first-order expansion keeps the map smooth near zero
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return q / np.linalg.norm(q)
    axis = v / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_to_rotvec(q):
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    sin_half = np.linalg.norm(q[1:])
    if sin_half < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(sin_half, q[0])
    return q[1:] / sin_half * angle


def quat_rotate(q, v):
    """Rotate vector(s) v by quaternion q (body -> world for a pose quat)."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_rotate_inverse(q, v):
    return np.asarray(v, dtype=float) @ quat_to_matrix(q)


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rpy(roll, pitch, yaw):
    """Intrinsic z-y-x (yaw, pitch, roll) Euler angles to quaternion."""
    qz = quat_from_rotvec([0.0, 0.0, yaw])
    qy = quat_from_rotvec([0.0, pitch, 0.0])
    qx = quat_from_rotvec([roll, 0.0, 0.0])
    return quat_mul(quat_mul(qz, qy), qx)


def quat_to_rpy(q):
    w, x, y, z = q
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return np.array([roll, pitch, yaw])


def projected_gravity(q):
    """Unit gravity direction expressed in the body frame of pose q."""
    return quat_rotate_inverse(q, np.array([0.0, 0.0, -1.0]))


@dataclass
class Transform:
    """Rigid transform: p_parent = rotation * p_child + translation."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float)
        self.rotation = quat_normalize(self.rotation)

    def apply(self, points):
        return quat_rotate(self.rotation, points) + self.translation

    def inverse(self) -> "Transform":
        qi = quat_conj(self.rotation)
        return Transform(-quat_rotate(qi, self.translation), qi)

    def compose(self, other: "Transform") -> "Transform":
        """Composition self*other: apply `other` first, then `self`."""
        return Transform(
            self.apply(other.translation),
            quat_mul(self.rotation, other.rotation),
        )
