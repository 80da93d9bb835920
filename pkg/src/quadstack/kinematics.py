"""Closed-form kinematics for one 3-DoF leg (roll, pitch, knee).

Frames: hip-roll frame has x forward, y left, z up, origin on the roll
axis. Zero pose is the leg pointing straight down. Roll rotates about x;
pitch and knee rotate about y. The foot in the pitched leg plane is

    p0 = (-L1 sin qp - L2 sin(qp+qk),  s*d,  -L1 cos qp - L2 cos(qp+qk))

with s the side sign and d the ab/ad lateral offset; the full position is
p = Rx(q_roll) @ p0.

The knee motor sits at the hip and drives the knee joint through a
parallelogram linkage, modeled as the fixed linear map q = M @ m between
motor and joint coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LegGeometry

# Parallelogram transmission: knee joint angle = knee motor minus hip pitch,
# which keeps the calf referenced to the hip frame. Configurable for other
# linkage ratios.
DEFAULT_TRANSMISSION = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 1.0],
])


class UnreachableTargetError(ValueError):
    """IK target outside the leg workspace.

    Carries the distance from the target to the closest reachable point.
    """

    def __init__(self, target, shortfall):
        self.target = np.asarray(target, dtype=float)
        self.shortfall = float(shortfall)
        super().__init__(
            f"target {self.target.tolist()} unreachable; "
            f"closest reachable point is {self.shortfall:.4f} m away")


@dataclass
class FootState:
    position: np.ndarray   # (3,) m, hip-roll frame
    jacobian: np.ndarray   # (3, 3) dp/dq


def _rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def forward_kinematics(leg: LegGeometry, q) -> FootState:
    """Foot position and analytic Jacobian for joint angles q = (roll, pitch, knee)."""
    qr, qp, qk = q
    L1, L2 = leg.thigh_len, leg.calf_len
    d = leg.side_sign * leg.abad_link

    sp, cp = np.sin(qp), np.cos(qp)
    spk, cpk = np.sin(qp + qk), np.cos(qp + qk)
    p0 = np.array([-L1 * sp - L2 * spk, d, -L1 * cp - L2 * cpk])

    R = _rot_x(qr)
    position = R @ p0

    # column 0: dR/dqr @ p0; columns 1, 2: R @ dp0/dq
    c, s = np.cos(qr), np.sin(qr)
    dR = np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    dp0_dqp = np.array([-L1 * cp - L2 * cpk, 0.0, L1 * sp + L2 * spk])
    dp0_dqk = np.array([-L2 * cpk, 0.0, L2 * spk])
    jac = np.column_stack([dR @ p0, R @ dp0_dqp, R @ dp0_dqk])
    return FootState(position=position, jacobian=jac)


def foot_positions(model, q12) -> np.ndarray:
    """(4, 3) foot positions in each hip-roll frame, vectorized over legs."""
    q = np.asarray(q12, dtype=float).reshape(4, 3)
    out = np.empty((4, 3))
    for i, leg in enumerate(model.legs):
        out[i] = forward_kinematics(leg, q[i]).position
    return out


class LegArray:
    """Per-model constants for the batched all-legs FK used in the sim loop."""

    def __init__(self, model):
        self.L1 = np.array([leg.thigh_len for leg in model.legs])
        self.L2 = np.array([leg.calf_len for leg in model.legs])
        self.d = np.array([leg.side_sign * leg.abad_link for leg in model.legs])
        self.hip_offsets = np.array([leg.hip_offset for leg in model.legs])
        limits = np.stack([leg.joint_limits for leg in model.legs])
        self.limits_lo = limits[:, :, 0]
        self.limits_hi = limits[:, :, 1]


def fk_legs(legs: LegArray, q4: np.ndarray):
    """Batched FK: (4,3) joint angles -> positions (4,3) and Jacobians (4,3,3).

    Same math as forward_kinematics, restated with array trig.
    """
    qr, qp, qk = q4[:, 0], q4[:, 1], q4[:, 2]
    L1, L2, d = legs.L1, legs.L2, legs.d
    sp, cp = np.sin(qp), np.cos(qp)
    spk, cpk = np.sin(qp + qk), np.cos(qp + qk)
    c, s = np.cos(qr), np.sin(qr)

    p0x = -L1 * sp - L2 * spk
    p0z = -L1 * cp - L2 * cpk
    pos = np.stack([p0x, c * d - s * p0z, s * d + c * p0z], axis=1)

    dz_p = L1 * sp + L2 * spk      # dp0z/dqp
    dx_p = -L1 * cp - L2 * cpk     # dp0x/dqp
    dz_k = L2 * spk
    dx_k = -L2 * cpk

    jac = np.empty((q4.shape[0], 3, 3))
    jac[:, 0, 0] = 0.0
    jac[:, 1, 0] = -s * d - c * p0z
    jac[:, 2, 0] = c * d - s * p0z
    jac[:, 0, 1] = dx_p
    jac[:, 1, 1] = -s * dz_p
    jac[:, 2, 1] = c * dz_p
    jac[:, 0, 2] = dx_k
    jac[:, 1, 2] = -s * dz_k
    jac[:, 2, 2] = c * dz_k
    return pos, jac


def inverse_kinematics(leg: LegGeometry, p) -> np.ndarray:
    """Joint angles reaching p in the hip-roll frame, knee-backward branch.

    Raises UnreachableTargetError outside the workspace.
    """
    p = np.asarray(p, dtype=float)
    x, y, z = p
    L1, L2 = leg.thigh_len, leg.calf_len
    d = leg.side_sign * leg.abad_link

    # Roll: rotate (y, z) so the leg plane sits at lateral offset d with the
    # in-plane extension pointing down (z0 <= 0). Boundary targets produced
    # by FK land exactly on the workspace edge, so give the reachability
    # tests a little slack against rounding.
    rho_sq = y * y + z * z
    if rho_sq < d * d * (1.0 - 1e-9):
        # closest reachable point lies on the cylinder |yz| = d around x
        raise UnreachableTargetError(p, abs(d) - np.sqrt(rho_sq))
    rho = np.sqrt(rho_sq)
    qr = np.arctan2(z, y) + np.arccos(np.clip(d / rho, -1.0, 1.0))
    z0 = -np.sqrt(max(rho_sq - d * d, 0.0))

    # Planar two-link IK for target (x, z0), knee-backward (qk <= 0).
    r_sq = x * x + z0 * z0
    cos_qk = (r_sq - L1 * L1 - L2 * L2) / (2.0 * L1 * L2)
    if cos_qk > 1.0 + 1e-12:
        raise UnreachableTargetError(p, np.sqrt(r_sq) - (L1 + L2))
    if cos_qk < -1.0 - 1e-12:
        raise UnreachableTargetError(p, abs(L1 - L2) - np.sqrt(r_sq))
    qk = -np.arccos(np.clip(cos_qk, -1.0, 1.0))
    qp = np.arctan2(-x, -z0) - np.arctan2(L2 * np.sin(qk), L1 + L2 * np.cos(qk))
    # wrap pitch to (-pi, pi] to stay on the principal branch
    qp = (qp + np.pi) % (2.0 * np.pi) - np.pi
    return np.array([qr, qp, qk])


def check_joint_limits(leg: LegGeometry, q) -> bool:
    q = np.asarray(q, dtype=float)
    return bool(np.all(q >= leg.joint_limits[:, 0]) and np.all(q <= leg.joint_limits[:, 1]))


class Transmission:
    """Linear motor<->joint map q = M @ m with torque map tau_m = M^T tau_j."""

    def __init__(self, matrix=DEFAULT_TRANSMISSION):
        self.M = np.asarray(matrix, dtype=float)
        self.M_inv = np.linalg.inv(self.M)

    def motor_to_joint(self, m):
        return np.asarray(m, dtype=float) @ self.M.T

    def joint_to_motor(self, q):
        return np.asarray(q, dtype=float) @ self.M_inv.T

    def joint_torque_to_motor(self, tau_joint):
        """Power-conserving torque map: qd_m . tau_m == qd_j . tau_j."""
        return np.asarray(tau_joint, dtype=float) @ self.M

    def motor_torque_to_joint(self, tau_motor):
        return np.asarray(tau_motor, dtype=float) @ self.M_inv


_default = Transmission()


def motor_to_joint(m) -> np.ndarray:
    return _default.motor_to_joint(m)


def joint_to_motor(q) -> np.ndarray:
    return _default.joint_to_motor(q)


def joint_torque_map(tau_joint) -> np.ndarray:
    return _default.joint_torque_to_motor(tau_joint)
