"""Base orientation and velocity estimation from IMU plus leg odometry.

Orientation runs a quaternion complementary filter: integrate the gyro,
then pull the estimated gravity direction toward the accelerometer
direction with a small gain whenever the specific-force magnitude is close
to 1 g. Velocity comes from stance-leg odometry, v = -(J qd + w x p) per
stance foot averaged in the body frame, falling back to decayed
accelerometer integration when no foot is on the ground.

The robot has no foot contact sensors; stance flags come from the gait
phase while walking, or from an estimated foot-force threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import forward_kinematics
from .model import RobotModel
from .rotations import (
    GRAVITY,
    IDENTITY_QUAT,
    quat_from_rotvec,
    quat_mul,
    quat_rotate_inverse,
    quat_to_matrix,
)

TILT_GAIN = 0.02            # per update, when the accel gate is open
ACCEL_GATE = 0.5            # m/s^2 window around 1 g
NO_STANCE_DECAY = 0.99      # per update
FORCE_CONTACT_THRESHOLD = 20.0  # N


@dataclass
class ImuSample:
    gyro: np.ndarray      # (3,) rad/s body
    accel: np.ndarray     # (3,) m/s^2 body, specific force (gravity reaction)
    t: float = 0.0

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)


@dataclass
class BaseEstimate:
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    lin_vel_body: np.ndarray = field(default_factory=lambda: np.zeros(3))
    contact_flags: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=bool))
    ang_vel_body: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def projected_gravity(self) -> np.ndarray:
        return quat_rotate_inverse(self.orientation, np.array([0.0, 0.0, -1.0]))


class StateEstimator:
    def __init__(self, model: RobotModel, tilt_gain: float = TILT_GAIN):
        self.model = model
        self.tilt_gain = tilt_gain
        self.estimate = BaseEstimate()

    def update_orientation(self, imu: ImuSample, dt: float) -> BaseEstimate:
        if dt <= 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        est = self.estimate
        est.ang_vel_body = imu.gyro.copy()

        # gyro integration (body-frame increment)
        q = quat_mul(est.orientation, quat_from_rotvec(imu.gyro * dt))

        # accelerometer tilt correction, gated on |a| close to 1 g
        a_norm = np.linalg.norm(imu.accel)
        if abs(a_norm - GRAVITY) < ACCEL_GATE:
            g_meas = -imu.accel / a_norm                       # body frame
            g_est = quat_rotate_inverse(q, np.array([0.0, 0.0, -1.0]))
            axis = np.cross(g_est, g_meas)
            sin_a = np.linalg.norm(axis)
            if sin_a > 1e-12:
                angle = np.arctan2(sin_a, np.clip(g_est @ g_meas, -1.0, 1.0))
                q = quat_mul(q, quat_from_rotvec(axis / sin_a * self.tilt_gain * angle))

        est.orientation = q / np.linalg.norm(q)
        return est

    def update_velocity(self, q12, qd12, stance_flags,
                        imu: ImuSample = None, dt: float = 0.0) -> BaseEstimate:
        """Leg-odometry velocity over stance feet; with no stance feet the
        previous estimate decays by 0.99 plus accelerometer integration."""
        est = self.estimate
        q = np.asarray(q12, dtype=float).reshape(4, 3)
        qd = np.asarray(qd12, dtype=float).reshape(4, 3)
        stance = np.asarray(stance_flags, dtype=bool)
        est.contact_flags = stance.copy()

        vels = []
        for i, leg in enumerate(self.model.legs):
            if not stance[i]:
                continue
            fs = forward_kinematics(leg, q[i])
            p_foot = leg.hip_offset + fs.position              # body frame
            v_rel = fs.jacobian @ qd[i]
            vels.append(-(v_rel + np.cross(est.ang_vel_body, p_foot)))

        if vels:
            est.lin_vel_body = np.mean(vels, axis=0)
        else:
            est.lin_vel_body = NO_STANCE_DECAY * est.lin_vel_body
            if imu is not None and dt > 0:
                g_body = quat_rotate_inverse(est.orientation,
                                             np.array([0.0, 0.0, -GRAVITY]))
                est.lin_vel_body = est.lin_vel_body + (imu.accel + g_body) * dt
        return est


def imu_from_sim(state, prev_lin_vel, dt: float, rng=None,
                 gyro_noise: float = 0.0, accel_noise: float = 0.0) -> ImuSample:
    """Synthesize an IMU sample from two consecutive sim states."""
    R = quat_to_matrix(state.base_orientation)
    gyro = R.T @ state.base_ang_vel
    a_world = (state.base_lin_vel - prev_lin_vel) / dt
    accel = R.T @ (a_world - np.array([0.0, 0.0, -GRAVITY]))
    if rng is not None and (gyro_noise > 0 or accel_noise > 0):
        gyro = gyro + rng.normal(0.0, gyro_noise, 3)
        accel = accel + rng.normal(0.0, accel_noise, 3)
    return ImuSample(gyro=gyro, accel=accel, t=state.t)


def contacts_from_forces(normal_force, threshold: float = FORCE_CONTACT_THRESHOLD):
    return np.asarray(normal_force) > threshold
