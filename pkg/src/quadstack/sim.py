"""Desk-scale rigid-body quadruped simulator.

The base is a single rigid body (mass + principal inertia) under gravity
and foot contact wrenches. Legs are massless servos: each joint integrates
q_dd = (tau + J^T F_contact - b qd) / rotor_reflected_inertia. On-motor PD
runs in motor space exactly as the real servos would see it, and the
resulting torque passes through the parallel-link transmission with a
joint-side clamp at the published 60 N m peak.

Integration is semi-implicit Euler with trapezoidal position updates
(x += (v + v') dt / 2), which keeps ballistic flight exact and the free
flight energy drift far below 1e-3 J/s at dt = 1 ms. Terrain contact is a
penalty spring-damper along the surface normal with viscous tangential
friction clipped to the Coulomb cone. Everything is deterministic: no
ambient randomness, fixed iteration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kinematics import LegArray, Transmission, fk_legs
from .model import RobotModel
from .motor_bus import MotorCommand
from .rotations import (
    GRAVITY,
    IDENTITY_QUAT,
    quat_from_rotvec,
    quat_mul,
    quat_to_matrix,
)

DEFAULT_JOINT_DAMPING = 0.1  # N m s / rad, viscous


def _cross(a, b):
    """Cross product on trailing axis; avoids np.cross's wrapper overhead."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([ay * bz - az * by,
                     az * bx - ax * bz,
                     ax * by - ay * bx], axis=-1)


class SimulationDiverged(RuntimeError):
    """Non-finite state detected; carries the last valid state."""

    def __init__(self, last_valid_state):
        self.last_valid_state = last_valid_state
        super().__init__(f"simulation diverged at t={last_valid_state.t:.4f} s")


class TerrainError(ValueError):
    pass


@dataclass
class SimState:
    base_position: np.ndarray                  # (3,) m, world
    base_orientation: np.ndarray               # (4,) unit quaternion wxyz
    base_lin_vel: np.ndarray                   # (3,) m/s, world
    base_ang_vel: np.ndarray                   # (3,) rad/s, world
    q: np.ndarray                              # (12,) rad
    qd: np.ndarray                             # (12,) rad/s
    t: float = 0.0

    def copy(self) -> "SimState":
        return SimState(
            self.base_position.copy(), self.base_orientation.copy(),
            self.base_lin_vel.copy(), self.base_ang_vel.copy(),
            self.q.copy(), self.qd.copy(), self.t)


@dataclass
class Terrain:
    """Height field h(x, y), total and continuous within each face.

    Stairs ascend in +x with a flat apron before the first riser. Each riser
    is a steep `nosing` ramp ending exactly on the nominal step line, so
    h(k * run, y) = k * rise holds while contact normals stay finite.
    """

    kind: str                                  # flat | stairs | slope | heightfield
    rise: float = 0.0
    run: float = 0.0
    grade: float = 0.0
    grid: np.ndarray = None
    resolution: float = 0.0
    origin: tuple = (0.0, 0.0)
    friction_mu: float = 0.6
    nosing: float = 0.04                       # riser ramp width, m

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "flat":
            return np.zeros_like(x)
        if self.kind == "slope":
            return math.tan(self.grade) * x
        if self.kind == "stairs":
            return self._stairs_height(x)
        if self.kind == "heightfield":
            return self._interp(x, y)
        raise TerrainError(f"unknown terrain kind {self.kind!r}")

    def _stairs_height(self, x):
        k = np.maximum(np.floor(x / self.run), 0.0)
        frac = x - k * self.run
        ramp = np.clip((frac - (self.run - self.nosing)) / self.nosing, 0.0, 1.0)
        return self.rise * np.where(x < 0.0, 0.0, k + ramp)

    def _stairs_slope(self, x):
        k = np.maximum(np.floor(x / self.run), 0.0)
        frac = x - k * self.run
        on_ramp = (x >= 0.0) & (frac > self.run - self.nosing)
        return np.where(on_ramp, self.rise / self.nosing, 0.0)

    def normal(self, x, y):
        """Unit surface normal(s)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "slope":
            n = np.array([-math.tan(self.grade), 0.0, 1.0])
            n = n / np.linalg.norm(n)
            return np.broadcast_to(n, x.shape + (3,)).copy()
        if self.kind == "stairs":
            dzdx = self._stairs_slope(x)
            n = np.stack([-dzdx, np.zeros_like(dzdx), np.ones_like(dzdx)],
                         axis=-1)
            return n / np.sqrt(np.sum(n * n, axis=-1, keepdims=True))
        if self.kind == "heightfield":
            eps = max(self.resolution, 1e-3)
            dzdx = (self._interp(x + eps, y) - self._interp(x - eps, y)) / (2 * eps)
            dzdy = (self._interp(x, y + eps) - self._interp(x, y - eps)) / (2 * eps)
            n = np.stack([-dzdx, -dzdy, np.ones_like(dzdx)], axis=-1)
            return n / np.linalg.norm(n, axis=-1, keepdims=True)
        n = np.zeros(x.shape + (3,))
        n[..., 2] = 1.0
        return n

    def _interp(self, x, y):
        g = self.grid
        i = (np.asarray(x) - self.origin[0]) / self.resolution
        j = (np.asarray(y) - self.origin[1]) / self.resolution
        i0 = np.clip(np.floor(i).astype(int), 0, g.shape[0] - 2)
        j0 = np.clip(np.floor(j).astype(int), 0, g.shape[1] - 2)
        fi = np.clip(i - i0, 0.0, 1.0)
        fj = np.clip(j - j0, 0.0, 1.0)
        return ((1 - fi) * (1 - fj) * g[i0, j0] + fi * (1 - fj) * g[i0 + 1, j0]
                + (1 - fi) * fj * g[i0, j0 + 1] + fi * fj * g[i0 + 1, j0 + 1])


def make_terrain(kind: str, friction_mu: float = 0.6, **params) -> Terrain:
    if kind == "flat":
        return Terrain(kind="flat", friction_mu=friction_mu)
    if kind == "stairs":
        rise = params.get("rise", 0.17)
        run = params.get("run", 0.29)
        if rise <= 0 or run <= 0:
            raise TerrainError(f"stairs need rise > 0 and run > 0, got {rise}, {run}")
        return Terrain(kind="stairs", rise=rise, run=run, friction_mu=friction_mu)
    if kind == "slope":
        grade = params["grade"]
        if not -math.pi / 2 < grade < math.pi / 2:
            raise TerrainError(f"slope grade must be in (-pi/2, pi/2), got {grade}")
        return Terrain(kind="slope", grade=grade, friction_mu=friction_mu)
    if kind == "heightfield":
        grid = np.asarray(params["grid"], dtype=float)
        if grid.ndim != 2 or grid.shape[0] < 2 or grid.shape[1] < 2:
            raise TerrainError("heightfield grid must be at least 2x2")
        return Terrain(kind="heightfield", grid=grid,
                       resolution=float(params["resolution"]),
                       origin=tuple(params.get("origin", (0.0, 0.0))),
                       friction_mu=friction_mu)
    raise TerrainError(f"unknown terrain kind {kind!r}")


@dataclass
class ContactModel:
    k_n: float = 5000.0    # N/m normal stiffness
    c_n: float = 200.0     # N s/m normal damping
    mu: float = 0.6        # Coulomb friction coefficient
    c_t: float = 200.0     # N s/m tangential (viscous, clipped to the cone)

    def __post_init__(self):
        if self.k_n < 0 or self.c_n < 0 or self.mu < 0 or self.c_t < 0:
            raise ValueError("contact parameters must be non-negative")


@dataclass
class StepInfo:
    """Per-step diagnostics alongside the new state."""

    joint_torque: np.ndarray        # (12,) N m actually applied
    contact_forces: np.ndarray      # (4, 3) N world, on each foot
    normal_force: np.ndarray        # (4,) N along the surface normal
    foot_positions: np.ndarray      # (4, 3) m world
    belly_normal_force: np.ndarray = None  # (4,) N on the body contact pads


def default_commands() -> list:
    return [MotorCommand() for _ in range(12)]


def pack_commands(motor_cmds) -> np.ndarray:
    """(5, 12) array [p_des, v_des, kp, kd, tau_ff]; the sim hot loop takes
    this directly so unchanged commands are not re-packed every substep."""
    if isinstance(motor_cmds, np.ndarray):
        return motor_cmds
    return np.array([
        [c.p_des for c in motor_cmds],
        [c.v_des for c in motor_cmds],
        [c.kp for c in motor_cmds],
        [c.kd for c in motor_cmds],
        [c.tau_ff for c in motor_cmds],
    ])


def step(state: SimState, motor_cmds, model: RobotModel, terrain: Terrain,
         dt: float, contact: ContactModel = None,
         joint_damping: float = DEFAULT_JOINT_DAMPING,
         transmission: Transmission = None) -> SimState:
    """Advance one time step; see step_detailed for diagnostics."""
    return step_detailed(state, motor_cmds, model, terrain, dt, contact,
                         joint_damping, transmission)[0]


def step_detailed(state: SimState, motor_cmds, model: RobotModel,
                  terrain: Terrain, dt: float, contact: ContactModel = None,
                  joint_damping: float = DEFAULT_JOINT_DAMPING,
                  transmission: Transmission = None):
    if not 0.0 < dt <= 2e-3:
        raise ValueError(f"dt must be in (0, 2 ms], got {dt}")
    if contact is None:
        contact = ContactModel(mu=terrain.friction_mu)
    if transmission is None:
        transmission = _DEFAULT_TRANSMISSION

    m = model.total_mass
    inertia = model.body_inertia
    peak = model.motor.torque_peak

    q = state.q.reshape(4, 3)
    qd = state.qd.reshape(4, 3)

    # --- on-motor PD in motor space, clamped at peak torque ---
    packed = pack_commands(motor_cmds)
    p_des = packed[0].reshape(4, 3)
    v_des = packed[1].reshape(4, 3)
    kp = packed[2].reshape(4, 3)
    kd = packed[3].reshape(4, 3)
    tau_ff = packed[4].reshape(4, 3)

    qm = transmission.joint_to_motor(q)
    qdm = transmission.joint_to_motor(qd)
    tau_motor = np.clip(kp * (p_des - qm) + kd * (v_des - qdm) + tau_ff,
                        -peak, peak)
    # joint-side clamp keeps every applied joint torque within the 60 N m
    # rating even where the linkage sums two motor torques onto one joint
    tau_joint = np.clip(transmission.motor_torque_to_joint(tau_motor), -peak, peak)

    # --- leg kinematics ---
    R = quat_to_matrix(state.base_orientation)
    legs = _leg_array(model)
    leg_pos, jac = fk_legs(legs, q)
    foot_local = legs.hip_offsets + leg_pos           # base frame

    arm_world = foot_local @ R.T                      # from COM to foot
    foot_world = state.base_position + arm_world
    foot_rel_vel = np.einsum("lij,lj->li", jac, qd)   # in base axes
    foot_vel = (state.base_lin_vel
                + _cross(state.base_ang_vel, arm_world)
                + foot_rel_vel @ R.T)

    f_n, forces = _contact_forces(terrain, contact, foot_world, foot_vel)

    # body contact pads on the belly keep a collapsed robot from sinking
    # through the ground (the real frame rests on TPU pads)
    belly_arm = _belly_points(model) @ R.T
    belly_world = state.base_position + belly_arm
    belly_vel = state.base_lin_vel + _cross(state.base_ang_vel, belly_arm)
    belly_f_n, belly_forces = _contact_forces(terrain, contact, belly_world,
                                              belly_vel)

    # --- base dynamics ---
    total_force = (forces.sum(axis=0) + belly_forces.sum(axis=0)
                   + np.array([0.0, 0.0, -m * GRAVITY]))
    total_torque = (_cross(arm_world, forces).sum(axis=0)
                    + _cross(belly_arm, belly_forces).sum(axis=0))

    lin_acc = total_force / m
    new_lin_vel = state.base_lin_vel + lin_acc * dt
    new_pos = state.base_position + 0.5 * (state.base_lin_vel + new_lin_vel) * dt

    omega_body = R.T @ state.base_ang_vel
    torque_body = R.T @ total_torque
    omega_dot = (torque_body - _cross(omega_body, inertia * omega_body)) / inertia
    omega_body = omega_body + omega_dot * dt
    new_ang_vel = R @ omega_body

    dq = quat_from_rotvec(new_ang_vel * dt)
    new_quat = quat_mul(dq, state.base_orientation)
    new_quat = new_quat / math.sqrt(float(new_quat @ new_quat))

    # --- joint dynamics: massless legs with reflected rotor inertia ---
    forces_base = forces @ R                          # world -> base axes
    tau_contact = np.einsum("lji,lj->li", jac, forces_base)
    qdd = (tau_joint + tau_contact - joint_damping * qd) \
        / model.motor.rotor_reflected_inertia
    new_qd = qd + qdd * dt
    new_q = q + new_qd * dt

    # hard stops at the joint limits
    below = new_q < legs.limits_lo
    above = new_q > legs.limits_hi
    new_q = np.clip(new_q, legs.limits_lo, legs.limits_hi)
    new_qd = np.where(below | above, 0.0, new_qd)

    new_state = SimState(
        base_position=new_pos,
        base_orientation=new_quat,
        base_lin_vel=new_lin_vel,
        base_ang_vel=new_ang_vel,
        q=new_q.reshape(12),
        qd=new_qd.reshape(12),
        t=state.t + dt,
    )

    # one-pass NaN/inf guard: non-finite values poison the checksum
    checksum = (new_pos.sum() + new_quat.sum() + new_lin_vel.sum()
                + new_ang_vel.sum() + new_q.sum() + new_qd.sum())
    if not math.isfinite(checksum):
        raise SimulationDiverged(state)

    info = StepInfo(joint_torque=tau_joint.reshape(12).copy(),
                    contact_forces=forces,
                    normal_force=f_n,
                    foot_positions=foot_world,
                    belly_normal_force=belly_f_n)
    return new_state, info


def _contact_forces(terrain, contact, points_world, vels_world):
    """Penalty contact at each point: returns (normal magnitudes, forces)."""
    h = terrain.height(points_world[:, 0], points_world[:, 1])
    n = terrain.normal(points_world[:, 0], points_world[:, 1])
    pen = h - points_world[:, 2]                      # vertical penetration
    active = pen > 0.0

    depth = np.where(active, pen * n[:, 2], 0.0)      # along-normal depth
    v_n = np.einsum("li,li->l", vels_world, n)
    f_n = np.where(active,
                   np.maximum(contact.k_n * depth - contact.c_n * v_n, 0.0),
                   0.0)

    v_t = vels_world - v_n[:, None] * n
    f_t = -contact.c_t * v_t * active[:, None]
    f_t_mag = np.sqrt(np.einsum("li,li->l", f_t, f_t))
    cap = contact.mu * f_n
    scale = np.where(f_t_mag > cap, np.divide(cap, f_t_mag,
                                              out=np.ones_like(cap),
                                              where=f_t_mag > 0), 1.0)
    f_t = f_t * scale[:, None]

    # invariant guards, written so NaNs fall through to the divergence check
    assert not (f_n < 0.0).any(), "normal contact force went negative"
    assert not (f_t_mag * scale > cap + 1e-9).any(), \
        "tangential force left the friction cone"
    return f_n, f_n[:, None] * n + f_t


def _belly_points(model) -> np.ndarray:
    pts = getattr(model, "_belly_points", None)
    if pts is None:
        L, W, H = model.body_dims
        x, y, z = 0.4 * L, 0.4 * W, -0.5 * H
        pts = np.array([[x, y, z], [x, -y, z], [-x, y, z], [-x, -y, z]])
        model._belly_points = pts
    return pts


def _leg_array(model) -> LegArray:
    arr = getattr(model, "_leg_array", None)
    if arr is None:
        arr = LegArray(model)
        model._leg_array = arr
    return arr


_DEFAULT_TRANSMISSION = Transmission()


def initial_state(model: RobotModel, terrain: Terrain = None,
                  xy=(0.0, 0.0), height_offset: float = 0.0,
                  pose=None) -> SimState:
    """Robot at rest, feet at the (default) pose, base over xy."""
    if pose is None:
        pose = model.default_joint_pose
    pose = np.asarray(pose, dtype=float)
    ground = 0.0
    if terrain is not None:
        ground = float(terrain.height(np.array(xy[0]), np.array(xy[1])))
    z = ground + model.standing_height + height_offset
    return SimState(
        base_position=np.array([xy[0], xy[1], z]),
        base_orientation=IDENTITY_QUAT.copy(),
        base_lin_vel=np.zeros(3),
        base_ang_vel=np.zeros(3),
        q=pose.copy(),
        qd=np.zeros(12),
        t=0.0,
    )


def kinetic_energy(state: SimState, model: RobotModel) -> float:
    R = quat_to_matrix(state.base_orientation)
    w = R.T @ state.base_ang_vel
    return float(0.5 * model.total_mass * state.base_lin_vel @ state.base_lin_vel
                 + 0.5 * w @ (model.body_inertia * w))


def drop_test(model: RobotModel, height: float, terrain: Terrain = None,
              dt: float = 1e-3, kp: float = 60.0, kd: float = 3.0,
              max_time: float = 5.0, contact: ContactModel = None) -> SimState:
    """Drop from `height` above the standing pose onto the terrain.

    Joints hold the default pose softly (low kp, damped) so the robot lands
    on its feet and sags. Runs until kinetic energy < 0.01 J or max_time.
    """
    if height < 0:
        raise ValueError(f"drop height must be >= 0, got {height}")
    if terrain is None:
        terrain = make_terrain("flat")
    state = initial_state(model, terrain, height_offset=height)
    q_motor = _DEFAULT_TRANSMISSION.joint_to_motor(
        model.default_joint_pose.reshape(4, 3)).reshape(12)
    cmds = pack_commands([MotorCommand(p_des=float(p), kp=kp, kd=kd)
                          for p in q_motor])
    steps = int(round(max_time / dt))
    for _ in range(steps):
        state = step(state, cmds, model, terrain, dt, contact=contact)
        if state.t > 0.1 and kinetic_energy(state, model) < 0.01:
            break
    return state
