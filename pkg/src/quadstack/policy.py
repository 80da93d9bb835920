"""Policy loading, observation assembly, inference, and the scripted trot.

Policy files are portable: a single-line JSON header describing the MLP
(layer shapes, activations, scales) followed by a flat little-endian
float32 blob holding, per layer, the row-major weight matrix then the
bias. A scripted diagonal-pair trot provides a policy-free gait so the
whole stack runs without trained weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import Transmission, inverse_kinematics
from .model import RobotModel
from .motor_bus import MotorCommand

OBS_DIM = 45
ACT_DIM = 12

DEFAULT_OBS_SCALES = {
    "ang_vel": 0.25,
    "commands": [2.0, 2.0, 0.25],
    "dof_pos": 1.0,
    "dof_vel": 0.05,
}

ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "elu": lambda x: np.where(x > 0.0, x, np.expm1(x)),
    "tanh": np.tanh,
    "identity": lambda x: x,
}


class PolicyError(ValueError):
    pass


@dataclass
class Layer:
    weights: np.ndarray   # (rows, cols)
    bias: np.ndarray      # (rows,)
    activation: str

    @property
    def rows(self):
        return self.weights.shape[0]

    @property
    def cols(self):
        return self.weights.shape[1]


@dataclass
class PolicySpec:
    layers: list
    obs_dim: int = OBS_DIM
    act_dim: int = ACT_DIM
    obs_scales: dict = field(default_factory=lambda: dict(DEFAULT_OBS_SCALES))
    action_scale: float = 0.25     # rad per unit action
    action_clip: float = 100.0
    default_pose: np.ndarray = None  # (12,) rad, joint space

    def __post_init__(self):
        if self.default_pose is not None:
            self.default_pose = np.asarray(self.default_pose, dtype=float)


def validate_shapes(layers, obs_dim, act_dim):
    prev = obs_dim
    for i, layer in enumerate(layers):
        if layer.activation not in ACTIVATIONS:
            raise PolicyError(f"layer {i}: unknown activation {layer.activation!r}")
        if layer.cols != prev:
            raise PolicyError(
                f"layer {i}: expects input {layer.cols}, previous produces {prev}")
        if layer.bias.shape != (layer.rows,):
            raise PolicyError(f"layer {i}: bias shape {layer.bias.shape} "
                              f"does not match {layer.rows} rows")
        prev = layer.rows
    if prev != act_dim:
        raise PolicyError(f"last layer produces {prev}, act_dim is {act_dim}")


def save_policy(spec: PolicySpec, path):
    header = {
        "format": "quadstack-policy",
        "version": 1,
        "obs_dim": spec.obs_dim,
        "act_dim": spec.act_dim,
        "layers": [{"rows": l.rows, "cols": l.cols, "activation": l.activation}
                   for l in spec.layers],
        "obs_scales": spec.obs_scales,
        "action_scale": spec.action_scale,
        "action_clip": spec.action_clip,
        "default_pose": (spec.default_pose.tolist()
                         if spec.default_pose is not None else None),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        for layer in spec.layers:
            f.write(np.asarray(layer.weights, dtype="<f4").tobytes())
            f.write(np.asarray(layer.bias, dtype="<f4").tobytes())


def load_policy(path) -> PolicySpec:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PolicyError(f"policy header does not parse: {e}") from e
    if header.get("format") != "quadstack-policy":
        raise PolicyError("not a policy file (missing format marker)")

    layers = []
    offset = 0
    floats = np.frombuffer(blob, dtype="<f4")
    for i, ldesc in enumerate(header["layers"]):
        rows, cols = int(ldesc["rows"]), int(ldesc["cols"])
        need = rows * cols + rows
        if offset + need > floats.size:
            raise PolicyError(
                f"layer {i}: weight blob too short "
                f"(need {need} floats at offset {offset}, have {floats.size})")
        w = floats[offset:offset + rows * cols].reshape(rows, cols).astype(float)
        b = floats[offset + rows * cols:offset + need].astype(float)
        offset += need
        layers.append(Layer(weights=w, bias=b, activation=ldesc["activation"]))
    if offset != floats.size:
        raise PolicyError(f"trailing {floats.size - offset} floats in weight blob")

    spec = PolicySpec(
        layers=layers,
        obs_dim=int(header["obs_dim"]),
        act_dim=int(header["act_dim"]),
        obs_scales=header.get("obs_scales", dict(DEFAULT_OBS_SCALES)),
        action_scale=float(header.get("action_scale", 0.25)),
        action_clip=float(header.get("action_clip", 100.0)),
        default_pose=header.get("default_pose"),
    )
    validate_shapes(spec.layers, spec.obs_dim, spec.act_dim)
    return spec


def infer(policy: PolicySpec, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (policy.obs_dim,):
        raise PolicyError(f"observation has shape {obs.shape}, "
                          f"expected ({policy.obs_dim},)")
    x = obs
    for layer in policy.layers:
        x = ACTIVATIONS[layer.activation](layer.weights @ x + layer.bias)
    return np.clip(x, -policy.action_clip, policy.action_clip)


def assemble_observation(ang_vel_body, proj_gravity, commands, q, qd,
                         prev_action, default_pose,
                         scales=None) -> np.ndarray:
    """45-dim observation, fixed block order and scaling."""
    s = scales if scales is not None else DEFAULT_OBS_SCALES
    cmd_scale = np.asarray(s["commands"], dtype=float)
    obs = np.concatenate([
        np.asarray(ang_vel_body, dtype=float) * s["ang_vel"],
        np.asarray(proj_gravity, dtype=float),
        np.asarray(commands, dtype=float) * cmd_scale,
        (np.asarray(q, dtype=float) - np.asarray(default_pose, dtype=float))
        * s["dof_pos"],
        np.asarray(qd, dtype=float) * s["dof_vel"],
        np.asarray(prev_action, dtype=float),
    ])
    if obs.shape != (OBS_DIM,):
        raise PolicyError(f"assembled observation has {obs.size} entries")
    return obs


@dataclass
class ControlGains:
    kp: float = 60.0   # N m / rad
    kd: float = 2.0    # N m s / rad


def action_to_targets(action, policy: PolicySpec, model: RobotModel,
                      gains: ControlGains = None,
                      transmission: Transmission = None) -> list:
    """Joint targets default_pose + action_scale * action, clamped to the
    joint limits, emitted as motor-space PD commands."""
    gains = gains or ControlGains()
    transmission = transmission or _TRANSMISSION
    action = np.asarray(action, dtype=float)
    default = (policy.default_pose if policy is not None
               and policy.default_pose is not None else model.default_joint_pose)
    scale = policy.action_scale if policy is not None else 0.25

    target_joint = default + scale * action
    limits = model.joint_limits()
    target_joint = np.clip(target_joint, limits[:, 0], limits[:, 1])
    target_motor = transmission.joint_to_motor(target_joint.reshape(4, 3)).reshape(12)

    kp = min(max(gains.kp, model.motor.kp_range[0]), model.motor.kp_range[1])
    kd = min(max(gains.kd, model.motor.kd_range[0]), model.motor.kd_range[1])
    return [MotorCommand(p_des=float(p), v_des=0.0, kp=kp, kd=kd, tau_ff=0.0)
            for p in target_motor]


# --- scripted trot -----------------------------------------------------------

TROT_PERIOD = 0.6       # s
TROT_DUTY = 0.55        # stance fraction
SWING_APEX = 0.06       # m
LEG_PHASE = (0.0, 0.5, 0.5, 0.0)   # FL, FR, RL, RR: diagonal pairs in phase
MAX_CMD_VX = 0.6        # m/s
TROT_HEIGHT_FACTOR = 0.92   # trot slightly crouched for control authority
STANCE_DEPTH_BIAS = 0.05    # m; stance presses deeper than nominal so the
                            # body rides at height despite PD sag under load


def trot_phases(t: float):
    """Per-leg gait phase in [0, 1) and stance flags at time t."""
    phases = np.array([(t / TROT_PERIOD + off) % 1.0 for off in LEG_PHASE])
    return phases, phases < TROT_DUTY


def scripted_trot(t: float, cmd, model: RobotModel,
                  gains: ControlGains = None,
                  transmission: Transmission = None) -> list:
    """Diagonal-pair trot with Raibert-style foot placement.

    cmd is (vx, vy, wz); foot targets are solved per leg with the
    closed-form IK and emitted as motor-space PD commands.
    """
    gains = gains or ControlGains()
    transmission = transmission or _TRANSMISSION
    vx = float(np.clip(cmd[0], -MAX_CMD_VX, MAX_CMD_VX))
    vy = float(np.clip(cmd[1], -0.4, 0.4))
    wz = float(np.clip(cmd[2], -0.8, 0.8))

    h_stand = TROT_HEIGHT_FACTOR * model.standing_height
    t_stance = TROT_DUTY * TROT_PERIOD
    phases, stance = trot_phases(t)

    target_joint = np.empty((4, 3))
    for i, leg in enumerate(model.legs):
        # commanded velocity at this hip (adds the yaw-rate tangential term)
        hip = leg.hip_offset
        v_leg = np.array([vx - wz * hip[1], vy + wz * hip[0]])
        stroke = v_leg * t_stance                      # ground sweep per stance

        phase = phases[i]
        if stance[i]:
            s = phase / TROT_DUTY
            xy = stroke * (0.5 - s)                    # front to back, linear
            lift = 0.0
        else:
            s = (phase - TROT_DUTY) / (1.0 - TROT_DUTY)
            xy = stroke * (-0.5 + _smooth(s))          # recirculate forward
            lift = (STANCE_DEPTH_BIAS + SWING_APEX) * math.sin(math.pi * s)

        target = np.array([
            xy[0],
            leg.side_sign * leg.abad_link + xy[1],
            -h_stand - STANCE_DEPTH_BIAS + lift,
        ])
        target_joint[i] = inverse_kinematics(leg, target)

    limits = model.joint_limits().reshape(4, 3, 2)
    target_joint = np.clip(target_joint, limits[:, :, 0], limits[:, :, 1])
    target_motor = transmission.joint_to_motor(target_joint).reshape(12)

    kp = min(max(gains.kp, model.motor.kp_range[0]), model.motor.kp_range[1])
    kd = min(max(gains.kd, model.motor.kd_range[0]), model.motor.kd_range[1])
    return [MotorCommand(p_des=float(p), v_des=0.0, kp=kp, kd=kd, tau_ff=0.0)
            for p in target_motor]


def _smooth(s: float) -> float:
    """Cubic ease 3s^2 - 2s^3 on [0, 1]."""
    return s * s * (3.0 - 2.0 * s)


_TRANSMISSION = Transmission()
