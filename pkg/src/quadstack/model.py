"""Robot physical parameterization, loaded from a YAML config.

Every other module takes a RobotModel and never hard-codes physics
numbers. Leg order everywhere in the stack is FL, FR, RL, RR with
(roll, pitch, knee) per leg -> 12 joints total.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np
import yaml

from .rotations import Transform, quat_from_rpy

LEG_NAMES = ("fl", "fr", "rl", "rr")
JOINT_NAMES = ("roll", "pitch", "knee")
NUM_JOINTS = 12

SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Malformed or invalid robot configuration."""


@dataclass
class LegGeometry:
    name: str
    side_sign: int                 # +1 left, -1 right
    hip_offset: np.ndarray         # (3,) m from base origin
    abad_link: float               # lateral offset d, m
    thigh_len: float               # L1, m
    calf_len: float                # L2, m
    joint_limits: np.ndarray       # (3, 2) rad, [min, max] per joint

    def __post_init__(self):
        self.hip_offset = np.asarray(self.hip_offset, dtype=float)
        self.joint_limits = np.asarray(self.joint_limits, dtype=float)

    @property
    def max_reach(self) -> float:
        return self.abad_link + self.thigh_len + self.calf_len


@dataclass
class MotorParams:
    torque_continuous: float       # N m
    torque_peak: float             # N m
    max_velocity: float            # rad/s
    kp_range: tuple                # (0, max) N m / rad
    kd_range: tuple                # (0, max) N m s / rad
    rotor_reflected_inertia: float  # kg m^2


@dataclass
class RobotModel:
    total_mass: float              # kg
    body_dims: np.ndarray          # (3,) m
    body_inertia: np.ndarray       # (3,) principal moments, kg m^2
    legs: list                     # 4 x LegGeometry, FL FR RL RR
    motor: MotorParams
    default_joint_pose: np.ndarray  # (12,) rad
    sensor_extrinsics: list        # 2 x Transform, LiDAR in base frame
    imu_extrinsic: Transform
    control_rates: dict            # policy_hz, sim_hz, telemetry_hz
    schema_version: int = SCHEMA_VERSION
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.body_dims = np.asarray(self.body_dims, dtype=float)
        self.body_inertia = np.asarray(self.body_inertia, dtype=float)
        self.default_joint_pose = np.asarray(self.default_joint_pose, dtype=float)

    @property
    def standing_height(self) -> float:
        """Base height above flat ground with feet at the default pose."""
        q = self.default_joint_pose.reshape(4, 3)
        leg = self.legs[0]
        return float(np.mean(
            leg.thigh_len * np.cos(q[:, 1]) + leg.calf_len * np.cos(q[:, 1] + q[:, 2])
        ))

    def joint_limits(self) -> np.ndarray:
        """(12, 2) stacked per-joint limits in leg order."""
        return np.vstack([leg.joint_limits for leg in self.legs])


def _require(mapping, key, where):
    if key not in mapping:
        raise ConfigError(f"missing required key '{where}.{key}'")
    return mapping[key]


def load_model(config_text: str) -> RobotModel:
    """Parse and validate a YAML robot config; raises ConfigError."""
    try:
        doc = yaml.safe_load(config_text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config does not parse: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")

    version = _require(doc, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")

    robot = _require(doc, "robot", "")
    geo = _require(doc, "leg_geometry", "")
    limits_cfg = _require(geo, "joint_limits", "leg_geometry")
    limits = np.array([
        _require(limits_cfg, j, "leg_geometry.joint_limits") for j in JOINT_NAMES
    ], dtype=float)

    legs_cfg = _require(doc, "legs", "")
    pose_cfg = _require(doc, "default_joint_pose", "")
    legs = []
    pose = []
    for name in LEG_NAMES:
        leg = _require(legs_cfg, name, "legs")
        legs.append(LegGeometry(
            name=name,
            side_sign=int(_require(leg, "side_sign", f"legs.{name}")),
            hip_offset=_require(leg, "hip_offset", f"legs.{name}"),
            abad_link=float(_require(geo, "abad_link", "leg_geometry")),
            thigh_len=float(_require(geo, "thigh_len", "leg_geometry")),
            calf_len=float(_require(geo, "calf_len", "leg_geometry")),
            joint_limits=limits,
        ))
        pose.extend(_require(pose_cfg, name, "default_joint_pose"))

    motor_cfg = _require(doc, "motor", "")
    motor = MotorParams(
        torque_continuous=float(_require(motor_cfg, "torque_continuous", "motor")),
        torque_peak=float(_require(motor_cfg, "torque_peak", "motor")),
        max_velocity=float(_require(motor_cfg, "max_velocity", "motor")),
        kp_range=(0.0, float(_require(motor_cfg, "kp_max", "motor"))),
        kd_range=(0.0, float(_require(motor_cfg, "kd_max", "motor"))),
        rotor_reflected_inertia=float(
            _require(motor_cfg, "rotor_reflected_inertia", "motor")),
    )

    sensors = _require(doc, "sensors", "")
    lidars = _require(sensors, "lidars", "sensors")
    extrinsics = [
        Transform(np.asarray(l["position"], dtype=float),
                  quat_from_rpy(*l.get("rpy", (0.0, 0.0, 0.0))))
        for l in lidars
    ]
    imu_cfg = sensors.get("imu", {})
    imu = Transform(np.asarray(imu_cfg.get("position", (0, 0, 0)), dtype=float),
                    quat_from_rpy(*imu_cfg.get("rpy", (0.0, 0.0, 0.0))))

    model = RobotModel(
        total_mass=float(_require(robot, "total_mass", "robot")),
        body_dims=_require(robot, "body_dims", "robot"),
        body_inertia=_require(robot, "body_inertia", "robot"),
        legs=legs,
        motor=motor,
        default_joint_pose=np.asarray(pose, dtype=float),
        sensor_extrinsics=extrinsics,
        imu_extrinsic=imu,
        control_rates=dict(_require(doc, "control_rates", "")),
        schema_version=version,
        raw=doc,
    )

    violations = validate(model)
    if violations:
        raise ConfigError("invalid config: " + "; ".join(violations))
    return model


def load_model_file(path) -> RobotModel:
    with open(path, "r", encoding="utf-8") as f:
        return load_model(f.read())


def reference_model() -> RobotModel:
    """The packaged reference configuration."""
    text = (importlib.resources.files("quadstack") / "configs" / "reference.yaml") \
        .read_text(encoding="utf-8")
    return load_model(text)


def reference_config_text() -> str:
    return (importlib.resources.files("quadstack") / "configs" / "reference.yaml") \
        .read_text(encoding="utf-8")


def validate(model: RobotModel) -> list:
    """Collect invariant violations; empty list means the model is valid."""
    v = []
    if not model.total_mass > 0:
        v.append(f"total_mass must be > 0, got {model.total_mass}")
    if not np.all(model.body_inertia > 0):
        v.append(f"body_inertia moments must be > 0, got {model.body_inertia}")
    if len(model.legs) != 4:
        v.append(f"expected 4 legs, got {len(model.legs)}")
    njoints = 3 * len(model.legs)
    if njoints != NUM_JOINTS or model.default_joint_pose.shape != (NUM_JOINTS,):
        v.append(f"expected {NUM_JOINTS} joints, got "
                 f"{model.default_joint_pose.size} pose entries for {njoints} joints")

    for leg in model.legs:
        if leg.thigh_len <= 0:
            v.append(f"legs.{leg.name}.thigh_len must be > 0, got {leg.thigh_len}")
        if leg.calf_len <= 0:
            v.append(f"legs.{leg.name}.calf_len must be > 0, got {leg.calf_len}")
        if leg.side_sign not in (-1, 1):
            v.append(f"legs.{leg.name}.side_sign must be +1 or -1")
        for j, jname in enumerate(JOINT_NAMES):
            lo, hi = leg.joint_limits[j]
            if not lo < hi:
                v.append(f"legs.{leg.name} joint_limits.{jname}: min {lo} !< max {hi}")

    m = model.motor
    if not (0 < m.torque_continuous <= m.torque_peak):
        v.append("motor torque: need 0 < torque_continuous <= torque_peak, "
                 f"got ({m.torque_continuous}, {m.torque_peak})")

    if model.default_joint_pose.shape == (NUM_JOINTS,) and len(model.legs) == 4:
        pose = model.default_joint_pose.reshape(4, 3)
        for i, leg in enumerate(model.legs):
            for j, jname in enumerate(JOINT_NAMES):
                lo, hi = leg.joint_limits[j]
                if not (lo <= pose[i, j] <= hi):
                    v.append(f"default_joint_pose joint {3 * i + j} "
                             f"({leg.name}.{jname}) = {pose[i, j]} outside "
                             f"[{lo}, {hi}]")

    if len(model.sensor_extrinsics) != 2:
        v.append(f"expected 2 lidar extrinsics, got {len(model.sensor_extrinsics)}")
    for key in ("policy_hz", "sim_hz", "telemetry_hz"):
        if key not in model.control_rates or model.control_rates[key] <= 0:
            v.append(f"control_rates.{key} missing or not positive")
    return v


def serialize(model: RobotModel) -> str:
    """YAML text that load_model parses back to an identical model."""
    doc = {
        "schema_version": model.schema_version,
        "robot": {
            "total_mass": model.total_mass,
            "body_dims": model.body_dims.tolist(),
            "body_inertia": model.body_inertia.tolist(),
        },
        "default_joint_pose": {
            name: model.default_joint_pose[3 * i:3 * i + 3].tolist()
            for i, name in enumerate(LEG_NAMES)
        },
        "legs": {
            leg.name: {"side_sign": leg.side_sign,
                       "hip_offset": leg.hip_offset.tolist()}
            for leg in model.legs
        },
        "leg_geometry": {
            "abad_link": model.legs[0].abad_link,
            "thigh_len": model.legs[0].thigh_len,
            "calf_len": model.legs[0].calf_len,
            "joint_limits": {
                jname: model.legs[0].joint_limits[j].tolist()
                for j, jname in enumerate(JOINT_NAMES)
            },
        },
        "motor": {
            "torque_continuous": model.motor.torque_continuous,
            "torque_peak": model.motor.torque_peak,
            "max_velocity": model.motor.max_velocity,
            "kp_max": model.motor.kp_range[1],
            "kd_max": model.motor.kd_range[1],
            "rotor_reflected_inertia": model.motor.rotor_reflected_inertia,
        },
        "sensors": {
            "lidars": [
                {"position": t.translation.tolist(),
                 "rpy": _rpy_list(t)} for t in model.sensor_extrinsics
            ],
            "imu": {"position": model.imu_extrinsic.translation.tolist(),
                    "rpy": _rpy_list(model.imu_extrinsic)},
        },
        "control_rates": model.control_rates,
    }
    return yaml.safe_dump(doc, sort_keys=False)


def _rpy_list(t: Transform):
    from .rotations import quat_to_rpy
    return [float(a) for a in quat_to_rpy(t.rotation)]
