"""quadstack: a desk-scale quadruped control and simulation stack.

Library-first: robot model and kinematics, a bit-exact motor bus codec, a
rigid-body simulator, state estimation, elevation mapping, a policy
runtime with a scripted-trot fallback, a supervisory state machine, and a
telemetry gateway for teleoperation consoles.
"""

from .model import (
    LegGeometry,
    MotorParams,
    RobotModel,
    load_model,
    load_model_file,
    reference_model,
    serialize,
    validate,
)
from .kinematics import (
    FootState,
    Transmission,
    UnreachableTargetError,
    forward_kinematics,
    inverse_kinematics,
    joint_to_motor,
    joint_torque_map,
    motor_to_joint,
)
from .motor_bus import (
    BusFrame,
    MotorCommand,
    MotorFeedback,
    VirtualBus,
    decode_command,
    decode_feedback,
    encode_command,
    encode_feedback,
)
from .sim import (
    ContactModel,
    SimState,
    SimulationDiverged,
    Terrain,
    drop_test,
    initial_state,
    make_terrain,
    step,
    step_detailed,
)
from .estimator import BaseEstimate, ImuSample, StateEstimator
from .policy import (
    PolicySpec,
    action_to_targets,
    assemble_observation,
    infer,
    load_policy,
    save_policy,
    scripted_trot,
)
from .mapping import (
    ElevationGrid,
    PointCloud,
    grid_from_message,
    grid_to_message,
    simulate_lidar,
)
from .supervisor import Mode, Supervisor
from .gateway import TelemetryClient, TelemetryServer
from .runtime import SimRunner

__version__ = "0.1.0"
