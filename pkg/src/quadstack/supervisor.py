"""Control-mode state machine and the 50 Hz command loop.

Mode graph (requests): IDLE <-> STANDUP, STAND <-> WALK_POLICY /
WALK_SCRIPTED, DAMP -> IDLE, any -> DAMP, any -> ESTOP. Automatic edges:
STANDUP -> STAND when the ramp completes, and {STAND, WALK_*} -> DAMP when
the operator heartbeat goes stale (watchdog). ESTOP latches; only an
explicit reset returns to IDLE.

The wireless e-stop hardware is modeled as this heartbeat watchdog plus
the latched ESTOP mode. The supervisor never requests feedforward torque.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .kinematics import Transmission
from .model import RobotModel
from .motor_bus import MotorCommand
from .policy import (
    ControlGains,
    PolicySpec,
    action_to_targets,
    assemble_observation,
    infer,
    scripted_trot,
    trot_phases,
)

HEARTBEAT_TIMEOUT = 0.2    # s
STANDUP_DURATION = 2.0     # s
DAMP_KD = 3.0              # N m s / rad
CMD_VEL_LIMITS = np.array([0.6, 0.4, 0.8])  # vx, vy, wz


class Mode(enum.Enum):
    IDLE = "idle"
    STANDUP = "standup"
    STAND = "stand"
    WALK_POLICY = "walk_policy"
    WALK_SCRIPTED = "walk_scripted"
    DAMP = "damp"
    ESTOP = "estop"


WALKING_MODES = {Mode.WALK_POLICY, Mode.WALK_SCRIPTED}
WATCHDOG_MODES = WALKING_MODES | {Mode.STAND}

# request edges beyond the universal any->DAMP / any->ESTOP
REQUEST_EDGES = {
    (Mode.IDLE, Mode.STANDUP),
    (Mode.STANDUP, Mode.IDLE),
    (Mode.STAND, Mode.WALK_POLICY),
    (Mode.STAND, Mode.WALK_SCRIPTED),
    (Mode.WALK_POLICY, Mode.STAND),
    (Mode.WALK_SCRIPTED, Mode.STAND),
    (Mode.DAMP, Mode.IDLE),
}

# every edge a mode trace may contain (requests + automatic transitions)
LEGAL_EDGES = REQUEST_EDGES | {
    (Mode.STANDUP, Mode.STAND),                      # ramp complete
    (Mode.ESTOP, Mode.IDLE),                         # explicit reset
} | {(m, Mode.DAMP) for m in Mode if m != Mode.ESTOP} \
  | {(m, Mode.ESTOP) for m in Mode}


class MissingPolicyError(RuntimeError):
    pass


@dataclass
class CommandInput:
    cmd_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    heartbeat_t: float = float("-inf")

    def __post_init__(self):
        self.cmd_vel = np.clip(np.asarray(self.cmd_vel, dtype=float),
                               -CMD_VEL_LIMITS, CMD_VEL_LIMITS)


class Supervisor:
    def __init__(self, model: RobotModel, policy: PolicySpec = None,
                 walk_gains: ControlGains = None,
                 trot_gains: ControlGains = None,
                 stand_gains: ControlGains = None,
                 heartbeat_timeout: float = HEARTBEAT_TIMEOUT,
                 standup_duration: float = STANDUP_DURATION,
                 transmission: Transmission = None):
        self.model = model
        self.policy = policy
        # stand and scripted-trot holds need to be stiff: the parallel link
        # doubles knee compliance under load (compliance = M^T diag(1/kp) M)
        self.walk_gains = walk_gains or ControlGains(kp=60.0, kd=2.0)
        self.trot_gains = trot_gains or ControlGains(kp=300.0, kd=3.0)
        self.stand_gains = stand_gains or ControlGains(kp=250.0, kd=3.0)
        self.heartbeat_timeout = heartbeat_timeout
        self.standup_duration = standup_duration
        self.transmission = transmission or Transmission()

        self.mode = Mode.IDLE
        self.cmd_vel = np.zeros(3)
        self.heartbeat_t = float("-inf")
        self.q = model.default_joint_pose.copy()
        self.qd = np.zeros(12)
        self.estimate = None
        self.prev_action = np.zeros(12)
        self._standup_t0 = None
        self._standup_from = None
        self._walk_t0 = 0.0
        self._estop_pending = False
        self.mode_trace = [Mode.IDLE]

    # --- inputs ---

    def set_feedback(self, q, qd):
        self.q = np.asarray(q, dtype=float).copy()
        self.qd = np.asarray(qd, dtype=float).copy()

    def set_estimate(self, estimate):
        self.estimate = estimate

    def set_cmd_vel(self, cmd_vel):
        self.cmd_vel = np.clip(np.asarray(cmd_vel, dtype=float),
                               -CMD_VEL_LIMITS, CMD_VEL_LIMITS)

    def heartbeat(self, now: float):
        self.heartbeat_t = max(self.heartbeat_t, now)

    # --- mode control ---

    def request_mode(self, target: Mode, now: float = None) -> bool:
        """Apply a mode request; returns False (no state change) if illegal."""
        if target == self.mode:
            return True
        if self.mode == Mode.ESTOP:
            return False                     # latched until reset()
        if target == Mode.ESTOP:
            self.estop()
            return True
        if target == Mode.DAMP:
            self._transition(Mode.DAMP)
            return True
        if (self.mode, target) not in REQUEST_EDGES:
            return False
        if target == Mode.WALK_POLICY and self.policy is None:
            raise MissingPolicyError("walk_policy requested but no policy loaded")
        if target == Mode.STANDUP:
            self._standup_t0 = now           # armed; tick() fills if None
            self._standup_from = self.q.copy()
        if target in WALKING_MODES:
            self._walk_t0 = None             # set on first walking tick
        self._transition(target)
        return True

    def estop(self):
        if self.mode != Mode.ESTOP:
            self._transition(Mode.ESTOP)

    def reset(self) -> bool:
        """Leave the latched ESTOP; the only way out."""
        if self.mode != Mode.ESTOP:
            return False
        self._transition(Mode.IDLE)
        return True

    def _transition(self, target: Mode):
        self.mode = target
        self.mode_trace.append(target)

    # --- the 50 Hz tick ---

    def tick(self, now: float) -> list:
        if self._estop_pending:
            self._estop_pending = False
            self.estop()

        # watchdog: stale heartbeat forces DAMP in any watched mode
        if (self.mode in WATCHDOG_MODES
                and now - self.heartbeat_t > self.heartbeat_timeout):
            self._transition(Mode.DAMP)

        if self.mode == Mode.IDLE or self.mode == Mode.ESTOP:
            return [MotorCommand() for _ in range(12)]

        if self.mode == Mode.DAMP:
            return [MotorCommand(kd=DAMP_KD) for _ in range(12)]

        if self.mode == Mode.STANDUP:
            if self._standup_t0 is None:
                self._standup_t0 = now
            if self._standup_from is None:
                self._standup_from = self.q.copy()
            s = (now - self._standup_t0) / self.standup_duration
            if s >= 1.0:
                self._transition(Mode.STAND)
                return self._hold_pose(self.model.default_joint_pose)
            blend = s * s * (3.0 - 2.0 * s)
            target = self._standup_from + blend * (
                self.model.default_joint_pose - self._standup_from)
            return self._hold_pose(target)

        if self.mode == Mode.STAND:
            return self._hold_pose(self.model.default_joint_pose)

        if self.mode == Mode.WALK_SCRIPTED:
            if self._walk_t0 is None:
                self._walk_t0 = now
            return scripted_trot(now - self._walk_t0, self.cmd_vel, self.model,
                                 gains=self.trot_gains,
                                 transmission=self.transmission)

        if self.mode == Mode.WALK_POLICY:
            if self.policy is None:
                raise MissingPolicyError("WALK_POLICY tick without a policy")
            if self._walk_t0 is None:
                self._walk_t0 = now
            obs = self.observation()
            action = infer(self.policy, obs)
            self.prev_action = action
            return action_to_targets(action, self.policy, self.model,
                                     gains=self.walk_gains,
                                     transmission=self.transmission)

        raise AssertionError(f"unhandled mode {self.mode}")

    def observation(self) -> np.ndarray:
        if self.estimate is None:
            raise RuntimeError("no state estimate available")
        default = (self.policy.default_pose
                   if self.policy is not None and self.policy.default_pose is not None
                   else self.model.default_joint_pose)
        scales = self.policy.obs_scales if self.policy is not None else None
        return assemble_observation(
            self.estimate.ang_vel_body, self.estimate.projected_gravity,
            self.cmd_vel, self.q, self.qd, self.prev_action, default, scales)

    def stance_flags(self, now: float):
        """Gait-phase stance flags while walking scripted; None otherwise."""
        if self.mode == Mode.WALK_SCRIPTED and self._walk_t0 is not None:
            return trot_phases(now - self._walk_t0)[1]
        return None

    def _hold_pose(self, target_joint) -> list:
        limits = self.model.joint_limits()
        target = np.clip(target_joint, limits[:, 0], limits[:, 1])
        motor = self.transmission.joint_to_motor(target.reshape(4, 3)).reshape(12)
        kp = min(self.stand_gains.kp, self.model.motor.kp_range[1])
        kd = min(self.stand_gains.kd, self.model.motor.kd_range[1])
        return [MotorCommand(p_des=float(p), kp=kp, kd=kd) for p in motor]

    def request_estop_async(self):
        """Thread-safe e-stop request, honored at the start of the next tick."""
        self._estop_pending = True
