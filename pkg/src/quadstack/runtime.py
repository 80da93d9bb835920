"""Closed-loop orchestration: supervisor -> bus -> simulator -> sensors.

One control tick (50 Hz by default):

  1. drain gateway inbox (commands, heartbeats, e-stop)
  2. deliver feedback frames, update the supervisor's joint view
  3. IMU + leg odometry estimator update
  4. supervisor tick -> 12 motor commands -> command frames on the bus
  5. sim substeps at 1 kHz; motors latch commands as frames arrive
  6. motors push feedback frames; mapper and telemetry at their rates

Commands and feedback genuinely travel through the virtual CAN bus (two
channels, six motors each, 1 ms latency), so the control loop sees the
same quantization and latency the hardware path would have.
"""

from __future__ import annotations

import json
import queue
import time

import numpy as np

from . import motor_bus
from .estimator import StateEstimator, contacts_from_forces, imu_from_sim
from .gateway import TelemetryServer, event_message, robot_state_message
from .mapping import ElevationGrid, grid_to_message, simulate_lidar
from .model import RobotModel
from .motor_bus import BusFrame, MotorCommand, VirtualBus
from .rotations import Transform
from .sim import (
    ContactModel,
    SimState,
    SimulationDiverged,
    Terrain,
    initial_state,
    pack_commands,
    step_detailed,
)
from .supervisor import Mode, Supervisor

GRID_DIVISOR = 10          # grid published every N ticks: 50 Hz / 10 = 5 Hz
DEFAULT_LIDAR_RAYS = 600


class SimRunner:
    def __init__(self, model: RobotModel, terrain: Terrain,
                 supervisor: Supervisor, seed: int = 0,
                 server: TelemetryServer = None,
                 mapping_enabled: bool = True,
                 lidar_rays: int = DEFAULT_LIDAR_RAYS,
                 contact: ContactModel = None,
                 realtime: bool = False,
                 log_path=None,
                 start_state: SimState = None):
        self.model = model
        self.terrain = terrain
        self.supervisor = supervisor
        self.server = server
        self.mapping_enabled = mapping_enabled
        self.lidar_rays = lidar_rays
        self.contact = contact
        self.realtime = realtime
        self.rng = np.random.default_rng(seed)

        rates = model.control_rates
        self.tick_dt = 1.0 / rates["policy_hz"]
        self.sim_dt = 1.0 / rates["sim_hz"]
        self.substeps = max(1, int(round(rates["sim_hz"] / rates["policy_hz"])))

        self.state = start_state if start_state is not None \
            else initial_state(model, terrain)
        self.prev_tick_vel = self.state.base_lin_vel.copy()
        self.estimator = StateEstimator(model)

        self.bus = VirtualBus(rng=np.random.default_rng(seed + 1))
        for ch in (0, 1):
            for mid in range(1, 7):
                self.bus.register_motor(ch, mid)
        self.latched = [MotorCommand() for _ in range(12)]
        self._latched_packed = pack_commands(self.latched)

        self.grid = ElevationGrid(center=(self.state.base_position[0],
                                          self.state.base_position[1]))
        self._last_map_xy = self.state.base_position.copy()

        self.tick_count = 0
        self.last_info = None
        self.last_torques = np.zeros(12)
        self.tick_times = []          # wall seconds per tick, for load tests
        self._log_file = open(log_path, "w", encoding="utf-8") if log_path else None
        self.last_state_message = None

    # --- bus addressing: legs FL,FR on channel 0 (ids 1-3, 4-6), RL,RR on 1 ---

    @staticmethod
    def joint_to_bus(j: int):
        channel = 0 if j < 6 else 1
        return channel, (j % 6) + 1

    def close(self):
        if self._log_file:
            self._log_file.close()
            self._log_file = None
        if self.server:
            self.server.stop()

    # --- main loop ---

    def run(self, duration: float, autostart: bool = False,
            auto_cmd=(0.3, 0.0, 0.0), gait: str = "scripted") -> int:
        """Run until sim time reaches `duration`; 0 on clean end."""
        auto_heartbeat = self.server is None
        walk_mode = Mode.WALK_SCRIPTED if gait == "scripted" else Mode.WALK_POLICY
        requested_stand = False
        requested_walk = False
        t_end = self.state.t + duration
        try:
            while self.state.t < t_end - 1e-9:
                wall_start = time.perf_counter()
                now = self.state.t
                if auto_heartbeat or autostart:
                    self.supervisor.heartbeat(now)
                if autostart and not requested_stand and now >= 0.1:
                    self.supervisor.request_mode(Mode.STANDUP, now)
                    requested_stand = True
                if (autostart and not requested_walk
                        and self.supervisor.mode == Mode.STAND):
                    self.supervisor.set_cmd_vel(auto_cmd)
                    self.supervisor.request_mode(walk_mode, now)
                    requested_walk = True
                self.step_tick()
                self.tick_times.append(time.perf_counter() - wall_start)
                if self.realtime:
                    sleep = self.tick_dt - (time.perf_counter() - wall_start)
                    if sleep > 0:
                        time.sleep(sleep)
        except SimulationDiverged as e:
            if self.server:
                self.server.publish_event(event_message("error", str(e)))
            return 1
        finally:
            self.close()
        return 0

    def step_tick(self):
        now = self.state.t
        self._drain_inbox(now)
        self._deliver_feedback(now)

        # estimator: orientation from IMU, velocity from stance legs
        imu = imu_from_sim(self.state, self.prev_tick_vel, self.tick_dt)
        self.prev_tick_vel = self.state.base_lin_vel.copy()
        self.estimator.update_orientation(imu, self.tick_dt)
        stance = self.supervisor.stance_flags(now)
        if stance is None:
            forces = (self.last_info.normal_force if self.last_info is not None
                      else np.zeros(4))
            stance = contacts_from_forces(forces)
        self.estimator.update_velocity(self.supervisor.q, self.supervisor.qd,
                                       stance, imu, self.tick_dt)
        self.supervisor.set_estimate(self.estimator.estimate)

        commands = self.supervisor.tick(now)
        self._send_commands(commands, now)

        for _ in range(self.substeps):
            self.bus.step(self.state.t)
            self._latch_arrived()
            self.state, self.last_info = step_detailed(
                self.state, self._latched_packed, self.model, self.terrain,
                self.sim_dt, contact=self.contact)
        self.last_torques = self.last_info.joint_torque

        self._emit_feedback(self.state.t)

        if self.mapping_enabled and self.tick_count % GRID_DIVISOR == 0:
            self._update_map()

        self._publish(now, commands)
        self.tick_count += 1

    # --- gateway inbox ---

    def _drain_inbox(self, now: float):
        if self.server is None:
            return
        sup = self.supervisor
        while True:
            try:
                msg = self.server.inbox.get_nowait()
            except queue.Empty:
                break
            mtype = msg["type"]
            if mtype == "cmd_vel":
                sup.set_cmd_vel((msg["vx"], msg["vy"], msg["wz"]))
            elif mtype == "heartbeat":
                sup.heartbeat(now)
            elif mtype == "estop":
                sup.estop()
            elif mtype == "reset":
                sup.reset()
            elif mtype == "mode_request":
                try:
                    mode = Mode(msg["mode"])
                except ValueError:
                    self.server.publish_event(
                        event_message("error", f"unknown mode {msg['mode']!r}"))
                    continue
                try:
                    ok = sup.request_mode(mode, now)
                except Exception as e:
                    self.server.publish_event(event_message("error", str(e)))
                    continue
                if not ok:
                    self.server.publish_event(event_message(
                        "warn", f"mode request {mode.value} rejected in "
                                f"{sup.mode.value}"))

    # --- bus plumbing ---

    def _send_commands(self, commands, now: float):
        for j, cmd in enumerate(commands):
            channel, mid = self.joint_to_bus(j)
            frame = BusFrame(channel, mid, motor_bus.encode_command(cmd))
            self.bus.send(frame, now)

    def _latch_arrived(self):
        changed = False
        for channel in (0, 1):
            for mid, mailbox in self.bus.motors[channel].items():
                if mailbox:
                    frame = mailbox[-1]
                    mailbox.clear()
                    j = channel * 6 + (mid - 1)
                    self.latched[j] = motor_bus.decode_command(frame.payload)
                    changed = True
        if changed:
            self._latched_packed = pack_commands(self.latched)

    def _emit_feedback(self, now: float):
        qm = self.supervisor.transmission.joint_to_motor(
            self.state.q.reshape(4, 3)).reshape(12)
        qdm = self.supervisor.transmission.joint_to_motor(
            self.state.qd.reshape(4, 3)).reshape(12)
        taum = self.supervisor.transmission.joint_torque_to_motor(
            self.last_torques.reshape(4, 3)).reshape(12)
        for j in range(12):
            channel, mid = self.joint_to_bus(j)
            fb = motor_bus.MotorFeedback(
                motor_id=mid, position=float(qm[j]), velocity=float(qdm[j]),
                torque=float(taum[j]), temperature=25)
            frame = BusFrame(channel, motor_bus.FEEDBACK_ARB_BASE | mid,
                             motor_bus.encode_feedback(fb))
            self.bus.send(frame, now)

    def _deliver_feedback(self, now: float):
        self.bus.step(now)
        q = self.supervisor.q.copy().reshape(4, 3)
        qd = self.supervisor.qd.copy().reshape(4, 3)
        qm = self.supervisor.transmission.joint_to_motor(q)
        qdm = self.supervisor.transmission.joint_to_motor(qd)
        got = False
        for channel in (0, 1):
            mailbox = self.bus.controller[channel]
            for frame in mailbox:
                fb = motor_bus.decode_feedback(frame.payload)
                j = channel * 6 + (fb.motor_id - 1)
                qm[j // 3, j % 3] = fb.position
                qdm[j // 3, j % 3] = fb.velocity
                got = True
            mailbox.clear()
        if got:
            self.supervisor.set_feedback(
                self.supervisor.transmission.motor_to_joint(qm).reshape(12),
                self.supervisor.transmission.motor_to_joint(qdm).reshape(12))

    # --- perception + telemetry ---

    def _update_map(self):
        pos = self.state.base_position
        self.grid.on_motion(pos - self._last_map_xy)
        self._last_map_xy = pos.copy()
        base_pose = Transform(pos, self.state.base_orientation)
        for sensor_id in range(len(self.model.sensor_extrinsics)):
            cloud = simulate_lidar(self.terrain, base_pose, self.model,
                                   self.lidar_rays, sensor_id=sensor_id,
                                   rng=self.rng, t=self.state.t)
            self.grid.integrate(cloud, base_pose, self.model)
        if self.server:
            self.server.publish_grid(grid_to_message(self.grid))

    def _publish(self, tick_t: float, commands):
        sup = self.supervisor
        msg = robot_state_message(self.state.t, sup.mode, self.state,
                                  self.last_torques, self.estimator.estimate)
        self.last_state_message = msg
        if self.server:
            self.server.publish_state(msg)
        if self._log_file:
            record = {
                "tick": self.tick_count,
                "mode": sup.mode.value,
                "obs": (sup.observation().tolist()
                        if sup.mode == Mode.WALK_POLICY else None),
                "action": (sup.prev_action.tolist()
                           if sup.mode == Mode.WALK_POLICY else None),
                "torques": [float(v) for v in self.last_torques],
                "robot_state": msg,
            }
            self._log_file.write(json.dumps(record, sort_keys=True,
                                            separators=(",", ":")) + "\n")
