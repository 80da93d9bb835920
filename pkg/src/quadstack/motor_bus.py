"""Bit-exact motor frame codec and a virtual two-channel CAN-style bus.

Command payload, 8 bytes, fields packed MSB-first:

    p_des   16 bits  [-12.566, 12.566] rad
    v_des   12 bits  [-30, 30] rad/s
    kp      12 bits  [0, 500] N m / rad
    kd      12 bits  [0, 5] N m s / rad
    tau_ff  12 bits  [-60, 60] N m     (saturates at the 60 N m peak torque)

Feedback payload, 7 bytes: motor_id 8 bits, position 16, velocity 12,
torque 12 (command ranges), temperature 8 bits with raw 0..255 = -40..215 C.

Quantizer: u = round_half_away_from_zero((x - min) * (2^bits - 1) / (max - min))
after clamping x into [min, max]; dequantizer x = min + u * (max - min) / (2^bits - 1).

The real servo wire format is not public; this layout is fixed here so tests
can be bit-exact, and is isolated behind encode/decode functions so a
vendor-faithful codec can replace it.

Arbitration ids: command to motor i uses arb_id = i (1..6 per channel);
feedback from motor i uses arb_id = 0x100 | i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

P_RANGE = (-12.566, 12.566)
V_RANGE = (-30.0, 30.0)
KP_RANGE = (0.0, 500.0)
KD_RANGE = (0.0, 5.0)
TAU_RANGE = (-60.0, 60.0)

TEMP_OFFSET = -40  # raw 0 -> -40 C

FEEDBACK_ARB_BASE = 0x100
MOTORS_PER_CHANNEL = 6


class FrameError(ValueError):
    """Malformed bus frame or payload."""


@dataclass
class MotorCommand:
    p_des: float = 0.0
    v_des: float = 0.0
    kp: float = 0.0
    kd: float = 0.0
    tau_ff: float = 0.0


@dataclass
class MotorFeedback:
    motor_id: int
    position: float
    velocity: float
    torque: float
    temperature: int  # C, integer


@dataclass
class BusFrame:
    channel: int          # 0 | 1
    arbitration_id: int   # 11-bit
    payload: bytes        # 8 bytes command, 7 bytes feedback

    def __post_init__(self):
        if self.channel not in (0, 1):
            raise FrameError(f"channel must be 0 or 1, got {self.channel}")
        if not 0 <= self.arbitration_id < 0x800:
            raise FrameError(f"arbitration_id {self.arbitration_id:#x} not 11-bit")
        if len(self.payload) not in (7, 8):
            raise FrameError(f"payload must be 7 or 8 bytes, got {len(self.payload)}")


def quantize(x: float, lo: float, hi: float, bits: int) -> int:
    n = (1 << bits) - 1
    x = min(max(float(x), lo), hi)
    u = (x - lo) * n / (hi - lo)
    q = math.floor(u + 0.5)  # ties away from zero (u >= 0 here)
    return min(max(q, 0), n)


def dequantize(u: int, lo: float, hi: float, bits: int) -> float:
    n = (1 << bits) - 1
    return lo + u * (hi - lo) / n


def encode_command(cmd: MotorCommand) -> bytes:
    p = quantize(cmd.p_des, *P_RANGE, 16)
    v = quantize(cmd.v_des, *V_RANGE, 12)
    kp = quantize(cmd.kp, *KP_RANGE, 12)
    kd = quantize(cmd.kd, *KD_RANGE, 12)
    t = quantize(cmd.tau_ff, *TAU_RANGE, 12)
    return bytes([
        p >> 8, p & 0xFF,
        v >> 4, ((v & 0xF) << 4) | (kp >> 8), kp & 0xFF,
        kd >> 4, ((kd & 0xF) << 4) | (t >> 8), t & 0xFF,
    ])


def decode_command(payload: bytes) -> MotorCommand:
    if len(payload) != 8:
        raise FrameError(f"command payload must be 8 bytes, got {len(payload)}")
    b = payload
    p = (b[0] << 8) | b[1]
    v = (b[2] << 4) | (b[3] >> 4)
    kp = ((b[3] & 0xF) << 8) | b[4]
    kd = (b[5] << 4) | (b[6] >> 4)
    t = ((b[6] & 0xF) << 8) | b[7]
    return MotorCommand(
        p_des=dequantize(p, *P_RANGE, 16),
        v_des=dequantize(v, *V_RANGE, 12),
        kp=dequantize(kp, *KP_RANGE, 12),
        kd=dequantize(kd, *KD_RANGE, 12),
        tau_ff=dequantize(t, *TAU_RANGE, 12),
    )


def encode_feedback(fb: MotorFeedback) -> bytes:
    if not 1 <= fb.motor_id <= MOTORS_PER_CHANNEL:
        raise FrameError(f"motor_id must be 1..{MOTORS_PER_CHANNEL}, got {fb.motor_id}")
    p = quantize(fb.position, *P_RANGE, 16)
    v = quantize(fb.velocity, *V_RANGE, 12)
    t = quantize(fb.torque, *TAU_RANGE, 12)
    raw = min(max(int(round(fb.temperature)) - TEMP_OFFSET, 0), 255)
    return bytes([
        fb.motor_id,
        p >> 8, p & 0xFF,
        v >> 4, ((v & 0xF) << 4) | (t >> 8), t & 0xFF,
        raw,
    ])


def decode_feedback(payload: bytes) -> MotorFeedback:
    if len(payload) != 7:
        raise FrameError(f"feedback payload must be 7 bytes, got {len(payload)}")
    b = payload
    p = (b[1] << 8) | b[2]
    v = (b[3] << 4) | (b[4] >> 4)
    t = ((b[4] & 0xF) << 8) | b[5]
    return MotorFeedback(
        motor_id=b[0],
        position=dequantize(p, *P_RANGE, 16),
        velocity=dequantize(v, *V_RANGE, 12),
        torque=dequantize(t, *TAU_RANGE, 12),
        temperature=TEMP_OFFSET + b[6],
    )


def half_lsb(lo: float, hi: float, bits: int) -> float:
    return (hi - lo) / (2.0 * ((1 << bits) - 1))


class DuplicateMotorError(ValueError):
    pass


class VirtualBus:
    """Two CAN-style channels with six motor endpoints each.

    Frames are FIFO per channel and arrive `latency` seconds after they are
    sent; `drop_prob` simulates a lossy link (0 by default). Commands route
    to the addressed motor's mailbox, feedback frames to the controller
    mailbox of that channel. All sent frames are kept in `frame_log` as
    (t_ns, BusFrame) for dump/replay.
    """

    def __init__(self, latency: float = 1e-3, drop_prob: float = 0.0, rng=None):
        self.latency = latency
        self.drop_prob = drop_prob
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.motors = {0: {}, 1: {}}        # channel -> {motor_id: mailbox list}
        self.controller = {0: [], 1: []}    # channel -> mailbox list
        self.in_flight = {0: [], 1: []}     # (send_seq, arrive_t, frame)
        self.frame_log = []
        self._seq = 0

    def register_motor(self, channel: int, motor_id: int) -> list:
        if not 1 <= motor_id <= MOTORS_PER_CHANNEL:
            raise DuplicateMotorError(
                f"motor ids are 1..{MOTORS_PER_CHANNEL} per channel, got {motor_id}")
        mailboxes = self.motors[channel]
        if motor_id in mailboxes:
            raise DuplicateMotorError(
                f"motor id {motor_id} already registered on channel {channel}")
        mailboxes[motor_id] = []
        return mailboxes[motor_id]

    def send(self, frame: BusFrame, t: float):
        self.frame_log.append((int(round(t * 1e9)), frame))
        if self.drop_prob > 0 and self.rng.random() < self.drop_prob:
            return
        self._seq += 1
        self.in_flight[frame.channel].append((self._seq, t + self.latency, frame))

    def step(self, now: float):
        """Deliver every frame whose arrival time has passed, in send order."""
        for channel in (0, 1):
            pending = self.in_flight[channel]
            ready = [e for e in pending if e[1] <= now]
            if not ready:
                continue
            self.in_flight[channel] = [e for e in pending if e[1] > now]
            for _, _, frame in sorted(ready, key=lambda e: e[0]):
                self._deliver(frame)

    def _deliver(self, frame: BusFrame):
        if frame.arbitration_id & FEEDBACK_ARB_BASE:
            self.controller[frame.channel].append(frame)
        else:
            mailbox = self.motors[frame.channel].get(frame.arbitration_id)
            if mailbox is not None:
                mailbox.append(frame)


def dump_frames(log) -> str:
    """One frame per line: `t_ns channel arb_id hex_payload`."""
    return "".join(
        f"{t_ns} {f.channel} {f.arbitration_id} {f.payload.hex()}\n" for t_ns, f in log
    )


def parse_frame_dump(text: str):
    frames = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FrameError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        t_ns, channel, arb = int(parts[0]), int(parts[1]), int(parts[2])
        payload = bytes.fromhex(parts[3])
        frames.append((t_ns, BusFrame(channel, arb, payload)))
    return frames


def check_frames(text: str) -> list:
    """Verify a frame dump decodes and re-encodes bit-exactly.

    Returns a list of error strings; empty means every frame checks out.
    """
    errors = []
    try:
        frames = parse_frame_dump(text)
    except (FrameError, ValueError) as e:
        return [str(e)]
    for i, (t_ns, frame) in enumerate(frames):
        try:
            if len(frame.payload) == 8:
                again = encode_command(decode_command(frame.payload))
            else:
                again = encode_feedback(decode_feedback(frame.payload))
        except FrameError as e:
            errors.append(f"frame {i} (t={t_ns}): {e}")
            continue
        if again != frame.payload:
            errors.append(
                f"frame {i} (t={t_ns}): payload {frame.payload.hex()} "
                f"re-encodes to {again.hex()}")
    return errors
