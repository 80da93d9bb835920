import numpy as np
import pytest

from quadstack.motor_bus import (
    KD_RANGE,
    KP_RANGE,
    P_RANGE,
    TAU_RANGE,
    V_RANGE,
    BusFrame,
    DuplicateMotorError,
    FrameError,
    MotorCommand,
    MotorFeedback,
    VirtualBus,
    check_frames,
    decode_command,
    decode_feedback,
    dump_frames,
    encode_command,
    encode_feedback,
    half_lsb,
    parse_frame_dump,
    quantize,
)

FIELDS = [  # (range, bits) for command round-trip bounds
    (P_RANGE, 16), (V_RANGE, 12), (KP_RANGE, 12), (KD_RANGE, 12), (TAU_RANGE, 12),
]


# --- quantizer ---------------------------------------------------------------

def test_quantizer_endpoints():
    assert quantize(P_RANGE[0], *P_RANGE, 16) == 0
    assert quantize(P_RANGE[1], *P_RANGE, 16) == 65535
    assert quantize(-99.0, *P_RANGE, 16) == 0       # clamps below
    assert quantize(99.0, *P_RANGE, 16) == 65535    # clamps above


def test_quantizer_zero_position_ties_away():
    # (0 - min) * 65535 / span = 32767.5 exactly -> rounds away from zero
    assert quantize(0.0, *P_RANGE, 16) == 32768


def test_quantizer_zero_torque_ties_away():
    assert quantize(0.0, *TAU_RANGE, 12) == 2048


def test_dequantize_zero_torque_residual():
    # u = 2048 decodes half an LSB above zero
    cmd = decode_command(encode_command(MotorCommand(tau_ff=0.0)))
    assert cmd.tau_ff == pytest.approx(0.0146520146520146, abs=1e-12)


def test_quantizer_monotone():
    rng = np.random.default_rng(4)
    for (lo, hi), bits in FIELDS:
        xs = np.sort(rng.uniform(lo - 5, hi + 5, 500))
        us = [quantize(x, lo, hi, bits) for x in xs]
        assert all(a <= b for a, b in zip(us, us[1:]))


# --- command codec ------------------------------------------------------------

def test_all_zero_payload_decodes_to_minima():
    cmd = decode_command(bytes(8))
    assert cmd.p_des == P_RANGE[0]
    assert cmd.v_des == V_RANGE[0]
    assert cmd.kp == KP_RANGE[0]
    assert cmd.kd == KD_RANGE[0]
    assert cmd.tau_ff == TAU_RANGE[0]


def test_command_golden_vector_zeros():
    # hand-derived: p=0x8000, v=0x800, kp=0, kd=0, tau=0x800
    payload = encode_command(MotorCommand(0.0, 0.0, 0.0, 0.0, 0.0))
    assert payload.hex() == "8000800000000800"


def test_feedback_golden_vector():
    # hand-derived: id 3, zeros, 0 C -> raw temp 40 = 0x28
    payload = encode_feedback(MotorFeedback(3, 0.0, 0.0, 0.0, 0))
    assert payload.hex() == "03800080080028"


def test_command_round_trip_fuzz_half_lsb():
    rng = np.random.default_rng(99)
    n = 100_000
    ps = rng.uniform(P_RANGE[0] - 2, P_RANGE[1] + 2, n)
    vs = rng.uniform(V_RANGE[0] - 2, V_RANGE[1] + 2, n)
    kps = rng.uniform(KP_RANGE[0] - 2, KP_RANGE[1] + 2, n)
    kds = rng.uniform(KD_RANGE[0] - 1, KD_RANGE[1] + 1, n)
    taus = rng.uniform(TAU_RANGE[0] - 5, TAU_RANGE[1] + 5, n)
    bounds = [half_lsb(*rng_, bits) for rng_, bits in FIELDS]
    for i in range(n):
        cmd = MotorCommand(ps[i], vs[i], kps[i], kds[i], taus[i])
        out = decode_command(encode_command(cmd))
        clamped = [np.clip(ps[i], *P_RANGE), np.clip(vs[i], *V_RANGE),
                   np.clip(kps[i], *KP_RANGE), np.clip(kds[i], *KD_RANGE),
                   np.clip(taus[i], *TAU_RANGE)]
        got = [out.p_des, out.v_des, out.kp, out.kd, out.tau_ff]
        for want, have, bound in zip(clamped, got, bounds):
            assert abs(want - have) <= bound + 1e-12


def test_feedback_round_trip_half_lsb():
    rng = np.random.default_rng(8)
    for _ in range(5000):
        fb = MotorFeedback(
            motor_id=int(rng.integers(1, 7)),
            position=rng.uniform(*P_RANGE),
            velocity=rng.uniform(*V_RANGE),
            torque=rng.uniform(*TAU_RANGE),
            temperature=int(rng.integers(-40, 216)),
        )
        out = decode_feedback(encode_feedback(fb))
        assert out.motor_id == fb.motor_id
        assert abs(out.position - fb.position) <= half_lsb(*P_RANGE, 16)
        assert abs(out.velocity - fb.velocity) <= half_lsb(*V_RANGE, 12)
        assert abs(out.torque - fb.torque) <= half_lsb(*TAU_RANGE, 12)
        assert out.temperature == fb.temperature


def test_temperature_offset():
    fb = decode_feedback(bytes([1, 0, 0, 0, 0, 0, 65]))
    assert fb.temperature == 25


def test_wrong_payload_length_raises():
    with pytest.raises(FrameError):
        decode_command(bytes(7))
    with pytest.raises(FrameError):
        decode_feedback(bytes(8))


def test_feedback_bad_motor_id_raises():
    with pytest.raises(FrameError):
        encode_feedback(MotorFeedback(7, 0, 0, 0, 25))


def test_golden_dump_file_verifies(data_dir):
    text = (data_dir / "golden_frames.txt").read_text()
    assert check_frames(text) == []
    frames = parse_frame_dump(text)
    assert frames[0][1].payload.hex() == "8000800000000800"
    assert frames[1][1].payload.hex() == "03800080080028"


def test_check_frames_catches_corruption(data_dir):
    text = (data_dir / "golden_frames.txt").read_text()
    # a payload that no encoder output can produce: kp bits above the clamp
    # are fine (any u is decodable), so corrupt the LENGTH instead
    bad = text + "3000000 0 1 0102030405\n"
    errors = check_frames(bad)
    assert errors


# --- virtual bus ---------------------------------------------------------------

def test_bus_addressing_only_target_mailbox():
    bus = VirtualBus(latency=1e-3)
    boxes = {i: bus.register_motor(0, i) for i in range(1, 7)}
    frame = BusFrame(0, 2, encode_command(MotorCommand()))
    bus.send(frame, 0.0)
    bus.step(0.001)
    assert len(boxes[2]) == 1
    assert all(not boxes[i] for i in boxes if i != 2)


def test_bus_six_motors_per_channel_enforced():
    bus = VirtualBus()
    for i in range(1, 7):
        bus.register_motor(0, i)
    with pytest.raises(DuplicateMotorError):
        bus.register_motor(0, 7)


def test_bus_duplicate_id_rejected():
    bus = VirtualBus()
    bus.register_motor(1, 3)
    with pytest.raises(DuplicateMotorError):
        bus.register_motor(1, 3)


def test_bus_latency_and_fifo_order():
    bus = VirtualBus(latency=2e-3)
    box = bus.register_motor(0, 1)
    for k in range(5):
        cmd = MotorCommand(p_des=float(k))
        bus.send(BusFrame(0, 1, encode_command(cmd)), t=k * 1e-4)
    bus.step(1e-3)
    assert box == []                   # nothing before the latency elapses
    bus.step(0.01)
    assert len(box) == 5
    decoded = [decode_command(f.payload).p_des for f in box]
    assert decoded == sorted(decoded)  # send order preserved


def test_bus_drop_probability_one_blocks_everything():
    bus = VirtualBus(drop_prob=1.0, rng=np.random.default_rng(0))
    box = bus.register_motor(0, 1)
    for k in range(50):
        bus.send(BusFrame(0, 1, encode_command(MotorCommand())), t=0.0)
    bus.step(1.0)
    assert box == []


def test_bus_feedback_routes_to_controller():
    bus = VirtualBus(latency=1e-3)
    bus.register_motor(0, 4)
    fb = MotorFeedback(4, 0.5, 0.0, 1.0, 30)
    bus.send(BusFrame(0, 0x100 | 4, encode_feedback(fb)), 0.0)
    bus.step(0.002)
    assert len(bus.controller[0]) == 1
    assert decode_feedback(bus.controller[0][0].payload).motor_id == 4


def test_dump_round_trip():
    bus = VirtualBus()
    bus.register_motor(0, 1)
    bus.send(BusFrame(0, 1, encode_command(MotorCommand(p_des=1.0))), 0.0015)
    text = dump_frames(bus.frame_log)
    frames = parse_frame_dump(text)
    assert frames[0][0] == 1_500_000   # ns
    assert frames[0][1].payload == bus.frame_log[0][1].payload


def test_frame_validation():
    with pytest.raises(FrameError):
        BusFrame(2, 1, bytes(8))       # bad channel
    with pytest.raises(FrameError):
        BusFrame(0, 0x800, bytes(8))   # arb id not 11-bit
    with pytest.raises(FrameError):
        BusFrame(0, 1, bytes(5))       # bad payload length
