import numpy as np
import pytest

from quadstack.motor_bus import MotorCommand
from quadstack.rotations import GRAVITY, quat_from_rpy
from quadstack.sim import (
    ContactModel,
    SimulationDiverged,
    TerrainError,
    drop_test,
    initial_state,
    kinetic_energy,
    make_terrain,
    pack_commands,
    step,
    step_detailed,
)

FLAT = make_terrain("flat")
ZERO_CMDS = [MotorCommand() for _ in range(12)]


def hold_cmds(model, kp=250.0, kd=3.0):
    from quadstack.kinematics import joint_to_motor
    motor = joint_to_motor(model.default_joint_pose.reshape(4, 3)).reshape(12)
    return [MotorCommand(p_des=float(p), kp=kp, kd=kd) for p in motor]


# --- terrain -------------------------------------------------------------------

def test_flat_terrain_height():
    xs = np.linspace(-5, 5, 11)
    assert np.all(FLAT.height(xs, xs) == 0.0)


def test_stairs_height_example():
    stairs = make_terrain("stairs", rise=0.17, run=0.29)
    assert float(stairs.height(np.array(0.30), np.array(0.0))) == pytest.approx(0.17)
    assert float(stairs.height(np.array(-1.0), np.array(0.0))) == 0.0
    assert float(stairs.height(np.array(0.60), np.array(0.0))) == pytest.approx(0.34)


def test_stairs_continuous_within_face():
    stairs = make_terrain("stairs")
    xs = np.linspace(-1.0, 3.0, 4001)
    hs = stairs.height(xs, np.zeros_like(xs))
    # nosing ramps make the whole profile continuous: worst jump bounded by
    # slope * dx
    assert np.max(np.abs(np.diff(hs))) <= (0.17 / stairs.nosing) * 0.001 + 1e-9


def test_slope_height_example():
    slope = make_terrain("slope", grade=0.3)
    assert float(slope.height(np.array(1.0), np.array(0.0))) == \
        pytest.approx(np.tan(0.3), abs=1e-12)


def test_invalid_terrain_params():
    with pytest.raises(TerrainError):
        make_terrain("stairs", rise=-0.1, run=0.3)
    with pytest.raises(TerrainError):
        make_terrain("slope", grade=2.0)
    with pytest.raises(TerrainError):
        make_terrain("wibble")


def test_heightfield_interpolation():
    grid = np.array([[0.0, 0.0], [1.0, 1.0]])
    hf = make_terrain("heightfield", grid=grid, resolution=1.0)
    assert float(hf.height(np.array(0.5), np.array(0.5))) == pytest.approx(0.5)


def test_contact_model_validation():
    with pytest.raises(ValueError):
        ContactModel(k_n=-1.0)


# --- core integration ----------------------------------------------------------

def test_free_fall_matches_ballistics(model):
    state = initial_state(model, height_offset=5.0)
    for _ in range(100):
        state = step(state, ZERO_CMDS, model, FLAT, 1e-3)
    assert state.base_lin_vel[2] == pytest.approx(-GRAVITY * 0.1, abs=1e-6)
    assert state.t == pytest.approx(0.1)


def test_free_flight_energy_drift(model):
    # projectile with a principal-axis spin: drift < 1e-3 J/s at dt = 1 ms
    state = initial_state(model, height_offset=50.0)
    state.base_lin_vel = np.array([1.0, 0.5, 2.0])
    state.base_ang_vel = np.array([0.0, 0.0, 1.0])

    def energy(s):
        return (kinetic_energy(s, model)
                + model.total_mass * GRAVITY * s.base_position[2])

    e0 = energy(state)
    for _ in range(2000):
        state = step(state, ZERO_CMDS, model, FLAT, 1e-3)
    drift_per_s = abs(energy(state) - e0) / 2.0
    assert drift_per_s < 1e-3


def test_quaternion_stays_normalized(model):
    state = initial_state(model, height_offset=20.0)
    state.base_ang_vel = np.array([2.0, -1.0, 3.0])
    for _ in range(1000):
        state = step(state, ZERO_CMDS, model, FLAT, 1e-3)
        assert abs(np.linalg.norm(state.base_orientation) - 1.0) < 1e-9


def test_static_stance_supports_weight(model):
    state = initial_state(model)
    cmds = pack_commands(hold_cmds(model))
    for _ in range(3000):
        state, info = step_detailed(state, cmds, model, FLAT, 1e-3)
    total = []
    for _ in range(200):
        state, info = step_detailed(state, cmds, model, FLAT, 1e-3)
        total.append(info.normal_force.sum())
    expected = model.total_mass * GRAVITY
    assert np.mean(total) == pytest.approx(expected, rel=0.01)


def test_torque_clamped_at_peak(model):
    # command a feedforward far beyond the peak: applied joint torque must
    # saturate at 60 N m
    cmds = [MotorCommand(tau_ff=100.0) for _ in range(12)]
    state = initial_state(model)
    state, info = step_detailed(state, cmds, model, FLAT, 1e-3)
    assert np.max(np.abs(info.joint_torque)) <= model.motor.torque_peak + 1e-12
    assert np.max(np.abs(info.joint_torque)) == pytest.approx(60.0)


def test_joint_torque_bounded_even_when_motors_sum(model):
    # opposing pitch/knee motor commands stack on the pitch joint through the
    # parallel link; the joint-side clamp still holds the 60 N m line
    cmds = [MotorCommand(tau_ff=60.0) for _ in range(12)]
    for c in cmds[2::3]:
        c.tau_ff = -60.0
    state = initial_state(model)
    _, info = step_detailed(state, cmds, model, FLAT, 1e-3)
    assert np.max(np.abs(info.joint_torque)) <= 60.0 + 1e-12


def test_contact_force_invariants(model):
    contact = ContactModel()
    state = initial_state(model, height_offset=0.05)
    cmds = pack_commands(hold_cmds(model, kp=30.0))
    for _ in range(1500):
        state, info = step_detailed(state, cmds, model, FLAT, 1e-3,
                                    contact=contact)
        assert np.all(info.normal_force >= 0.0)
        tangential = info.contact_forces - info.normal_force[:, None] \
            * np.array([0.0, 0.0, 1.0])
        mags = np.linalg.norm(tangential, axis=1)
        assert np.all(mags <= contact.mu * info.normal_force + 1e-9)


def test_determinism_bit_identical(model):
    def run():
        state = initial_state(model, height_offset=0.03)
        cmds = pack_commands(hold_cmds(model))
        out = []
        for _ in range(500):
            state, info = step_detailed(state, cmds, model, FLAT, 1e-3)
            out.append(state.base_position.copy())
        return np.array(out), state
    a, sa = run()
    b, sb = run()
    assert np.array_equal(a, b)
    assert np.array_equal(sa.q, sb.q)
    assert np.array_equal(sa.base_orientation, sb.base_orientation)


def test_dt_bounds_enforced(model):
    state = initial_state(model)
    with pytest.raises(ValueError):
        step(state, ZERO_CMDS, model, FLAT, 0.0)
    with pytest.raises(ValueError):
        step(state, ZERO_CMDS, model, FLAT, 3e-3)


def test_nan_guard_reports_last_state(model):
    state = initial_state(model)
    state.base_lin_vel = np.array([np.nan, 0.0, 0.0])
    with pytest.raises(SimulationDiverged) as err:
        step(state, ZERO_CMDS, model, FLAT, 1e-3)
    assert err.value.last_valid_state is state


# --- scenario helpers ------------------------------------------------------------

def test_drop_settles_on_four_feet(model):
    settled = drop_test(model, 0.05)
    assert kinetic_energy(settled, model) < 0.01
    _, info = step_detailed(settled, pack_commands(hold_cmds(model, kp=60.0)),
                            model, FLAT, 1e-3)
    assert np.sum(info.normal_force > 5.0) == 4


def test_drop_from_zero_already_settled(model):
    settled = drop_test(model, 0.0)
    assert settled.t < 1.0
    assert settled.base_position[2] == pytest.approx(model.standing_height,
                                                     abs=0.12)


def test_drop_height_must_be_nonnegative(model):
    with pytest.raises(ValueError):
        drop_test(model, -0.1)


def test_frictionless_slope_slides_downhill(model):
    slope = make_terrain("slope", grade=0.3, friction_mu=0.0)
    contact = ContactModel(mu=0.0)
    state = initial_state(model, slope)
    cmds = pack_commands(hold_cmds(model))
    xs = []
    for _ in range(2000):
        state, _ = step_detailed(state, cmds, model, slope, 1e-3,
                                 contact=contact)
        xs.append(state.base_position[0])
    xs = np.array(xs)
    assert xs[-1] < -1.0                        # slid well downhill
    assert np.all(np.diff(xs[100:]) < 1e-10)    # monotone after touchdown


def test_belly_pads_stop_body_sinking(model):
    # pure damping lets the legs collapse; the body must rest on its pads,
    # not sink through the terrain
    state = initial_state(model, height_offset=0.05)
    cmds = pack_commands([MotorCommand(kd=3.0) for _ in range(12)])
    for _ in range(3000):
        state, info = step_detailed(state, cmds, model, FLAT, 1e-3)
    assert state.base_position[2] > 0.0
    assert np.any(info.belly_normal_force > 1.0)


def test_initial_state_orientation_option(model):
    state = initial_state(model)
    state.base_orientation = quat_from_rpy(0.0, 0.0, 1.0)
    assert abs(np.linalg.norm(state.base_orientation) - 1.0) < 1e-12
