import json

import numpy as np
import pytest

from quadstack.kinematics import motor_to_joint
from quadstack.policy import (
    ACT_DIM,
    OBS_DIM,
    ControlGains,
    Layer,
    PolicyError,
    PolicySpec,
    action_to_targets,
    assemble_observation,
    infer,
    load_policy,
    save_policy,
    scripted_trot,
    trot_phases,
)


@pytest.fixture(scope="module")
def mlp(data_dir):
    return load_policy(data_dir / "mlp_policy.qpol")


# --- loading -------------------------------------------------------------------

def test_identity_policy_loads(data_dir):
    policy = load_policy(data_dir / "identity_policy.qpol")
    assert policy.obs_dim == OBS_DIM and policy.act_dim == ACT_DIM
    obs = np.zeros(OBS_DIM)
    obs[:12] = np.linspace(-1, 1, 12)
    assert np.allclose(infer(policy, obs), obs[:12], atol=1e-7)


def test_mlp_policy_loads(mlp):
    assert [l.rows for l in mlp.layers] == [256, 128, 12]
    assert mlp.layers[0].activation == "elu"


def test_shape_mismatch_names_layer(tmp_path):
    bad = PolicySpec(layers=[
        Layer(np.zeros((64, 45)), np.zeros(64), "elu"),
        Layer(np.zeros((12, 100)), np.zeros(12), "identity"),   # 100 != 64
    ])
    path = tmp_path / "bad.qpol"
    save_policy(bad, path)
    with pytest.raises(PolicyError, match="layer 1"):
        load_policy(path)


def test_blob_length_mismatch(tmp_path, data_dir):
    raw = (data_dir / "identity_policy.qpol").read_bytes()
    (tmp_path / "short.qpol").write_bytes(raw[:-8])
    with pytest.raises(PolicyError, match="blob"):
        load_policy(tmp_path / "short.qpol")


def test_not_a_policy_file(tmp_path):
    (tmp_path / "junk.qpol").write_bytes(b'{"hello": 1}\n')
    with pytest.raises(PolicyError, match="format"):
        load_policy(tmp_path / "junk.qpol")


def test_save_load_round_trip(tmp_path, mlp):
    save_policy(mlp, tmp_path / "again.qpol")
    again = load_policy(tmp_path / "again.qpol")
    for a, b in zip(again.layers, mlp.layers):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)
        assert a.activation == b.activation
    assert again.action_scale == mlp.action_scale
    assert np.array_equal(again.default_pose, mlp.default_pose)


# --- inference -----------------------------------------------------------------

def test_zero_network_gives_zero_action(data_dir):
    policy = load_policy(data_dir / "zero_policy.qpol")
    assert np.all(infer(policy, np.zeros(OBS_DIM)) == 0.0)


def test_golden_forward_pass(mlp, data_dir):
    golden = json.loads((data_dir / "golden_forward.json").read_text())
    action = infer(mlp, np.array(golden["input"]))
    assert np.allclose(action, golden["output"], atol=1e-5)


def test_wrong_observation_length_raises(mlp):
    with pytest.raises(PolicyError, match="shape"):
        infer(mlp, np.zeros(44))


def test_inference_is_pure(mlp):
    rng = np.random.default_rng(1)
    obs = rng.uniform(-1, 1, OBS_DIM)
    a = infer(mlp, obs)
    b = infer(mlp, obs)
    assert np.array_equal(a, b)


def test_action_clip_applied(tmp_path):
    spec = PolicySpec(layers=[Layer(np.full((12, 45), 10.0), np.zeros(12),
                                    "identity")], action_clip=1.5)
    action = infer(spec, np.ones(45))
    assert np.all(np.abs(action) <= 1.5)


# --- observation assembly --------------------------------------------------------

def test_golden_observation_locked(data_dir):
    g = json.loads((data_dir / "golden_observation.json").read_text())
    obs = assemble_observation(
        g["ang_vel_body"], g["projected_gravity"], g["commands"],
        g["q"], g["qd"], g["prev_action"],
        default_pose=[0.0, 0.8, -1.5] * 4)
    assert obs.shape == (OBS_DIM,)
    assert np.allclose(obs, g["observation"], atol=1e-12)


def test_observation_block_order():
    obs = assemble_observation(
        [1, 2, 3], [0, 0, -1], [0.5, 0.25, 2.0],
        np.zeros(12), np.ones(12), np.full(12, 7.0),
        default_pose=np.zeros(12))
    assert np.allclose(obs[0:3], [0.25, 0.5, 0.75])        # ang vel x 0.25
    assert np.allclose(obs[3:6], [0, 0, -1])               # gravity unscaled
    assert np.allclose(obs[6:9], [1.0, 0.5, 0.5])          # commands scaled
    assert np.allclose(obs[9:21], 0.0)                     # q - default
    assert np.allclose(obs[21:33], 0.05)                   # qd x 0.05
    assert np.allclose(obs[33:45], 7.0)                    # previous action


# --- action to motor targets -----------------------------------------------------

def test_zero_action_holds_default_pose(model, mlp):
    cmds = action_to_targets(np.zeros(12), mlp, model)
    p_des_motor = np.array([c.p_des for c in cmds])
    joint = motor_to_joint(p_des_motor.reshape(4, 3)).reshape(12)
    assert np.allclose(joint, model.default_joint_pose, atol=1e-12)
    assert all(c.tau_ff == 0.0 and c.v_des == 0.0 for c in cmds)


def test_action_scale_linear(model, mlp):
    action = np.zeros(12)
    action[1] = 1.0                      # FL pitch: 0.8 + 0.25 * 1.0 = 1.05
    cmds = action_to_targets(action, mlp, model)
    joint = motor_to_joint(
        np.array([c.p_des for c in cmds]).reshape(4, 3)).reshape(12)
    assert joint[1] == pytest.approx(1.05)


def test_targets_clamped_to_joint_limits(model, mlp):
    action = np.full(12, 100.0)          # way past every limit
    cmds = action_to_targets(action, mlp, model)
    joint = motor_to_joint(
        np.array([c.p_des for c in cmds]).reshape(4, 3)).reshape(12)
    limits = model.joint_limits()
    assert np.all(joint >= limits[:, 0] - 1e-9)
    assert np.all(joint <= limits[:, 1] + 1e-9)


def test_gains_within_motor_ranges(model, mlp):
    cmds = action_to_targets(np.zeros(12), mlp, model,
                             gains=ControlGains(kp=999.0, kd=42.0))
    assert all(c.kp <= model.motor.kp_range[1] for c in cmds)
    assert all(c.kd <= model.motor.kd_range[1] for c in cmds)


# --- scripted trot ----------------------------------------------------------------

def test_trot_diagonal_pairs_share_phase():
    phases, stance = trot_phases(0.1234)
    assert phases[0] == pytest.approx(phases[3])           # FL with RR
    assert phases[1] == pytest.approx(phases[2])           # FR with RL
    assert (phases[0] - phases[1]) % 1.0 == pytest.approx(0.5)


def test_trot_duty_factor():
    # stance fraction over one period should match the 0.55 duty
    ts = np.linspace(0.0, 0.6, 600, endpoint=False)
    stance_frac = np.mean([trot_phases(t)[1][0] for t in ts])
    assert stance_frac == pytest.approx(0.55, abs=0.01)


def test_trot_commands_respect_limits(model):
    rng = np.random.default_rng(0)
    limits = model.joint_limits()
    for _ in range(100):
        t = rng.uniform(0, 10)
        cmd = rng.uniform(-1, 1, 3) * [0.6, 0.4, 0.8]
        cmds = scripted_trot(t, cmd, model)
        joint = motor_to_joint(
            np.array([c.p_des for c in cmds]).reshape(4, 3)).reshape(12)
        assert np.all(joint >= limits[:, 0] - 1e-9)
        assert np.all(joint <= limits[:, 1] + 1e-9)
        assert all(c.tau_ff == 0.0 for c in cmds)


def test_trot_foot_targets_continuous(model):
    # foot targets should never jump: sample densely and bound the step
    from quadstack.kinematics import forward_kinematics
    prev = None
    for t in np.linspace(0, 1.2, 1201):
        cmds = scripted_trot(t, (0.3, 0.1, 0.2), model)
        joint = motor_to_joint(
            np.array([c.p_des for c in cmds]).reshape(4, 3))
        feet = np.array([forward_kinematics(leg, joint[i]).position
                         for i, leg in enumerate(model.legs)])
        if prev is not None:
            assert np.max(np.abs(feet - prev)) < 0.02
        prev = feet
