import numpy as np
import pytest
import yaml

from quadstack.model import (
    ConfigError,
    load_model,
    reference_config_text,
    serialize,
    validate,
)


def test_reference_matches_published_numbers(model):
    assert model.total_mass == 22.9
    assert model.motor.torque_peak == 60.0
    assert model.motor.torque_continuous == 20.0
    for leg in model.legs:
        assert (leg.thigh_len + leg.calf_len) / 2 == pytest.approx(0.30)
    assert model.default_joint_pose.shape == (12,)
    assert len(model.legs) == 4


def test_box_inertia_values(model):
    # uniform box m/12 (a^2 + b^2) with 0.70 x 0.30 x 0.15 dims
    m, (l, w, h) = model.total_mass, model.body_dims
    expected = np.array([m / 12 * (w * w + h * h),
                         m / 12 * (l * l + h * h),
                         m / 12 * (l * l + w * w)])
    assert np.allclose(model.body_inertia, expected, rtol=1e-6)
    assert np.allclose(expected, [0.215, 0.978, 1.107], atol=5e-4)


def test_default_pose_within_limits(model):
    limits = model.joint_limits()
    assert np.all(model.default_joint_pose >= limits[:, 0])
    assert np.all(model.default_joint_pose <= limits[:, 1])


def test_validate_reference_is_clean(model):
    assert validate(model) == []


def test_negative_thigh_rejected():
    doc = yaml.safe_load(reference_config_text())
    doc["leg_geometry"]["thigh_len"] = -0.1
    with pytest.raises(ConfigError, match="thigh_len"):
        load_model(yaml.safe_dump(doc))


def test_pose_outside_limits_names_joint(model):
    bad = model.default_joint_pose.copy()
    bad[7] = 9.0
    model_bad = load_model(serialize(model))
    model_bad.default_joint_pose = bad
    violations = validate(model_bad)
    assert any("joint 7" in v for v in violations)


def test_wrong_joint_count_reported(model):
    broken = load_model(serialize(model))
    broken.default_joint_pose = np.zeros(11)
    violations = validate(broken)
    assert any("12 joints" in v for v in violations)


def test_missing_key_is_parse_error():
    doc = yaml.safe_load(reference_config_text())
    del doc["motor"]["torque_peak"]
    with pytest.raises(ConfigError, match="torque_peak"):
        load_model(yaml.safe_dump(doc))


def test_malformed_yaml_is_parse_error():
    with pytest.raises(ConfigError, match="parse"):
        load_model("robot: [unclosed")


def test_wrong_schema_version_rejected():
    doc = yaml.safe_load(reference_config_text())
    doc["schema_version"] = 99
    with pytest.raises(ConfigError, match="schema_version"):
        load_model(yaml.safe_dump(doc))


def test_serialize_round_trip(model):
    again = load_model(serialize(model))
    assert again.total_mass == model.total_mass
    assert np.array_equal(again.body_dims, model.body_dims)
    assert np.array_equal(again.body_inertia, model.body_inertia)
    assert np.array_equal(again.default_joint_pose, model.default_joint_pose)
    assert again.motor == model.motor
    assert again.control_rates == model.control_rates
    for a, b in zip(again.legs, model.legs):
        assert a.name == b.name and a.side_sign == b.side_sign
        assert np.array_equal(a.hip_offset, b.hip_offset)
        assert (a.abad_link, a.thigh_len, a.calf_len) == \
               (b.abad_link, b.thigh_len, b.calf_len)
        assert np.array_equal(a.joint_limits, b.joint_limits)
    for ta, tb in zip(again.sensor_extrinsics, model.sensor_extrinsics):
        assert np.allclose(ta.translation, tb.translation)
        assert np.allclose(ta.rotation, tb.rotation)


def test_torque_ordering_enforced():
    doc = yaml.safe_load(reference_config_text())
    doc["motor"]["torque_continuous"] = 80.0   # > peak 60
    with pytest.raises(ConfigError, match="torque"):
        load_model(yaml.safe_dump(doc))
