import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pimtl.dynamics import (DimensionError, InvalidParameterError, JointState, MomentArms,
                            WristDynamicsParams, eom_residual, forward_accel, gravity_torque,
                            joint_torque)

finite = st.floats(-10, 10, allow_nan=False)


def test_zero_forces_give_zero_torque():
    assert joint_torque([0, 0, 0, 0, 0], MomentArms()) == 0.0


def test_single_muscle_torque():
    assert joint_torque([50.0], MomentArms((0.02,))) == pytest.approx(1.0, abs=1e-15)


def test_five_muscle_torque_hand_value():
    # 0.15 + 0.216 - 0.112 - 0.072 - 0.144, summed by hand
    arms = MomentArms((0.015, 0.018, -0.014, -0.012, -0.016))
    assert joint_torque([10, 12, 8, 6, 9], arms) == pytest.approx(0.038, abs=1e-15)


def test_torque_length_mismatch():
    with pytest.raises(DimensionError):
        joint_torque([1.0, 2.0], MomentArms())


def test_torque_batched_rows():
    F = np.arange(10.0).reshape(2, 5)
    arms = MomentArms()
    out = joint_torque(F, arms)
    assert out.shape == (2,)
    assert out[1] == pytest.approx(float(F[1] @ arms.as_array()))


@given(st.lists(finite, min_size=5, max_size=5), st.lists(finite, min_size=5, max_size=5),
       finite, finite)
def test_torque_is_linear(f1, f2, a, b):
    arms = MomentArms()
    lhs = joint_torque(a * np.array(f1) + b * np.array(f2), arms)
    rhs = a * joint_torque(f1, arms) + b * joint_torque(f2, arms)
    assert lhs == pytest.approx(rhs, abs=1e-12 * (1 + abs(lhs)))


def test_gravity_torque_values():
    p = WristDynamicsParams()
    assert gravity_torque(p, 0.0) == 0.0
    assert gravity_torque(p, math.pi / 2) == pytest.approx(0.4905, abs=1e-12)


@given(st.floats(-math.pi, math.pi))
def test_gravity_torque_odd_and_bounded(theta):
    p = WristDynamicsParams()
    assert gravity_torque(p, -theta) == pytest.approx(-gravity_torque(p, theta), abs=1e-15)
    assert abs(gravity_torque(p, theta)) <= p.mass * p.gravity * p.com_length + 1e-15


def test_residual_at_rest_is_zero():
    assert eom_residual(WristDynamicsParams(), JointState(0, 0, 0), 0.0) == 0.0


def test_residual_hand_value():
    p = WristDynamicsParams(inertia=0.004, damping=0.01, mass=0.0)
    # 0.004 * 2 + 0.01 * 1
    assert eom_residual(p, JointState(0.0, 1.0, 2.0), 0.0) == pytest.approx(0.018, abs=1e-15)


def test_forward_accel_examples():
    p = WristDynamicsParams()
    theta = 0.3
    assert forward_accel(p, theta, 0.0, gravity_torque(p, theta)) == pytest.approx(0.0, abs=1e-15)
    q = WristDynamicsParams(inertia=0.004, damping=0.0, mass=0.0)
    assert forward_accel(q, 0.7, 3.0, 0.1) == pytest.approx(25.0, abs=1e-12)


def test_forward_accel_rejects_nonpositive_inertia():
    with pytest.raises(InvalidParameterError):
        forward_accel(WristDynamicsParams.unchecked(inertia=0.0), 0.0, 0.0, 1.0)
    with pytest.raises(InvalidParameterError):
        WristDynamicsParams(inertia=-1.0)


@settings(max_examples=200)
@given(st.floats(1e-3, 1e-1), st.floats(0, 1), st.floats(0.01, 2), st.floats(0.01, 0.3),
       st.floats(-1.5, 1.5), finite, finite)
def test_accel_residual_round_trip(I, b, m, l, theta, theta_dot, tau):
    p = WristDynamicsParams(I, b, m, l)
    acc = forward_accel(p, theta, theta_dot, tau)
    assert abs(eom_residual(p, JointState(theta, theta_dot, acc), tau)) <= 1e-12


def test_moment_arms_reject_nan():
    with pytest.raises(InvalidParameterError):
        MomentArms((0.01, float("nan")))
