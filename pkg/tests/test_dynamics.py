import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warmscp import dynamics as dyn

from conftest import random_scaled_points

P = dyn.VehicleParams()
finite = st.floats(-50, 50, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
quat = st.tuples(finite, finite, finite, finite).filter(lambda t: np.linalg.norm(t) > 1e-3).map(lambda t: np.array(t) / np.linalg.norm(t))


def state(m=30000.0, r=(0, 0, 1500), v=(0, 0, 0), q=dyn.Q_IDENTITY, w=(0, 0, 0)):
    return dyn.State(m, np.array(r, float), np.array(v, float), np.array(q, float), np.array(w, float)).as_array()


# -- rotations ---------------------------------------------------------------


def test_dcm_identity():
    assert np.array_equal(dyn.dcm_from_quat(dyn.Q_IDENTITY), np.eye(3))


def test_dcm_half_turn_about_z():
    assert np.allclose(dyn.dcm_from_quat([0.0, 0.0, 0.0, 1.0]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_dcm_orthogonal_random():
    q = np.random.default_rng(0).normal(size=(100, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    c = dyn.dcm_from_quat(q)
    assert np.max(np.abs(c @ np.swapaxes(c, 1, 2) - np.eye(3))) < 1e-12
    assert np.allclose(np.linalg.det(c), 1.0)


def test_dcm_rejects_non_unit():
    with pytest.raises(dyn.InvalidInputError):
        dyn.dcm_from_quat([1.0, 0.1, 0.0, 0.0])


def test_dcm_maps_inertial_to_body():
    # body x axis yawed +90 deg: inertial y is body x
    q = dyn.euler_to_quat(0.0, 0.0, np.pi / 2)
    assert np.allclose(dyn.dcm_from_quat(q) @ [0.0, 1.0, 0.0], [1.0, 0.0, 0.0])


def test_euler_single_axis():
    q = dyn.euler_to_quat(np.deg2rad(30.0), 0.0, 0.0)
    assert np.allclose(q, [np.cos(np.deg2rad(15)), np.sin(np.deg2rad(15)), 0.0, 0.0], atol=1e-15)


@given(quat, vec3)
def test_kinematics_preserve_norm_exactly(q, w):
    # q^T Omega(w) q = 0 because Omega is skew-symmetric
    om = dyn.omega_matrix(w)
    assert np.allclose(om, -om.T)
    assert abs(q @ om @ q) <= 1e-12 * (1 + np.linalg.norm(w))


@given(quat, vec3)
def test_omega_matches_quaternion_product(q, w):
    assert np.allclose(dyn.omega_matrix(w) @ q, dyn.quat_multiply(q, np.r_[0.0, w]), atol=1e-9)


# -- aerodynamics ------------------------------------------------------------


def test_aero_zero_velocity():
    assert np.array_equal(dyn.aero_force(np.zeros(3), P), np.zeros(3))


def test_aero_descent():
    assert np.allclose(dyn.aero_force([0.0, 0.0, -80.0], P), [0.0, 0.0, 39200.0], rtol=1e-12)


def test_aero_lateral():
    assert np.allclose(dyn.aero_force([10.0, 0.0, 0.0], P), [-1837.5, 0.0, 0.0], rtol=1e-12)


@given(vec3)
def test_aero_opposes_motion(v):
    assert dyn.aero_force(v, P) @ v <= 1e-9


# -- equations of motion -----------------------------------------------------


def test_hover_equilibrium():
    xd = dyn.dynamics(state(), np.array([0.0, 0.0, 294300.0]), P)
    assert np.allclose(xd[dyn.V], 0.0, atol=1e-12)
    assert np.allclose(xd[dyn.W], 0.0, atol=1e-15)


def test_mass_flow_at_min_thrust():
    xd = dyn.dynamics(state(), np.array([0.0, 0.0, 320000.0]), P)
    assert xd[dyn.M] == pytest.approx(-320000.0 / (282.0 * 9.81), rel=1e-12)
    assert xd[dyn.M] == pytest.approx(-115.67, abs=5e-3)


def test_principal_axis_spin():
    xd = dyn.dynamics(state(w=(0.1, 0.0, 0.0)), np.zeros(3), P)
    assert np.allclose(xd[dyn.W], 0.0, atol=1e-15)


def test_zero_mass_rejected():
    with pytest.raises(dyn.SingularStateError):
        dyn.dynamics(state(m=0.0), np.zeros(3), P)


def test_translation_equivariance():
    u = np.array([1000.0, -2000.0, 3.0e5])
    a = dyn.dynamics(state(r=(0, 0, 1500), v=(3, 2, -50), w=(0.01, 0.02, 0.0)), u, P)
    b = dyn.dynamics(state(r=(800, -300, 20), v=(3, 2, -50), w=(0.01, 0.02, 0.0)), u, P)
    assert np.array_equal(a, b)


def test_gimballed_thrust_torque_sign():
    # lateral body-x thrust at a pivot below the CoM pitches about +y? d x T = [0,0,-14] x [T,0,0] = [0,-14T,0]
    xd = dyn.dynamics(state(), np.array([1000.0, 0.0, 3.0e5]), P)
    assert xd[dyn.W][1] == pytest.approx(-14.0 * 1000.0 / 4e6, rel=1e-12)


def test_scaled_dynamics_linear_in_tf():
    x = state(v=(1, 2, -30), w=(0.01, 0, 0.02))
    u = np.array([100.0, 0.0, 3.0e5])
    f = dyn.dynamics(x, u, P)
    assert np.array_equal(dyn.scaled_dynamics(x, u, 1.0, P), f)
    assert np.allclose(dyn.scaled_dynamics(x, u, 18.0, P), 18.0 * f, rtol=1e-15)
    assert np.allclose(dyn.scaled_dynamics(x, u, 2 * 7.3, P), 2 * dyn.scaled_dynamics(x, u, 7.3, P), rtol=1e-15)


def test_scaled_dynamics_rejects_bad_tf():
    with pytest.raises(dyn.InvalidInputError):
        dyn.scaled_dynamics(state(), np.zeros(3), 0.0, P)


def test_body_frame_aero_variant_differs_when_tilted():
    pb = dyn.VehicleParams(aero_body_frame=True)
    q = dyn.euler_to_quat(np.deg2rad(30.0), 0.0, 0.0)
    x = state(v=(0, 0, -80), q=q)
    u = np.array([0.0, 0.0, 3.0e5])
    assert not np.allclose(dyn.dynamics(x, u, pb), dyn.dynamics(x, u, P))
    x_up = state(v=(0, 0, -80))
    assert np.allclose(dyn.dynamics(x_up, u, pb), dyn.dynamics(x_up, u, P))


# -- Jacobians ---------------------------------------------------------------


def test_jacobian_mass_row_of_b():
    x = state()
    _, b, _ = dyn.jacobians(x, np.array([0.0, 0.0, 320000.0]), 18.0, P)
    assert np.allclose(b[dyn.M], [0.0, 0.0, -18.0 * P.alpha], rtol=1e-12)
    assert b[dyn.M, 2] == pytest.approx(-6.5065e-3, abs=2e-7)


def test_jacobian_position_block():
    a, _, _ = dyn.jacobians(state(v=(1, 2, 3)), np.array([0.0, 0.0, 3e5]), 18.0, P)
    assert np.array_equal(a[dyn.R, dyn.V], 18.0 * np.eye(3))


def test_jacobian_s_is_dynamics():
    x = state(v=(1, 2, -40), w=(0.01, 0.0, 0.0))
    u = np.array([2e3, -1e3, 3e5])
    _, _, s = dyn.jacobians(x, u, 18.0, P)
    assert np.array_equal(s, dyn.dynamics(x, u, P))


def _fd_jacobians(f, x, u, tf, h=1e-6):
    a = np.empty((x.size, x.size))
    b = np.empty((x.size, u.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        a[:, j] = (f(x + e, u, tf) - f(x - e, u, tf)) / (2 * h)
    for j in range(u.size):
        e = np.zeros_like(u)
        e[j] = h * 1e-2
        b[:, j] = (f(x, u + e, tf) - f(x, u - e, tf)) / (2 * h * 1e-2)
    s = (f(x, u, tf + h) - f(x, u, tf - h)) / (2 * h)
    return a, b, s


@pytest.mark.parametrize("body_frame", [False, True])
def test_jacobians_match_finite_differences(scaled_nominal, body_frame):
    sp, _ = scaled_nominal
    consts = sp.consts if not body_frame else dataclasses.replace(sp.consts, aero_body_frame=True)
    xs, us, tfs = random_scaled_points(20, seed=3 + body_frame)
    f = lambda x, u, tf: dyn.scaled_dynamics(x, u, tf, consts)  # noqa: E731
    a, b, s = dyn.jacobians(xs, us, tfs, consts)
    for i in range(len(xs)):
        fa, fb, fs = _fd_jacobians(f, xs[i], us[i], tfs[i])
        for ana, num in ((a[i], fa), (b[i], fb), (s[i], fs)):
            scale = max(1.0, np.max(np.abs(num)))
            assert np.max(np.abs(ana - num)) / scale < 1e-6


def test_batched_equals_loop(scaled_nominal):
    sp, _ = scaled_nominal
    xs, us, tfs = random_scaled_points(5, seed=11)
    a, b, s = dyn.jacobians(xs, us, tfs, sp.consts)
    for i in range(5):
        ai, bi, si = dyn.jacobians(xs[i], us[i], tfs[i], sp.consts)
        assert np.allclose(a[i], ai, rtol=1e-14, atol=1e-16)
        assert np.allclose(b[i], bi, rtol=1e-14, atol=1e-16)
        assert np.allclose(s[i], si, rtol=1e-14, atol=1e-16)


# -- constraints -------------------------------------------------------------


def test_glideslope_residual():
    res = dyn.constraint_residuals(state(), np.array([0.0, 0.0, 3e5]), dyn.ProblemBounds())
    assert res["glideslope"] == pytest.approx(-1500.0 / np.tan(np.deg2rad(20.0)), rel=1e-12)
    assert res["glideslope"] == pytest.approx(-4121.2, abs=0.05)


def test_tilt_residual_identity():
    res = dyn.constraint_residuals(state(), np.array([0.0, 0.0, 3e5]), dyn.ProblemBounds())
    assert res["tilt"] == pytest.approx(-(1.0 - np.cos(np.deg2rad(80.0))), rel=1e-12)
    assert res["tilt"] == pytest.approx(-0.82635, abs=1e-5)


@given(st.floats(1.0, 1e6))
def test_vertical_thrust_satisfies_gimbal(t):
    res = dyn.constraint_residuals(state(), np.array([0.0, 0.0, t]), dyn.ProblemBounds())
    assert res["gimbal"] == pytest.approx(-np.tan(np.deg2rad(20.0)) * t)
    assert res["gimbal"] < 0


def test_thrust_bounds_residuals():
    b = dyn.ProblemBounds()
    res = dyn.constraint_residuals(state(), np.array([0.0, 0.0, 9e5]), b)
    assert res["thrust_upper"] == pytest.approx(1e5)
    assert res["thrust_lower"] < 0


def test_bounds_validation():
    with pytest.raises(dyn.InvalidInputError):
        dyn.ProblemBounds(t_min=9e5)
    with pytest.raises(dyn.InvalidInputError):
        dyn.VehicleParams(isp=0.0)
    with pytest.raises(dyn.InvalidInputError):
        dyn.VehicleParams(j_b=np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(dyn.InvalidInputError):
        dyn.VehicleParams(c_a=np.ones((3, 3)))


@settings(max_examples=30)
@given(st.floats(1e3, 5e4), st.floats(1.0, 3e3), st.floats(1.0, 100.0))
def test_scaled_equations_consistent(m0, r0, tf):
    # scaled constants + scaled variables reproduce the scaled dimensional derivative
    from warmscp.subproblem import ScalingUnits

    u = ScalingUnits(m0, r0)
    x = state(m=0.9 * m0, r=(10, -5, r0), v=(3, -1, -50), w=(0.02, -0.01, 0.005))
    th = np.array([2e3, 1e3, 3e5])
    f = dyn.scaled_dynamics(x, th, tf, P)
    fs = dyn.scaled_dynamics(u.scale_states(x), u.scale_controls(th), tf, P.constants().scaled(m0, r0))
    assert np.allclose(u.unscale_states(fs), f, rtol=1e-10, atol=1e-12)
