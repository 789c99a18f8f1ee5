"""6-DoF rigid-body rocket dynamics with analytic Jacobians.

State layout (14): ``[m, r(3), v(3), q(4), w(3)]``; control (3): body-frame
thrust.  The quaternion is scalar-first Hamilton and represents the rotation
taking body vectors to inertial ones, so ``C_BI = R(q)`` and
``C_IB = R(q)^T``.  Kinematics are ``q' = 1/2 q (x) [0, w]`` with ``w`` the
body rate.

All evaluators accept leading batch dimensions, e.g. ``x`` of shape
``(K, 14)`` and ``u`` of shape ``(K, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

NX = 14
NU = 3

M = 0
R = slice(1, 4)
V = slice(4, 7)
Q = slice(7, 11)
W = slice(11, 14)

Q_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])
E_Z = np.array([0.0, 0.0, 1.0])


class InvalidInputError(ValueError):
    pass


class SingularStateError(ValueError):
    pass


@dataclass
class State:
    m: float
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.m], self.r, self.v, self.q, self.w]).astype(float)

    @classmethod
    def from_array(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        return cls(float(x[M]), x[R].copy(), x[V].copy(), x[Q].copy(), x[W].copy())


@dataclass
class VehicleParams:
    """Physical vehicle and environment constants (SI units)."""

    g0: float = 9.81
    isp: float = 282.0
    p_atm: float = 0.0
    s_ne: float = 0.0
    rho: float = 1.225
    s_a: float = 10.0
    c_a: np.ndarray = field(default_factory=lambda: np.diag([3.0, 3.0, 1.0]))
    j_b: np.ndarray = field(default_factory=lambda: np.diag([4e6, 4e6, 1e5]))
    d_t: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -14.0]))
    d_a: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 2.0]))
    g_vec: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    aero_body_frame: bool = False

    def __post_init__(self):
        self.c_a = np.asarray(self.c_a, dtype=float)
        self.j_b = np.asarray(self.j_b, dtype=float)
        self.d_t = np.asarray(self.d_t, dtype=float)
        self.d_a = np.asarray(self.d_a, dtype=float)
        self.g_vec = np.asarray(self.g_vec, dtype=float)
        if self.isp <= 0:
            raise InvalidInputError("isp must be positive")
        if not np.allclose(self.j_b, self.j_b.T) or np.any(np.linalg.eigvalsh(self.j_b) <= 0):
            raise InvalidInputError("j_b must be symmetric positive-definite")
        if np.any(self.c_a != np.diag(np.diag(self.c_a))) or np.any(np.diag(self.c_a) < 0):
            raise InvalidInputError("c_a must be diagonal with nonnegative entries")

    @property
    def alpha(self) -> float:
        return 1.0 / (self.isp * self.g0)

    @property
    def beta(self) -> float:
        return self.alpha * self.p_atm * self.s_ne

    def constants(self) -> "DynamicsConstants":
        return DynamicsConstants(
            alpha=self.alpha,
            beta=self.beta,
            aero_k=0.5 * self.rho * self.s_a,
            c_a=self.c_a,
            j_b=self.j_b,
            d_t=self.d_t,
            d_a=self.d_a,
            g_vec=self.g_vec,
            aero_body_frame=self.aero_body_frame,
        )


@dataclass
class DynamicsConstants:
    """The lumped constants the equations of motion actually use.

    Dimensional constants come from :meth:`VehicleParams.constants`;
    :meth:`scaled` returns the equivalent set for nondimensional variables,
    under which the equations keep exactly the same form.
    """

    alpha: float
    beta: float
    aero_k: float
    c_a: np.ndarray
    j_b: np.ndarray
    d_t: np.ndarray
    d_a: np.ndarray
    g_vec: np.ndarray
    aero_body_frame: bool = False

    def __post_init__(self):
        self.j_inv = np.linalg.inv(self.j_b)

    def scaled(self, u_m: float, u_l: float, u_t: float = 1.0) -> "DynamicsConstants":
        return replace(
            self,
            alpha=self.alpha * u_l / u_t,
            beta=self.beta * u_t / u_m,
            aero_k=self.aero_k * u_l / u_m,
            j_b=self.j_b / (u_m * u_l**2),
            d_t=self.d_t / u_l,
            d_a=self.d_a / u_l,
            g_vec=self.g_vec * u_t**2 / u_l,
        )


@dataclass
class ProblemBounds:
    m_min: float = 22000.0
    t_min: float = 320000.0
    t_max: float = 800000.0
    gamma_c: float = np.deg2rad(20.0)
    theta_max: float = np.deg2rad(80.0)
    omega_max: float = np.deg2rad(30.0)
    vartheta_max: float = np.deg2rad(20.0)
    t_b0: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise InvalidInputError("need 0 < t_min < t_max")
        if not 0 <= self.gamma_c < np.pi / 2:
            raise InvalidInputError("gamma_c must lie in [0, pi/2)")
        if not 0 < self.theta_max <= np.pi / 2:
            raise InvalidInputError("theta_max must lie in (0, pi/2]")
        if not 0 < self.vartheta_max < np.pi / 2:
            raise InvalidInputError("vartheta_max must lie in (0, pi/2)")
        if self.t_b0 is None:
            self.t_b0 = np.array([0.0, 0.0, self.t_min])
        self.t_b0 = np.asarray(self.t_b0, dtype=float)

    def scaled(self, u_m: float, u_l: float, u_t: float = 1.0) -> "ProblemBounds":
        f = u_t**2 / (u_m * u_l)
        return replace(
            self,
            m_min=self.m_min / u_m,
            t_min=self.t_min * f,
            t_max=self.t_max * f,
            omega_max=self.omega_max * u_t,
            t_b0=self.t_b0 * f,
        )


@dataclass
class BoundaryConditions:
    """Initial state; the terminal state is fixed at rest, upright, at the origin."""

    x0: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)

    @staticmethod
    def terminal() -> np.ndarray:
        """Target for r, v, q, w (13 values; final mass is free)."""
        return np.concatenate([np.zeros(3), np.zeros(3), Q_IDENTITY, np.zeros(3)])


def as_constants(p) -> DynamicsConstants:
    return p.constants() if isinstance(p, VehicleParams) else p


# ---------------------------------------------------------------------------
# rotation helpers


def skew(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    out = np.zeros(a.shape[:-1] + (3, 3))
    out[..., 0, 1] = -a[..., 2]
    out[..., 0, 2] = a[..., 1]
    out[..., 1, 0] = a[..., 2]
    out[..., 1, 2] = -a[..., 0]
    out[..., 2, 0] = -a[..., 1]
    out[..., 2, 1] = a[..., 0]
    return out


def _rot(q: np.ndarray) -> np.ndarray:
    # I + 2 s [v]x + 2 [v]x^2; a proper rotation when |q| = 1
    s = q[..., 0, None, None]
    vx = skew(q[..., 1:4])
    return np.eye(3) + 2.0 * s * vx + 2.0 * vx @ vx


def dcm_from_quat(q, tol: float = 1e-6) -> np.ndarray:
    """Return ``C_IB`` (maps inertial-frame vectors into the body frame)."""
    q = np.asarray(q, dtype=float)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > tol):
        raise InvalidInputError("quaternion is not unit norm")
    return np.swapaxes(_rot(q), -1, -2)


def omega_matrix(w: np.ndarray) -> np.ndarray:
    """4x4 skew matrix with ``omega_matrix(w) @ q == q (x) [0, w]``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (4, 4))
    out[..., 0, 1:] = -w
    out[..., 1:, 0] = w
    out[..., 1:, 1:] = -skew(w)
    return out


def quat_multiply(p, q) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    ps, pv = p[..., :1], p[..., 1:]
    qs, qv = q[..., :1], q[..., 1:]
    s = ps * qs - np.sum(pv * qv, axis=-1, keepdims=True)
    v = ps * qv + qs * pv + np.cross(pv, qv)
    return np.concatenate([s, v], axis=-1)


def euler_to_quat(roll, pitch, yaw) -> np.ndarray:
    """Z-Y-X intrinsic (yaw, then pitch, then roll) Euler angles in radians."""
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    qz = np.array([cy, 0.0, 0.0, sy])
    qy = np.array([cp, 0.0, sp, 0.0])
    qx = np.array([cr, sr, 0.0, 0.0])
    return quat_multiply(quat_multiply(qz, qy), qx)


def _d_rot_a(q, a):
    """d(R(q) a)/dq, shape (..., 3, 4)."""
    s = q[..., 0, None, None]
    v = q[..., 1:4]
    out = np.empty(np.broadcast_shapes(q.shape[:-1], a.shape[:-1]) + (3, 4))
    out[..., 0] = 2.0 * np.cross(v, a)
    va = np.sum(v * a, axis=-1)[..., None, None]
    quad = va * np.eye(3) + v[..., :, None] * a[..., None, :] - 2.0 * a[..., :, None] * v[..., None, :]
    out[..., 1:] = -2.0 * s * skew(a) + 2.0 * quad
    return out


def _d_rot_t_a(q, a):
    """d(R(q)^T a)/dq, shape (..., 3, 4)."""
    s = q[..., 0, None, None]
    v = q[..., 1:4]
    out = np.empty(np.broadcast_shapes(q.shape[:-1], a.shape[:-1]) + (3, 4))
    out[..., 0] = -2.0 * np.cross(v, a)
    va = np.sum(v * a, axis=-1)[..., None, None]
    quad = va * np.eye(3) + v[..., :, None] * a[..., None, :] - 2.0 * a[..., :, None] * v[..., None, :]
    out[..., 1:] = 2.0 * s * skew(a) + 2.0 * quad
    return out


def _mv(mat, vec):
    return np.einsum("...ij,...j->...i", mat, vec)


# ---------------------------------------------------------------------------
# forces and equations of motion


def aero_force(v, p, c_ib=None) -> np.ndarray:
    """Inertial aerodynamic force ``-1/2 rho |v| S_A C_A v``.

    ``c_ib`` is only consulted for the body-frame coefficient variant.
    """
    k = as_constants(p)
    v = np.asarray(v, dtype=float)
    speed = np.linalg.norm(v, axis=-1, keepdims=True)
    if not k.aero_body_frame:
        return -k.aero_k * speed * _mv(k.c_a, v)
    if c_ib is None:
        raise InvalidInputError("body-frame aero needs the attitude matrix")
    v_b = _mv(c_ib, v)
    return -k.aero_k * speed * _mv(np.swapaxes(c_ib, -1, -2), _mv(k.c_a, v_b))


def _aero_terms(k: DynamicsConstants, q, v, with_jac: bool):
    """Inertial/body aero force and (optionally) their v- and q-derivatives."""
    rot = _rot(q)
    rot_t = np.swapaxes(rot, -1, -2)
    speed = np.linalg.norm(v, axis=-1)
    safe = np.where(speed > 0, speed, 1.0)
    vhat = v / safe[..., None]
    vhat = np.where((speed > 0)[..., None], vhat, 0.0)
    sp = speed[..., None]
    if not k.aero_body_frame:
        a_i = -k.aero_k * sp * _mv(k.c_a, v)
        a_b = _mv(rot_t, a_i)
        if not with_jac:
            return a_i, a_b, None
        cv = _mv(k.c_a, v)
        dai_dv = -k.aero_k * (cv[..., :, None] * vhat[..., None, :] + sp[..., None] * k.c_a)
        dai_dq = np.zeros(a_i.shape + (4,))
        dab_dv = rot_t @ dai_dv
        dab_dq = _d_rot_t_a(q, a_i)
    else:
        v_b = _mv(rot_t, v)
        cvb = _mv(k.c_a, v_b)
        a_b = -k.aero_k * sp * cvb
        a_i = _mv(rot, a_b)
        if not with_jac:
            return a_i, a_b, None
        dab_dv = -k.aero_k * (cvb[..., :, None] * vhat[..., None, :] + sp[..., None] * (k.c_a @ rot_t))
        dab_dq = -k.aero_k * sp[..., None] * (k.c_a @ _d_rot_t_a(q, v))
        dai_dv = rot @ dab_dv
        dai_dq = _d_rot_a(q, a_b) + rot @ dab_dq
    return a_i, a_b, (dai_dv, dai_dq, dab_dv, dab_dq, rot)


def dynamics(x, u, p) -> np.ndarray:
    """Time derivative of the 14-component state."""
    k = as_constants(p)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    m = x[..., M]
    if np.any(m <= 0):
        raise SingularStateError("mass must be positive")
    v, q, w = x[..., V], x[..., Q], x[..., W]
    a_i, a_b, _ = _aero_terms(k, q, v, with_jac=False)
    rot = _rot(q)
    jw = _mv(k.j_b, w)
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (NX,)))
    out[..., M] = -k.alpha * np.linalg.norm(u, axis=-1) - k.beta
    out[..., R] = v
    out[..., V] = (_mv(rot, u) + a_i) / m[..., None] + k.g_vec
    out[..., Q] = 0.5 * _mv(omega_matrix(w), q)
    torque = np.cross(k.d_t, u) + np.cross(k.d_a, a_b) - np.cross(w, jw)
    out[..., W] = _mv(k.j_inv, torque)
    return out


def scaled_dynamics(x, u, tf, p) -> np.ndarray:
    tf = np.asarray(tf, dtype=float)
    if np.any(tf <= 0):
        raise InvalidInputError("tf must be positive")
    return tf[..., None] * dynamics(x, u, p)


def jacobians(x, u, tf, p):
    """Partials of ``tf * f(x, u)`` w.r.t. x, u and tf.

    Returns ``(A, B, s)`` with shapes ``(..., 14, 14)``, ``(..., 14, 3)``,
    ``(..., 14)``; ``s`` is the unscaled dynamics.
    """
    k = as_constants(p)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    tf = np.asarray(tf, dtype=float)
    if np.any(tf <= 0):
        raise InvalidInputError("tf must be positive")
    s = dynamics(x, u, k)
    batch = s.shape[:-1]
    m = x[..., M]
    v, q, w = x[..., V], x[..., Q], x[..., W]
    a_i, a_b, (dai_dv, dai_dq, dab_dv, dab_dq, rot) = _aero_terms(k, q, v, with_jac=True)
    inv_m = (1.0 / m)[..., None, None]

    A = np.zeros(batch + (NX, NX))
    A[..., R, V] = np.eye(3)
    A[..., V, M] = -(_mv(rot, u) + a_i) / (m**2)[..., None]
    A[..., V, V] = dai_dv * inv_m
    A[..., V, Q] = (_d_rot_a(q, u) + dai_dq) * inv_m
    A[..., Q, Q] = 0.5 * omega_matrix(w)
    xi = np.zeros(batch + (4, 3))
    xi[..., 0, :] = -q[..., 1:4]
    xi[..., 1:, :] = q[..., 0, None, None] * np.eye(3) + skew(q[..., 1:4])
    A[..., Q, W] = 0.5 * xi
    da = k.j_inv @ skew(k.d_a)
    A[..., W, V] = da @ dab_dv
    A[..., W, Q] = da @ dab_dq
    jw = _mv(k.j_b, w)
    A[..., W, W] = -k.j_inv @ (skew(w) @ k.j_b - skew(jw))

    B = np.zeros(batch + (NX, NU))
    tn = np.linalg.norm(u, axis=-1)
    safe = np.where(tn > 0, tn, 1.0)[..., None]
    B[..., M, :] = np.where((tn > 0)[..., None], -k.alpha * u / safe, 0.0)
    B[..., V, :] = rot * inv_m
    B[..., W, :] = k.j_inv @ skew(k.d_t)

    tfx = tf[..., None, None]
    return tfx * A, tfx * B, s


# ---------------------------------------------------------------------------
# constraints


CONSTRAINT_NAMES = (
    "mass",
    "glideslope",
    "tilt",
    "rate",
    "gimbal",
    "thrust_upper",
    "thrust_lower",
)


def constraint_residuals(x, u, bounds: ProblemBounds) -> dict[str, np.ndarray]:
    """Signed residuals of the path constraints; ``<= 0`` means satisfied."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    r, q, w = x[..., R], x[..., Q], x[..., W]
    tn = np.linalg.norm(u, axis=-1)
    return {
        "mass": bounds.m_min - x[..., M],
        "glideslope": np.linalg.norm(r[..., :2], axis=-1) - r[..., 2] / np.tan(bounds.gamma_c),
        "tilt": 2.0 * np.sum(q[..., 1:3] ** 2, axis=-1) - (1.0 - np.cos(bounds.theta_max)),
        "rate": np.max(np.abs(w), axis=-1) - bounds.omega_max,
        "gimbal": np.linalg.norm(u[..., :2], axis=-1) - np.tan(bounds.vartheta_max) * u[..., 2],
        "thrust_upper": tn - bounds.t_max,
        "thrust_lower": bounds.t_min - tn,
    }


class VehicleModel:
    """Binds dynamics constants to the batched model protocol used by discretization."""

    nx = NX
    nu = NU

    def __init__(self, consts: DynamicsConstants):
        self.consts = consts

    def dynamics(self, x, u):
        return dynamics(x, u, self.consts)

    def scaled_dynamics(self, x, u, tf):
        return scaled_dynamics(x, u, tf, self.consts)

    def jacobians(self, x, u, tf):
        return jacobians(x, u, tf, self.consts)
