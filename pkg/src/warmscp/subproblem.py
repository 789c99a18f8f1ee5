"""Nondimensionalization and second-order cone assembly of the SCP subproblem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import dynamics as dyn
from .conic import ConicProgram, ConicResult, ClarabelBackend, OPTIMAL, NEAR_OPTIMAL
from .discretization import ReferenceTrajectory, SegmentBatch


class ScalingError(ValueError):
    pass


class LinearizationError(ValueError):
    pass


@dataclass(frozen=True)
class ScalingUnits:
    u_m: float
    u_l: float
    u_t: float = 1.0

    def state_factors(self) -> np.ndarray:
        f = np.ones(dyn.NX)
        f[dyn.M] = 1.0 / self.u_m
        f[dyn.R] = 1.0 / self.u_l
        f[dyn.V] = self.u_t / self.u_l
        f[dyn.W] = self.u_t
        return f

    def control_factor(self) -> float:
        return self.u_t**2 / (self.u_m * self.u_l)

    def scale_states(self, xs):
        return np.asarray(xs, dtype=float) * self.state_factors()

    def unscale_states(self, xs):
        return np.asarray(xs, dtype=float) / self.state_factors()

    def scale_controls(self, us):
        return np.asarray(us, dtype=float) * self.control_factor()

    def unscale_controls(self, us):
        return np.asarray(us, dtype=float) / self.control_factor()

    def scale_trajectory(self, ref: ReferenceTrajectory) -> ReferenceTrajectory:
        return ReferenceTrajectory(ref.tf / self.u_t, self.scale_states(ref.xs), self.scale_controls(ref.us))

    def unscale_trajectory(self, ref: ReferenceTrajectory) -> ReferenceTrajectory:
        return ReferenceTrajectory(ref.tf * self.u_t, self.unscale_states(ref.xs), self.unscale_controls(ref.us))


@dataclass
class GuidanceProblem:
    """A complete landing problem in SI units."""

    params: dyn.VehicleParams
    bounds: dyn.ProblemBounds
    x0: np.ndarray
    n_nodes: int = 30
    n_substeps: int = 10

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0[dyn.M] < self.bounds.m_min:
            raise ValueError("initial mass below m_min")


@dataclass
class ScaledProblem:
    consts: dyn.DynamicsConstants
    bounds: dyn.ProblemBounds
    x0: np.ndarray
    units: ScalingUnits
    n_nodes: int
    n_substeps: int

    @property
    def model(self) -> dyn.VehicleModel:
        return dyn.VehicleModel(self.consts)


def nondimensionalize(problem: GuidanceProblem) -> tuple[ScaledProblem, ScalingUnits]:
    u_l = float(np.linalg.norm(problem.x0[dyn.R]))
    if not u_l > 0:
        raise ScalingError("initial position at the origin gives a degenerate length unit")
    units = ScalingUnits(u_m=float(problem.x0[dyn.M]), u_l=u_l, u_t=1.0)
    scaled = ScaledProblem(
        consts=problem.params.constants().scaled(units.u_m, units.u_l, units.u_t),
        bounds=problem.bounds.scaled(units.u_m, units.u_l, units.u_t),
        x0=units.scale_states(problem.x0),
        units=units,
        n_nodes=problem.n_nodes,
        n_substeps=problem.n_substeps,
    )
    return scaled, units


@dataclass
class ScpWeights:
    w_tr: float = 0.5
    w_vc: float = 1e5

    def __post_init__(self):
        if self.w_tr <= 0 or self.w_vc <= 0:
            raise ValueError("weights must be positive")


@dataclass
class SubproblemSolution:
    tf: float
    xs: np.ndarray
    us: np.ndarray
    virtual: np.ndarray
    sigmas: np.ndarray
    cost: float
    status: str
    raw_status: str = ""
    solve_time: float = 0.0
    weights: ScpWeights | None = None

    @property
    def j_tr(self) -> float:
        return self.weights.w_tr * float(np.sum(self.sigmas))

    @property
    def j_vc(self) -> float:
        return self.weights.w_vc * float(np.sum(np.abs(self.virtual)))

    def trajectory(self) -> ReferenceTrajectory:
        return ReferenceTrajectory(self.tf, self.xs, self.us)


def variable_layout(n: int, nx: int = dyn.NX, nu: int = dyn.NU) -> dict[str, slice]:
    sizes = [("tf", 1), ("x", n * nx), ("u", n * nu), ("nu", (n - 1) * nx), ("nu_abs", (n - 1) * nx), ("sigma", n)]
    out, i = {}, 0
    for name, size in sizes:
        out[name] = slice(i, i + size)
        i += size
    return out


def tilt_cone_radius(theta_max: float) -> float:
    """Bound on ``|(q_x, q_y)|`` equivalent to a tilt angle of at most ``theta_max``."""
    return float(np.sqrt((1.0 - np.cos(theta_max)) / 2.0))


class _Rows:
    """Accumulates sparse rows of one cone family."""

    def __init__(self):
        self.rows, self.cols, self.vals, self.b = [], [], [], []
        self.n = 0

    def add(self, cols, vals, b=0.0):
        cols = np.atleast_1d(cols)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), cols.shape)
        self.rows.append(np.full(cols.shape, self.n))
        self.cols.append(cols)
        self.vals.append(vals)
        self.b.append(float(b))
        self.n += 1

    def add_block(self, cols: np.ndarray, mat: np.ndarray, b: np.ndarray):
        """Append ``len(b)`` rows with coefficient block ``mat`` on ``cols``."""
        m = mat.shape[0]
        rr = np.repeat(np.arange(self.n, self.n + m), mat.shape[1])
        cc = np.tile(cols, m)
        self.rows.append(rr)
        self.cols.append(cc)
        self.vals.append(mat.ravel())
        self.b.extend(np.asarray(b, dtype=float).tolist())
        self.n += m

    def stack(self, offset: int):
        if not self.n:
            return np.empty(0, int), np.empty(0, int), np.empty(0), np.empty(0)
        return (
            np.concatenate(self.rows) + offset,
            np.concatenate(self.cols),
            np.concatenate(self.vals),
            np.asarray(self.b),
        )


def build_subproblem(
    segments: SegmentBatch,
    ref: ReferenceTrajectory,
    bounds: dyn.ProblemBounds,
    x0: np.ndarray,
    weights: ScpWeights,
) -> ConicProgram:
    """Assemble the convex subproblem about ``ref`` (all nondimensional).

    Rows are written as ``b - A z`` in the cone.  The trust region
    ``|dx|^2 + |du|^2 <= sigma`` is encoded as the standard cone
    ``|(2 dx, 2 du, 1 - sigma)| <= 1 + sigma``.
    """
    n = ref.n
    nx, nu = dyn.NX, dyn.NU
    lay = variable_layout(n)
    nvar = lay["sigma"].stop
    itf = lay["tf"].start

    def xi(k, j=None):
        base = lay["x"].start + k * nx
        return base + (np.arange(nx) if j is None else np.atleast_1d(np.arange(nx)[j]))

    def ui(k):
        return lay["u"].start + k * nu + np.arange(nu)

    def nui(k):
        return lay["nu"].start + k * nx + np.arange(nx)

    def ti(k):
        return lay["nu_abs"].start + k * nx + np.arange(nx)

    def si(k):
        return lay["sigma"].start + k

    un = np.linalg.norm(ref.us, axis=1)
    if np.any(un <= 0):
        raise LinearizationError(f"zero reference thrust at node {int(np.argmin(un))}")

    eq, nn, socs = _Rows(), _Rows(), []

    # boundary conditions
    eq.add_block(xi(0), np.eye(nx), x0)
    eq.add_block(ui(0), np.eye(nu), bounds.t_b0)
    eq.add_block(xi(n - 1)[1:], np.eye(nx - 1), dyn.BoundaryConditions.terminal())

    # dynamics with virtual control: x_{k+1} - A x_k - Bh u_k - B u_{k+1} - s tf - nu_k = c_k
    eye = np.eye(nx)
    for k in range(n - 1):
        cols = np.concatenate([xi(k + 1), xi(k), ui(k), ui(k + 1), [itf], nui(k)])
        mat = np.hstack([eye, -segments.a[k], -segments.bhat[k], -segments.b[k], -segments.s[k][:, None], -eye])
        eq.add_block(cols, mat, segments.c[k])

    # |nu| slacks: t - nu >= 0, t + nu >= 0
    for k in range(n - 1):
        for j in range(nx):
            nn.add([ti(k)[j], nui(k)[j]], [-1.0, 1.0])
            nn.add([ti(k)[j], nui(k)[j]], [-1.0, -1.0])

    tan_g = np.tan(bounds.vartheta_max)
    cot_gs = 1.0 / np.tan(bounds.gamma_c) if bounds.gamma_c > 0 else None
    tilt_r = tilt_cone_radius(bounds.theta_max)

    def soc(cols_rows, b):
        r = _Rows()
        for cols, vals, bb in zip(cols_rows[0], cols_rows[1], b):
            r.add(cols, vals, bb)
        socs.append(r)

    for k in range(n):
        x = xi(k)
        u = ui(k)
        # mass floor
        nn.add(x[dyn.M], -1.0, -bounds.m_min)
        # rate box
        for j in range(3):
            nn.add(x[dyn.W][j], 1.0, bounds.omega_max)
            nn.add(x[dyn.W][j], -1.0, bounds.omega_max)
        # linearized thrust lower bound: H u >= T_min
        h = ref.us[k] / un[k]
        nn.add(u, -h, -bounds.t_min)
        nn.add(si(k), -1.0)
        # glideslope |r_xy| <= cot(gamma) r_z
        r = x[dyn.R]
        if cot_gs is not None:
            soc(([[r[2]], [r[0]], [r[1]]], [[-cot_gs], [-1.0], [-1.0]]), [0.0, 0.0, 0.0])
        # tilt |q_xy| <= sqrt((1 - cos theta)/2)
        q = x[dyn.Q]
        soc(([[q[0]], [q[1]], [q[2]]], [[0.0], [-1.0], [-1.0]]), [tilt_r, 0.0, 0.0])
        # gimbal |u_xy| <= tan(vartheta) u_z
        soc(([[u[2]], [u[0]], [u[1]]], [[-tan_g], [-1.0], [-1.0]]), [0.0, 0.0, 0.0])
        # thrust upper |u| <= T_max
        soc(([[u[0]], [u[0]], [u[1]], [u[2]]], [[0.0], [-1.0], [-1.0], [-1.0]]), [bounds.t_max, 0.0, 0.0, 0.0])
        # trust region
        tr = _Rows()
        tr.add(si(k), -1.0, 1.0)
        for j in range(nx):
            tr.add(x[j], -2.0, -2.0 * ref.xs[k, j])
        for j in range(nu):
            tr.add(u[j], -2.0, -2.0 * ref.us[k, j])
        tr.add(si(k), 1.0, 1.0)
        socs.append(tr)

    parts, off = [], 0
    for blk in [eq, nn, *socs]:
        parts.append(blk.stack(off))
        off += blk.n
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    b = np.concatenate([p[3] for p in parts])
    a = sp.csc_matrix((vals, (rows, cols)), shape=(off, nvar))
    a.eliminate_zeros()

    c = np.zeros(nvar)
    c[xi(n - 1)[dyn.M]] = -1.0
    c[lay["sigma"]] = weights.w_tr
    c[lay["nu_abs"]] = weights.w_vc
    return ConicProgram(
        c=c,
        a=a,
        b=b,
        n_eq=eq.n,
        n_nonneg=nn.n,
        soc_dims=[s.n for s in socs],
        var_slices=lay,
    )


def extract_solution(prog: ConicProgram, res: ConicResult, n: int, weights: ScpWeights) -> SubproblemSolution:
    lay = prog.var_slices
    if res.x is None:
        return SubproblemSolution(
            tf=float("nan"),
            xs=np.full((n, dyn.NX), np.nan),
            us=np.full((n, dyn.NU), np.nan),
            virtual=np.full((n - 1, dyn.NX), np.nan),
            sigmas=np.full(n, np.nan),
            cost=float("nan"),
            status=res.status,
            raw_status=res.raw_status,
            solve_time=res.solve_time,
            weights=weights,
        )
    z = res.x
    return SubproblemSolution(
        tf=float(z[lay["tf"]][0]),
        xs=z[lay["x"]].reshape(n, dyn.NX).copy(),
        us=z[lay["u"]].reshape(n, dyn.NU).copy(),
        virtual=z[lay["nu"]].reshape(n - 1, dyn.NX).copy(),
        sigmas=z[lay["sigma"]].copy(),
        cost=res.objective,
        status=res.status,
        raw_status=res.raw_status,
        solve_time=res.solve_time,
        weights=weights,
    )


def solve_subproblem(prog: ConicProgram, backend=None, n: int | None = None, weights: ScpWeights | None = None) -> SubproblemSolution:
    backend = backend or ClarabelBackend()
    lay = prog.var_slices
    if n is None:
        n = lay["sigma"].stop - lay["sigma"].start
    res = backend.solve(prog)
    return extract_solution(prog, res, n, weights or ScpWeights())


def is_usable(status: str) -> bool:
    return status in (OPTIMAL, NEAR_OPTIMAL)
