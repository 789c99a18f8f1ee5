"""Open-loop propagation of solved commands and the paired Monte Carlo study."""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamics as dyn
from .dataset import PerturbationRanges, problem_seed, sample_initial_state
from .discretization import PropagationError
from .mlp import GenerationError, MlpModel, generate_trajectory
from .scp import ONLINE, ScpAbort, ScpConfig, ScpResult, run_scp, straight_line_init
from .subproblem import GuidanceProblem

log = logging.getLogger(__name__)

METHODS = ("scp", "dnn_scp")


class OpenLoopError(RuntimeError):
    pass


@dataclass
class PropagationResult:
    times: np.ndarray
    states: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def foh_control(us: np.ndarray, tf: float, t: float) -> np.ndarray:
    """Linear interpolation of node controls on a uniform grid; held at the ends."""
    n = us.shape[0]
    s = min(max(t / tf, 0.0), 1.0) * (n - 1)
    k = min(int(s), n - 2)
    lam = s - k
    return (1.0 - lam) * us[k] + lam * us[k + 1]


def propagate_open_loop(x0, us, tf: float, params, substeps: int = 10, output_every: int = 1) -> PropagationResult:
    """RK4 integration of the dimensional dynamics under the FOH command.

    ``substeps`` steps are taken per node interval; the quaternion is
    renormalized after each step.  States are recorded every
    ``output_every`` steps plus the final one.
    """
    us = np.asarray(us, dtype=float)
    if us.ndim != 2 or us.shape[0] < 2:
        raise ValueError("need at least two control nodes")
    if not tf > 0 or substeps < 1 or output_every < 1:
        raise ValueError("tf, substeps and output_every must be positive")
    consts = dyn.as_constants(params)
    steps = (us.shape[0] - 1) * substeps
    h = tf / steps
    x = np.asarray(x0, dtype=float).copy()
    times, states = [0.0], [x.copy()]

    def f(t, x):
        if not x[dyn.M] > 0:
            raise OpenLoopError(f"mass reached {x[dyn.M]:.3g} kg at t={t:.4g} s")
        return dyn.dynamics(x, foh_control(us, tf, t), consts)

    for i in range(steps):
        t = i * h
        k1 = f(t, x)
        k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = f(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        x[dyn.Q] /= np.linalg.norm(x[dyn.Q])
        if not x[dyn.M] > 0:
            raise OpenLoopError(f"mass reached {x[dyn.M]:.3g} kg at t={t + h:.4g} s")
        if (i + 1) % output_every == 0 or i == steps - 1:
            times.append((i + 1) * h)
            states.append(x.copy())
    return PropagationResult(np.asarray(times), np.asarray(states))


@dataclass
class TerminalErrors:
    r: float
    v: float
    q: float
    w: float
    q_raw: float  # without sign alignment


def terminal_errors(x_final, target=None) -> TerminalErrors:
    """2-norm terminal errors against the landing state (default: the origin at rest, upright)."""
    x = np.asarray(x_final, dtype=float)
    tgt = dyn.BoundaryConditions.terminal() if target is None else np.asarray(target, dtype=float)
    r_t, v_t, q_t, w_t = tgt[0:3], tgt[3:6], tgt[6:10], tgt[10:13]
    q = x[dyn.Q]
    q_al = -q if np.dot(q, q_t) < 0 else q
    return TerminalErrors(
        r=float(np.linalg.norm(x[dyn.R] - r_t)),
        v=float(np.linalg.norm(x[dyn.V] - v_t)),
        q=float(np.linalg.norm(q_al - q_t)),
        w=float(np.linalg.norm(x[dyn.W] - w_t)),
        q_raw=float(np.linalg.norm(q - q_t)),
    )


def convex_constraint_violation(xs, us, bounds: dyn.ProblemBounds) -> float:
    """Worst violation of the convex path constraints, in units of each constraint's scale."""
    res = dyn.constraint_residuals(xs, us, bounds)
    scale = {
        "mass": bounds.m_min,
        "glideslope": max(1.0, float(np.max(np.abs(xs[:, 3])))),
        "tilt": 1.0,
        "rate": bounds.omega_max,
        "gimbal": bounds.t_max,
        "thrust_upper": bounds.t_max,
    }
    worst = 0.0
    for key, s in scale.items():
        worst = max(worst, float(np.max(res[key])) / s)
    return worst


@dataclass
class CaseRecord:
    case: int
    seed: int
    method: str
    converged: bool
    iterations: int
    generator_time: float
    solve_time: float
    final_mass: float
    tf: float
    err_r: float
    err_v: float
    err_q: float
    err_w: float
    err_q_raw: float
    constraint_violation: float
    fallback: bool = False
    error: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class McSummary:
    records: list[CaseRecord]
    aggregate: dict = field(default_factory=dict)

    def by_method(self, method: str) -> list[CaseRecord]:
        return [r for r in self.records if r.method == method]


def _quantiles(vals) -> dict:
    a = np.asarray([v for v in vals if np.isfinite(v)], dtype=float)
    if a.size == 0:
        return {"n": 0}
    q25, q50, q75 = np.percentile(a, [25, 50, 75])
    return {"n": int(a.size), "mean": float(a.mean()), "median": float(q50), "q25": float(q25), "q75": float(q75), "max": float(a.max())}


def aggregate(records: list[CaseRecord]) -> dict:
    """Per-method statistics; a pure function of the case records."""
    out = {}
    for m in METHODS:
        rs = [r for r in records if r.method == m]
        if not rs:
            continue
        ok = [r for r in rs if r.converged]
        out[m] = {
            "cases": len(rs),
            "converged": len(ok),
            "iterations": _quantiles([r.iterations for r in rs]),
            "solve_time": _quantiles([r.solve_time for r in rs]),
            "total_time": _quantiles([r.solve_time + r.generator_time for r in rs]),
            "final_mass": _quantiles([r.final_mass for r in ok]),
            "err_r": _quantiles([r.err_r for r in ok]),
            "err_v": _quantiles([r.err_v for r in ok]),
            "err_q": _quantiles([r.err_q for r in ok]),
            "err_w": _quantiles([r.err_w for r in ok]),
        }
        if m == "dnn_scp":
            out[m]["fallbacks"] = sum(r.fallback for r in rs)
    return out


@dataclass
class McJob:
    problem: GuidanceProblem
    ranges: PerturbationRanges
    scp_cfg: ScpConfig
    model: MlpModel | None
    master_seed: int
    substeps: int = 10


def _evaluate(job: McJob, problem: GuidanceProblem, case: int, seed: int, method: str, init, gen_time: float, fallback: bool) -> CaseRecord:
    nan = float("nan")
    t0 = time.perf_counter()
    try:
        res: ScpResult = run_scp(problem, init, job.scp_cfg)
    except (ScpAbort, PropagationError, ValueError) as exc:
        iters = len(exc.log) if isinstance(exc, ScpAbort) else 0
        return CaseRecord(case, seed, method, False, iters, gen_time, time.perf_counter() - t0, nan, nan, nan, nan, nan, nan, nan, nan, fallback, str(exc))
    solve_time = time.perf_counter() - t0
    traj = res.trajectory
    err = TerminalErrors(nan, nan, nan, nan, nan)
    msg = "" if res.converged else res.reason
    try:
        prop = propagate_open_loop(problem.x0, traj.us, traj.tf, problem.params, job.substeps)
        err = terminal_errors(prop.terminal)
    except OpenLoopError as exc:
        msg = str(exc)
    return CaseRecord(
        case=case,
        seed=seed,
        method=method,
        converged=bool(res.converged),
        iterations=res.iterations,
        generator_time=gen_time,
        solve_time=solve_time,
        final_mass=res.final_mass,
        tf=float(traj.tf),
        err_r=err.r,
        err_v=err.v,
        err_q=err.q,
        err_w=err.w,
        err_q_raw=err.q_raw,
        constraint_violation=convex_constraint_violation(traj.xs, traj.us, problem.bounds),
        fallback=fallback,
        error=msg,
    )


def run_case(job: McJob, case: int) -> list[CaseRecord]:
    """Solve one sampled problem with both initializations (paired)."""
    seed = problem_seed(job.master_seed, case)
    x0 = sample_initial_state(job.problem.x0, job.ranges, seed)
    p = GuidanceProblem(job.problem.params, job.problem.bounds, x0, job.problem.n_nodes, job.problem.n_substeps)
    n, tf0 = p.n_nodes, job.scp_cfg.tf_guess
    straight = straight_line_init(x0, p.bounds, n, tf0)
    out = [_evaluate(job, p, case, seed, "scp", straight, 0.0, False)]
    if job.model is not None:
        t0 = time.perf_counter()
        fallback = False
        try:
            init = generate_trajectory(job.model, x0, p.bounds.t_b0, n).to_reference(tf0)
        except GenerationError:
            init, fallback = straight, True
        out.append(_evaluate(job, p, case, seed, "dnn_scp", init, time.perf_counter() - t0, fallback))
    return out


_WORKER_JOB: McJob | None = None


def _init_worker(job):
    global _WORKER_JOB
    _WORKER_JOB = job


def _worker(case):
    return run_case(_WORKER_JOB, case)


def run_monte_carlo(
    problem: GuidanceProblem,
    ranges: PerturbationRanges,
    n_cases: int,
    scp_cfg: ScpConfig,
    model: MlpModel | None,
    jobs: int = 1,
    master_seed: int = 1,
    records_path=None,
    progress=None,
) -> McSummary:
    """Paired comparison of straight-line and generator-initialized SCP."""
    if scp_cfg.criteria_mode != ONLINE:
        raise ValueError("Monte Carlo runs use the online convergence criterion")
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    job = McJob(problem, ranges, scp_cfg, model, int(master_seed))
    records: list[CaseRecord] = []
    fh = open(records_path, "w") if records_path is not None else None
    try:

        def collect(recs):
            records.extend(recs)
            if fh:
                for r in recs:
                    fh.write(r.to_json() + "\n")
            if progress:
                progress(recs[0].case + 1, n_cases)

        if jobs <= 1:
            for i in range(n_cases):
                collect(run_case(job, i))
        else:
            ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
            with ctx.Pool(jobs, initializer=_init_worker, initargs=(job,)) as pool:
                for recs in pool.imap(_worker, range(n_cases)):
                    collect(recs)
    finally:
        if fh:
            fh.close()
    return McSummary(records, aggregate(records))


def load_case_records(path) -> list[CaseRecord]:
    with open(path) as fh:
        return [CaseRecord(**json.loads(line)) for line in fh if line.strip()]
