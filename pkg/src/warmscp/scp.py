"""Successive convexification loop with pluggable initial trajectories."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamics as dyn
from .conic import ClarabelBackend
from .discretization import DiscretizationConfig, ReferenceTrajectory, discretize_batch, shoot_segments
from .subproblem import (
    GuidanceProblem,
    ScaledProblem,
    ScpWeights,
    SubproblemSolution,
    build_subproblem,
    is_usable,
    nondimensionalize,
    solve_subproblem,
)

log = logging.getLogger(__name__)

DATASET = "dataset"
ONLINE = "online"


@dataclass
class ScpConfig:
    weights: ScpWeights = field(default_factory=ScpWeights)
    eps_tr: float = 5e-4
    eps_vc: float = 5e-4
    eps_x: float = 1e-2
    criteria_mode: str = ONLINE
    max_iters: int = 20
    tf_guess: float = 18.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = ScpWeights(**self.weights)
        if min(self.eps_tr, self.eps_vc, self.eps_x) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.criteria_mode not in (DATASET, ONLINE):
            raise ValueError(f"unknown criteria mode {self.criteria_mode!r}")


@dataclass
class IterationRecord:
    """One SCP iteration; mass, time and state quantities are nondimensional."""

    iteration: int
    j_tr: float
    j_vc: float
    max_state_diff: float
    status: str
    tf: float
    final_mass: float
    discretize_time: float
    solve_time: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class ScpResult:
    trajectory: ReferenceTrajectory
    iterations: int
    log: list[IterationRecord]
    converged: bool
    reason: str
    max_defect: float = float("nan")
    last_solution: SubproblemSolution | None = None

    @property
    def final_mass(self) -> float:
        return float(self.trajectory.xs[-1, dyn.M])

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(rec.to_json() + "\n")


class ScpAbort(RuntimeError):
    def __init__(self, msg: str, log: list[IterationRecord]):
        super().__init__(msg)
        self.log = log


def straight_line_init(x0: np.ndarray, bounds: dyn.ProblemBounds, n: int, tf_guess: float = 18.0) -> ReferenceTrajectory:
    """Linear blend between the initial and landed states, constant mid-range thrust.

    The attitude is held at the identity quaternion on both ends.
    """
    if n < 2:
        raise ValueError("need at least two nodes")
    x0 = np.asarray(x0, dtype=float)
    x_ini = x0.copy()
    x_ini[dyn.Q] = dyn.Q_IDENTITY
    x_fin = np.zeros(dyn.NX)
    x_fin[dyn.M] = bounds.m_min
    x_fin[dyn.Q] = dyn.Q_IDENTITY
    k = np.arange(n)[:, None]
    xs = (n - 1 - k) / (n - 1) * x_ini + k / (n - 1) * x_fin
    us = np.tile((bounds.t_max - bounds.t_min) / 2.0 * dyn.E_Z, (n, 1))
    return ReferenceTrajectory(tf_guess, xs, us)


def max_state_diff(xs, ref_xs) -> float:
    return float(np.max(np.abs(np.asarray(xs) - np.asarray(ref_xs))))


def check_convergence(solution: SubproblemSolution, ref: ReferenceTrajectory, cfg: ScpConfig) -> tuple[bool, str]:
    """Apply the configured stopping rule (all quantities nondimensional)."""
    if solution.xs.shape != ref.xs.shape:
        raise ValueError("solution and reference node counts differ")
    if cfg.criteria_mode == DATASET:
        j_tr, j_vc = solution.j_tr, solution.j_vc
        ok = j_tr <= cfg.eps_tr and j_vc <= cfg.eps_vc
        return ok, f"J_tr={j_tr:.3e} J_vc={j_vc:.3e}"
    d = max_state_diff(solution.xs, ref.xs)
    return d < cfg.eps_x, f"max|x - x_ref|={d:.3e}"


def run_scp_scaled(
    sp: ScaledProblem,
    init: ReferenceTrajectory,
    cfg: ScpConfig,
    backend=None,
) -> tuple[ReferenceTrajectory, list[IterationRecord], bool, str, SubproblemSolution | None]:
    backend = backend or ClarabelBackend()
    model = sp.model
    dcfg = DiscretizationConfig(sp.n_nodes, sp.n_substeps)
    ref = init.copy()
    if ref.n != sp.n_nodes:
        raise ValueError(f"initial trajectory has {ref.n} nodes, expected {sp.n_nodes}")
    records: list[IterationRecord] = []
    sol = None
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        seg = discretize_batch(ref, dcfg, model)
        t1 = time.perf_counter()
        prog = build_subproblem(seg, ref, sp.bounds, sp.x0, cfg.weights)
        sol = solve_subproblem(prog, backend, n=ref.n, weights=cfg.weights)
        t2 = time.perf_counter()
        if not is_usable(sol.status):
            records.append(
                IterationRecord(it, np.nan, np.nan, np.nan, sol.status, np.nan, np.nan, t1 - t0, sol.solve_time, t2 - t0)
            )
            raise ScpAbort(f"iteration {it}: backend status {sol.raw_status}", records)
        conv, reason = check_convergence(sol, ref, cfg)
        records.append(
            IterationRecord(
                iteration=it,
                j_tr=sol.j_tr,
                j_vc=sol.j_vc,
                max_state_diff=max_state_diff(sol.xs, ref.xs),
                status=sol.status,
                tf=sol.tf,
                final_mass=float(sol.xs[-1, dyn.M]),
                discretize_time=t1 - t0,
                solve_time=sol.solve_time,
                wall_time=t2 - t0,
            )
        )
        log.debug("iter %d %s", it, reason)
        ref = sol.trajectory()
        if conv:
            return ref, records, True, reason, sol
    return ref, records, False, f"max_iters reached ({reason})", sol


def run_scp(problem: GuidanceProblem, init: ReferenceTrajectory, cfg: ScpConfig, backend=None) -> ScpResult:
    """Solve ``problem`` starting from the dimensional reference ``init``."""
    sp, units = nondimensionalize(problem)
    ref, records, conv, reason, sol = run_scp_scaled(sp, units.scale_trajectory(init), cfg, backend)
    defect = float("nan")
    if ref.tf > 0:
        try:
            with np.errstate(all="ignore"):
                ends = shoot_segments(sp.model, ref, sp.n_substeps)
            defect = float(np.max(np.abs(ends - ref.xs[1:])))
        except (ValueError, FloatingPointError):
            pass
    return ScpResult(
        trajectory=units.unscale_trajectory(ref),
        iterations=len(records),
        log=records,
        converged=conv,
        reason=reason,
        max_defect=defect,
        last_solution=sol,
    )
