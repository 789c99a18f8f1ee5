"""Second-order cone program container and solver backends.

Programs are stored in the standard form shared by Clarabel and CVXOPT::

    minimize    c^T x
    subject to  b - A x  in  K = {0}^z x R_+^l x Q^{n_1} x ... x Q^{n_p}

Rows of ``A`` are ordered by cone: equalities, then nonnegative rows, then
each second-order cone block (first row is the cone's "t" component).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
NEAR_OPTIMAL = "near-optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"


class SolverError(RuntimeError):
    def __init__(self, status: str, raw: str):
        super().__init__(f"conic backend returned {raw} ({status})")
        self.status = status
        self.raw = raw


@dataclass
class ConicProgram:
    c: np.ndarray
    a: sp.csc_matrix
    b: np.ndarray
    n_eq: int
    n_nonneg: int
    soc_dims: list[int]
    var_slices: dict[str, slice] = field(default_factory=dict)
    cost_offset: float = 0.0

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    def check(self):
        m = self.n_eq + self.n_nonneg + sum(self.soc_dims)
        if self.a.shape != (m, self.n_vars) or self.b.shape != (m,):
            raise ValueError("inconsistent conic program dimensions")
        used = np.zeros(self.n_vars, dtype=bool)
        used[np.unique(self.a.tocoo().col)] = True
        used |= self.c != 0
        if not used.all():
            raise ValueError(f"variables {np.flatnonzero(~used)[:5]} appear nowhere")

    def residuals(self, x: np.ndarray) -> dict[str, float]:
        """Worst violation of each cone family at ``x``."""
        s = self.b - self.a @ x
        out = {"eq": float(np.max(np.abs(s[: self.n_eq]), initial=0.0))}
        nn = s[self.n_eq : self.n_eq + self.n_nonneg]
        out["nonneg"] = float(max(0.0, -nn.min(initial=0.0)))
        i = self.n_eq + self.n_nonneg
        worst = 0.0
        for d in self.soc_dims:
            blk = s[i : i + d]
            worst = max(worst, float(np.linalg.norm(blk[1:]) - blk[0]))
            i += d
        out["soc"] = max(0.0, worst)
        return out

    def dump(self, path) -> None:
        """Write a plain-text sparse dump for offline reproduction.

        Layout: a header line ``n_vars m n_eq n_nonneg n_soc``, the SOC
        dimensions, then ``c`` entries (``c i value``), ``b`` entries
        (``b i value``) and ``A`` triplets (``A row col value``), all in
        full precision.
        """
        coo = self.a.tocoo()
        with open(path, "w") as fh:
            fh.write(f"{self.n_vars} {self.a.shape[0]} {self.n_eq} {self.n_nonneg} {len(self.soc_dims)}\n")
            fh.write(" ".join(str(d) for d in self.soc_dims) + "\n")
            for i in np.flatnonzero(self.c):
                fh.write(f"c {i} {float(self.c[i])!r}\n")
            for i in np.flatnonzero(self.b):
                fh.write(f"b {i} {float(self.b[i])!r}\n")
            for r, cidx, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"A {r} {cidx} {float(v)!r}\n")

    @classmethod
    def load(cls, path) -> "ConicProgram":
        with open(path) as fh:
            n, m, n_eq, n_nn, _ = (int(t) for t in fh.readline().split())
            soc = [int(t) for t in fh.readline().split()]
            c = np.zeros(n)
            b = np.zeros(m)
            rows, cols, vals = [], [], []
            for line in fh:
                tag, *rest = line.split()
                if tag == "c":
                    c[int(rest[0])] = float(rest[1])
                elif tag == "b":
                    b[int(rest[0])] = float(rest[1])
                else:
                    rows.append(int(rest[0]))
                    cols.append(int(rest[1]))
                    vals.append(float(rest[2]))
        a = sp.csc_matrix((vals, (rows, cols)), shape=(m, n))
        return cls(c=c, a=a, b=b, n_eq=n_eq, n_nonneg=n_nn, soc_dims=soc)


@dataclass
class ConicResult:
    x: np.ndarray | None
    status: str
    raw_status: str
    objective: float
    solve_time: float


class ClarabelBackend:
    """Default interior-point backend."""

    name = "clarabel"

    def __init__(self, tol: float = 1e-9, max_iter: int = 200, verbose: bool = False):
        self.tol = tol
        self.max_iter = max_iter
        self.verbose = verbose

    def solve(self, prog: ConicProgram) -> ConicResult:
        import clarabel

        cones = []
        if prog.n_eq:
            cones.append(clarabel.ZeroConeT(prog.n_eq))
        if prog.n_nonneg:
            cones.append(clarabel.NonnegativeConeT(prog.n_nonneg))
        cones.extend(clarabel.SecondOrderConeT(d) for d in prog.soc_dims)
        settings = clarabel.DefaultSettings()
        settings.verbose = self.verbose
        settings.max_iter = self.max_iter
        settings.tol_gap_abs = self.tol
        settings.tol_gap_rel = self.tol
        settings.tol_feas = self.tol
        p = sp.csc_matrix((prog.n_vars, prog.n_vars))
        t0 = time.perf_counter()
        sol = clarabel.DefaultSolver(p, prog.c, sp.csc_matrix(prog.a), prog.b, cones, settings).solve()
        dt = time.perf_counter() - t0
        raw = str(sol.status)
        if raw.endswith("AlmostSolved"):
            status = NEAR_OPTIMAL
        elif raw.endswith("Solved"):
            status = OPTIMAL
        elif "Infeasible" in raw:
            status = INFEASIBLE
        else:
            status = NUMERICAL_FAILURE
        x = np.asarray(sol.x) if status in (OPTIMAL, NEAR_OPTIMAL) else None
        obj = float(prog.c @ x) + prog.cost_offset if x is not None else float("nan")
        return ConicResult(x, status, raw, obj, dt)


class CvxoptBackend:
    """Reference backend used to cross-check Clarabel on small programs."""

    name = "cvxopt"

    def __init__(self, tol: float = 1e-9, max_iter: int = 200):
        self.tol = tol
        self.max_iter = max_iter

    def solve(self, prog: ConicProgram) -> ConicResult:
        import cvxopt
        from cvxopt import solvers

        def spmat(m):
            m = m.tocoo()
            return cvxopt.spmatrix(m.data.tolist(), m.row.tolist(), m.col.tolist(), m.shape)

        a = sp.csr_matrix(prog.a)
        ne = prog.n_eq
        opts = {
            "show_progress": False,
            "abstol": self.tol,
            "reltol": self.tol,
            "feastol": self.tol,
            "maxiters": self.max_iter,
        }
        kw = {}
        if ne:
            kw = {"A": spmat(a[:ne]), "b": cvxopt.matrix(prog.b[:ne])}
        t0 = time.perf_counter()
        res = solvers.conelp(
            cvxopt.matrix(prog.c),
            spmat(a[ne:]),
            cvxopt.matrix(prog.b[ne:]),
            {"l": prog.n_nonneg, "q": list(prog.soc_dims), "s": []},
            options=opts,
            **kw,
        )
        dt = time.perf_counter() - t0
        raw = res["status"]
        if raw == "optimal":
            status = OPTIMAL
        elif raw.endswith("infeasible"):
            status = INFEASIBLE
        elif res["x"] is not None and res.get("relative gap") is not None and res["relative gap"] < 1e-5:
            status = NEAR_OPTIMAL
        else:
            status = NUMERICAL_FAILURE
        x = np.array(res["x"]).ravel() if status in (OPTIMAL, NEAR_OPTIMAL) else None
        obj = float(prog.c @ x) + prog.cost_offset if x is not None else float("nan")
        return ConicResult(x, status, raw, obj, dt)


BACKENDS = {"clarabel": ClarabelBackend, "cvxopt": CvxoptBackend}


def make_backend(name: str = "clarabel", **kw):
    try:
        return BACKENDS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown conic backend {name!r}") from None
