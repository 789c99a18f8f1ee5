"""First-order-hold discretization of the time-scaled dynamics.

Each subinterval ``[tau_k, tau_k+1]`` is handled independently (multiple
shooting): the reference state is re-integrated from the node value under
the interpolated reference control, and alongside it the state transition
matrix, its inverse and the four convolution integrals are accumulated with
fixed-step RK4.  All segments are advanced together as one batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PropagationError(RuntimeError):
    def __init__(self, segment: int, msg: str = "non-finite value during segment propagation"):
        super().__init__(f"segment {segment}: {msg}")
        self.segment = segment


@dataclass
class ReferenceTrajectory:
    tf: float
    xs: np.ndarray
    us: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.us = np.asarray(self.us, dtype=float)
        if self.xs.shape[0] < 2 or self.xs.shape[0] != self.us.shape[0]:
            raise ValueError("need N >= 2 nodes with matching state/control counts")
        if self.tf <= 0:
            raise ValueError("tf must be positive")

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def taus(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)

    def copy(self) -> "ReferenceTrajectory":
        return ReferenceTrajectory(float(self.tf), self.xs.copy(), self.us.copy())


@dataclass
class LinearizedSegment:
    a_k: np.ndarray
    bhat_k: np.ndarray
    b_k: np.ndarray
    s_k: np.ndarray
    c_k: np.ndarray


@dataclass
class SegmentBatch:
    """Discrete matrices for a set of segments, stacked along axis 0."""

    a: np.ndarray
    bhat: np.ndarray
    b: np.ndarray
    s: np.ndarray
    c: np.ndarray
    x_end: np.ndarray  # nonlinear reference flow at each segment end

    def __len__(self):
        return self.a.shape[0]

    def __getitem__(self, i) -> LinearizedSegment:
        return LinearizedSegment(self.a[i], self.bhat[i], self.b[i], self.s[i], self.c[i])


@dataclass
class DiscretizationConfig:
    n_nodes: int = 30
    n_substeps: int = 10

    def __post_init__(self):
        if self.n_substeps < 1:
            raise ValueError("n_substeps must be >= 1")
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be >= 2")


def foh_weights(tau, tau_k, tau_k1):
    """Return ``(eta_hat, eta)``, the hold weights of the left and right nodes."""
    width = tau_k1 - tau_k
    if not width > 0:
        raise ValueError("degenerate interval")
    return (tau_k1 - tau) / width, (tau - tau_k) / width


def _propagate(model, ref: ReferenceTrajectory, ks: np.ndarray, n_substeps: int) -> SegmentBatch:
    nx, nu = model.nx, model.nu
    ks = np.asarray(ks, dtype=int)
    nseg = len(ks)
    dtau = 1.0 / (ref.n - 1)
    h = dtau / n_substeps
    tf = np.full(nseg, float(ref.tf))
    u0 = ref.us[ks]
    u1 = ref.us[ks + 1]

    # packed state: x | Phi | Psi=Phi^-1 | int Psi B eta_hat | int Psi B eta | int Psi s | int Psi c
    sizes = [nx, nx * nx, nx * nx, nx * nu, nx * nu, nx, nx]
    offs = np.cumsum([0] + sizes)

    def unpack(y):
        parts = [y[:, offs[i]:offs[i + 1]] for i in range(len(sizes))]
        return (
            parts[0],
            parts[1].reshape(nseg, nx, nx),
            parts[2].reshape(nseg, nx, nx),
        )

    def rhs(y, lam):
        # lam in [0, 1] is the fraction through the segment
        x, phi, psi = unpack(y)
        u = (1.0 - lam) * u0 + lam * u1
        a, b, s = model.jacobians(x, u, tf)
        f = tf[:, None] * s
        c = -np.einsum("kij,kj->ki", a, x) - np.einsum("kij,kj->ki", b, u)
        psi_b = psi @ b
        return np.concatenate(
            [
                f,
                (a @ phi).reshape(nseg, -1),
                (-psi @ a).reshape(nseg, -1),
                ((1.0 - lam) * psi_b).reshape(nseg, -1),
                (lam * psi_b).reshape(nseg, -1),
                np.einsum("kij,kj->ki", psi, s),
                np.einsum("kij,kj->ki", psi, c),
            ],
            axis=1,
        )

    eye = np.broadcast_to(np.eye(nx).ravel(), (nseg, nx * nx))
    y = np.concatenate(
        [ref.xs[ks], eye, eye, np.zeros((nseg, offs[-1] - offs[3]))],
        axis=1,
    )
    dl = 1.0 / n_substeps
    for i in range(n_substeps):
        lam = i * dl
        k1 = rhs(y, lam)
        k2 = rhs(y + 0.5 * h * k1, lam + 0.5 * dl)
        k3 = rhs(y + 0.5 * h * k2, lam + 0.5 * dl)
        k4 = rhs(y + h * k3, lam + dl)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        bad = ~np.all(np.isfinite(y), axis=1)
        if np.any(bad):
            raise PropagationError(int(ks[np.argmax(bad)]))

    parts = [y[:, offs[i]:offs[i + 1]] for i in range(len(sizes))]
    x_end = parts[0]
    a_k = parts[1].reshape(nseg, nx, nx)
    return SegmentBatch(
        a=a_k,
        bhat=a_k @ parts[3].reshape(nseg, nx, nu),
        b=a_k @ parts[4].reshape(nseg, nx, nu),
        s=np.einsum("kij,kj->ki", a_k, parts[5]),
        c=np.einsum("kij,kj->ki", a_k, parts[6]),
        x_end=x_end,
    )


def propagate_segment(ref: ReferenceTrajectory, k: int, cfg: DiscretizationConfig, model) -> LinearizedSegment:
    """Discrete matrices of segment ``k`` (0-based, ``0 <= k <= N-2``)."""
    if not 0 <= k <= ref.n - 2:
        raise IndexError(f"segment index {k} out of range")
    return discretize_batch(ref, cfg, model, ks=[k])[0]


def discretize_batch(ref: ReferenceTrajectory, cfg: DiscretizationConfig, model, ks=None) -> SegmentBatch:
    ks = np.arange(ref.n - 1) if ks is None else np.asarray(ks, dtype=int)
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return _propagate(model, ref, ks, cfg.n_substeps)
    except PropagationError:
        raise
    except (ValueError, FloatingPointError) as exc:
        if len(ks) > 1:
            for k in ks:
                discretize_batch(ref, cfg, model, ks=[k])
        raise PropagationError(int(ks[0]), str(exc)) from exc


def discretize(ref: ReferenceTrajectory, cfg: DiscretizationConfig, model) -> list[LinearizedSegment]:
    batch = discretize_batch(ref, cfg, model)
    return [batch[i] for i in range(len(batch))]


def shoot_segments(model, ref: ReferenceTrajectory, n_substeps: int) -> np.ndarray:
    """Nonlinear FOH propagation of each segment from its own start node.

    Independent of the linearization path; used as the defect oracle.
    Returns the end states, shape ``(N-1, nx)``.
    """
    n = ref.n
    tf = np.full(n - 1, float(ref.tf))
    h = 1.0 / (n - 1) / n_substeps
    u0, u1 = ref.us[:-1], ref.us[1:]
    x = ref.xs[:-1].copy()

    def f(x, lam):
        return model.scaled_dynamics(x, (1.0 - lam) * u0 + lam * u1, tf)

    for i in range(n_substeps):
        lam, dl = i / n_substeps, 1.0 / n_substeps
        k1 = f(x, lam)
        k2 = f(x + 0.5 * h * k1, lam + 0.5 * dl)
        k3 = f(x + 0.5 * h * k2, lam + 0.5 * dl)
        k4 = f(x + h * k3, lam + dl)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x
