import numpy as np
import pytest

from warmscp import dynamics as dyn
from warmscp.subproblem import GuidanceProblem, nondimensionalize


def mission_problem(i: int) -> GuidanceProblem:
    bounds = dyn.ProblemBounds(gamma_c=np.deg2rad(45.0), vartheta_max=np.deg2rad(30.0))
    if i == 1:
        q = dyn.euler_to_quat(np.deg2rad(-20.0), np.deg2rad(20.0), 0.0)
        x0 = np.concatenate([[30000.0], [200.0, 200.0, 1500.0], [-20.0, -20.0, -80.0], q, np.zeros(3)])
    else:
        x0 = np.concatenate([[30000.0], [0.0, 0.0, 1500.0], [0.0, 0.0, -80.0], dyn.Q_IDENTITY, np.zeros(3)])
    return GuidanceProblem(dyn.VehicleParams(), bounds, x0)


def nominal_x0() -> np.ndarray:
    return np.concatenate([[30000.0], [0.0, 0.0, 1500.0], [0.0, 0.0, -80.0], dyn.Q_IDENTITY, np.zeros(3)])


def random_scaled_points(n: int, seed: int = 0):
    """Random nondimensional (x, u, tf) triples around the landing envelope."""
    rng = np.random.default_rng(seed)
    xs = np.empty((n, dyn.NX))
    xs[:, 0] = rng.uniform(0.75, 1.0, n)
    xs[:, 1:4] = rng.uniform(-0.5, 1.0, (n, 3))
    xs[:, 4:7] = rng.uniform(-0.05, 0.05, (n, 3))
    q = rng.normal(size=(n, 4))
    xs[:, 7:11] = q / np.linalg.norm(q, axis=1, keepdims=True)
    xs[:, 11:14] = rng.uniform(-0.5, 0.5, (n, 3))
    us = rng.uniform(-0.003, 0.003, (n, 3))
    us[:, 2] = rng.uniform(0.005, 0.018, n)
    tf = rng.uniform(10.0, 40.0, n)
    return xs, us, tf


@pytest.fixture(scope="session")
def scaled_nominal():
    return nondimensionalize(GuidanceProblem(dyn.VehicleParams(), dyn.ProblemBounds(), nominal_x0()))


@pytest.fixture(scope="session")
def m2_online():
    from warmscp.scp import ScpConfig, run_scp, straight_line_init

    p = mission_problem(2)
    return run_scp(p, straight_line_init(p.x0, p.bounds, p.n_nodes), ScpConfig())


@pytest.fixture(scope="session")
def m2_dataset_mode():
    from warmscp.scp import DATASET, ScpConfig, run_scp, straight_line_init

    p = mission_problem(2)
    return run_scp(p, straight_line_init(p.x0, p.bounds, p.n_nodes), ScpConfig(criteria_mode=DATASET))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
