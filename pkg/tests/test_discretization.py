import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from warmscp import dynamics as dyn
from warmscp.discretization import (
    DiscretizationConfig,
    PropagationError,
    ReferenceTrajectory,
    discretize,
    discretize_batch,
    foh_weights,
    propagate_segment,
    shoot_segments,
)
from warmscp.scp import straight_line_init
from warmscp.subproblem import nondimensionalize

from conftest import mission_problem


class LinearStub:
    """x' = tf * (a x + b u), batched over segments."""

    nx = 1
    nu = 1

    def __init__(self, a, b=0.0):
        self.a, self.b = a, b

    def scaled_dynamics(self, x, u, tf):
        return np.asarray(tf)[..., None] * (self.a * x + self.b * u)

    def jacobians(self, x, u, tf):
        tf = np.asarray(tf, dtype=float)
        k = tf.shape
        a = np.broadcast_to(self.a, k + (1, 1)) * tf[..., None, None]
        b = np.broadcast_to(self.b, k + (1, 1)) * tf[..., None, None]
        return a, b, self.a * x + self.b * u


class ZeroStub:
    nx = 3
    nu = 2

    def scaled_dynamics(self, x, u, tf):
        return np.zeros_like(x)

    def jacobians(self, x, u, tf):
        k = np.asarray(tf).shape
        return np.zeros(k + (3, 3)), np.zeros(k + (3, 2)), np.zeros_like(x)


def _stub_ref(n=30, nx=1, nu=1, tf=1.0, seed=0):
    rng = np.random.default_rng(seed)
    return ReferenceTrajectory(tf, rng.normal(size=(n, nx)), rng.normal(size=(n, nu)))


def reconstruct(batch, ref):
    xs, us = ref.xs, ref.us
    return (
        np.einsum("kij,kj->ki", batch.a, xs[:-1])
        + np.einsum("kij,kj->ki", batch.bhat, us[:-1])
        + np.einsum("kij,kj->ki", batch.b, us[1:])
        + batch.s * ref.tf
        + batch.c
    )


@pytest.fixture(scope="module")
def mission2_refs():
    p = mission_problem(2)
    sp, units = nondimensionalize(p)
    straight = units.scale_trajectory(straight_line_init(p.x0, p.bounds, 30))
    return sp, straight


# -- FOH weights -------------------------------------------------------------


def test_foh_endpoints_and_midpoint():
    assert foh_weights(0.2, 0.2, 0.4) == (1.0, 0.0)
    assert foh_weights(0.4, 0.2, 0.4) == (0.0, 1.0)
    assert np.allclose(foh_weights(0.3, 0.2, 0.4), (0.5, 0.5))


def test_foh_degenerate_interval():
    with pytest.raises(ValueError):
        foh_weights(0.1, 0.1, 0.1)


@given(st.floats(0.0, 1.0), st.floats(0.0, 0.9), st.floats(1e-3, 0.1))
def test_foh_partition_of_unity(frac, tk, width):
    tau = tk + frac * width
    eh, e = foh_weights(tau, tk, tk + width)
    assert eh + e == pytest.approx(1.0, abs=1e-12)
    assert -1e-12 <= e <= 1 + 1e-12


# -- stub systems --------------------------------------------------------------


def test_scalar_lti_matches_exponential():
    ref = _stub_ref()
    seg = propagate_segment(ref, 0, DiscretizationConfig(30, 10), LinearStub(-1.0))
    assert seg.a_k[0, 0] == pytest.approx(np.exp(-1.0 / 29.0), abs=1e-10)


def test_scalar_lti_input_matrices():
    # x' = a x + b u, FOH input: closed-form convolution weights
    a, b, h = -1.0, 2.0, 1.0 / 29.0
    seg = propagate_segment(_stub_ref(), 3, DiscretizationConfig(30, 10), LinearStub(a, b))
    e = np.exp(a * h)
    # int_0^h e^{a(h-t)} (1 - t/h) dt and int_0^h e^{a(h-t)} t/h dt
    bm = b * ((e - 1) / a - (e - 1 - a * h) / (a * a * h))
    bp = b * (e - 1 - a * h) / (a * a * h)
    assert seg.bhat_k[0, 0] == pytest.approx(bm, abs=1e-10)
    assert seg.b_k[0, 0] == pytest.approx(bp, abs=1e-10)


def test_zero_dynamics():
    ref = _stub_ref(nx=3, nu=2)
    for seg in discretize(ref, DiscretizationConfig(30, 10), ZeroStub()):
        assert np.array_equal(seg.a_k, np.eye(3))
        assert not seg.bhat_k.any() and not seg.b_k.any()
        assert not seg.s_k.any() and not seg.c_k.any()


def test_two_nodes_one_segment():
    assert len(discretize(_stub_ref(n=2), DiscretizationConfig(2, 10), LinearStub(-1.0))) == 1


def test_segment_index_bounds():
    with pytest.raises(IndexError):
        propagate_segment(_stub_ref(n=5), 4, DiscretizationConfig(5, 10), LinearStub(-1.0))


def test_reference_validation():
    with pytest.raises(ValueError):
        ReferenceTrajectory(0.0, np.zeros((3, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        ReferenceTrajectory(1.0, np.zeros((1, 1)), np.zeros((1, 1)))


# -- vehicle model -------------------------------------------------------------


def test_table1_reference_all_finite(mission2_refs):
    sp, ref = mission2_refs
    segs = discretize(ref, DiscretizationConfig(30, 10), sp.model)
    assert len(segs) == 29
    for s in segs:
        for m in (s.a_k, s.bhat_k, s.b_k, s.s_k, s.c_k):
            assert np.all(np.isfinite(m))
        assert abs(np.linalg.det(s.a_k)) > 0


def test_defect_identity_straight_reference(mission2_refs):
    sp, ref = mission2_refs
    batch = discretize_batch(ref, DiscretizationConfig(30, 10), sp.model)
    assert np.max(np.abs(reconstruct(batch, ref) - batch.x_end)) < 1e-12
    assert np.max(np.abs(reconstruct(batch, ref) - shoot_segments(sp.model, ref, 40))) < 1e-7


def test_defect_identity_random_references(mission2_refs):
    sp, ref = mission2_refs
    rng = np.random.default_rng(5)
    for _ in range(5):
        xs = ref.xs + rng.normal(scale=0.02, size=ref.xs.shape)
        xs[:, dyn.Q] /= np.linalg.norm(xs[:, dyn.Q], axis=1, keepdims=True)
        us = ref.us * (1 + rng.uniform(-0.3, 0.3, size=ref.us.shape)) + rng.normal(scale=1e-3, size=ref.us.shape)
        r = ReferenceTrajectory(ref.tf * rng.uniform(0.8, 1.6), xs, us)
        batch = discretize_batch(r, DiscretizationConfig(30, 10), sp.model)
        assert np.max(np.abs(reconstruct(batch, r) - shoot_segments(sp.model, r, 40))) < 1e-7


def test_substep_doubling_converges(mission2_refs):
    sp, ref = mission2_refs
    a = discretize_batch(ref, DiscretizationConfig(30, 10), sp.model)
    b = discretize_batch(ref, DiscretizationConfig(30, 20), sp.model)
    for name in ("a", "bhat", "b", "s", "c"):
        m10, m20 = getattr(a, name), getattr(b, name)
        scale = max(1.0, np.max(np.abs(m20)))
        assert np.max(np.abs(m10 - m20)) / scale < 1e-8, name


def test_order_independence(mission2_refs):
    sp, ref = mission2_refs
    cfg = DiscretizationConfig(30, 10)
    full = discretize_batch(ref, cfg, sp.model)
    for k in (28, 0, 13):
        seg = propagate_segment(ref, k, cfg, sp.model)
        assert np.allclose(seg.a_k, full.a[k], rtol=1e-13, atol=1e-15)
        assert np.allclose(seg.b_k, full.b[k], rtol=1e-13, atol=1e-13)


def test_propagation_failure_names_segment(mission2_refs):
    sp, ref = mission2_refs
    xs = ref.xs.copy()
    us = ref.us.copy()
    xs[7, dyn.M] = 1e-4  # burns through its mass within the segment
    us[7:9] *= 50.0
    with pytest.raises(PropagationError) as err:
        discretize_batch(ReferenceTrajectory(ref.tf, xs, us), DiscretizationConfig(30, 10), sp.model)
    assert err.value.segment == 7
