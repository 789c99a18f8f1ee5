import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from warmscp.mlp import (
    FRAME,
    Adam,
    GenerationError,
    MlpModel,
    ModelFormatError,
    NormalizationStats,
    PlateauSchedule,
    TrainConfig,
    TrainingError,
    frame_pairs,
    generate_trajectory,
    load_model,
    loss_and_grads,
    model_from_bytes,
    model_to_bytes,
    save_model,
    train,
)


def identity_model(stats=None):
    eye = np.eye(FRAME)
    ws = [np.hstack([eye, -eye]), np.vstack([eye, -eye])]
    bs = [np.zeros(2 * FRAME), np.zeros(FRAME)]
    return MlpModel(ws, bs, stats or NormalizationStats.identity())


def toy_trajectories(n=8, nodes=6, seed=0):
    rng = np.random.default_rng(seed)
    start = rng.normal(size=(n, 1, FRAME))
    start[:, 0, 7:11] /= np.linalg.norm(start[:, 0, 7:11], axis=1, keepdims=True)
    drift = np.linspace(0, 1, nodes)[None, :, None] * rng.normal(scale=0.2, size=(n, 1, FRAME))
    return start + drift


def small_cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=7, epochs=4, hidden_layers=2, hidden_units=8, lr_min=1e-6)
    base.update(kw)
    return TrainConfig(**base)


# --- normalization ---------------------------------------------------------


def test_zscore_example():
    f = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, FRAME))
    st_ = NormalizationStats.from_frames(f)
    np.testing.assert_allclose(st_.mean, 2.0)
    np.testing.assert_allclose(st_.normalize(f)[:, 0], [-1.2247449, 0.0, 1.2247449], atol=1e-7)
    np.testing.assert_allclose(st_.denormalize(st_.normalize(f)), f, atol=1e-14)


def test_constant_feature_gets_unit_std():
    f = np.random.default_rng(1).normal(size=(50, FRAME))
    f[:, 3] = 7.5
    st_ = NormalizationStats.from_frames(f)
    assert st_.std[3] == 1.0
    assert np.all(np.isfinite(st_.normalize(f)))


def test_stats_validation():
    with pytest.raises(ValueError):
        NormalizationStats(np.zeros(3), np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        NormalizationStats.from_frames(np.zeros((0, FRAME)))


# --- network ---------------------------------------------------------------


def test_zero_network_predicts_mean():
    stats = NormalizationStats(np.arange(FRAME, dtype=float), np.full(FRAME, 3.0))
    m = MlpModel.initialize([FRAME, 5, FRAME], stats)
    for w in m.weights:
        w[:] = 0.0
    x = np.random.default_rng(0).normal(size=(4, FRAME))
    np.testing.assert_allclose(m.forward(x), np.tile(stats.mean, (4, 1)))


@given(arrays(np.float64, FRAME, elements=st.floats(-1e3, 1e3)))
def test_identity_network(x):
    np.testing.assert_allclose(identity_model().forward(x), x, rtol=1e-12, atol=1e-9)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_lipschitz_bound(seed):
    rng = np.random.default_rng(seed)
    m = MlpModel.initialize([FRAME, 12, 9, FRAME], NormalizationStats.identity(), seed=seed)
    a, b = rng.normal(size=(2, FRAME))
    lip = np.prod([np.linalg.norm(w, 2) for w in m.weights])
    lhs = np.linalg.norm(m.forward_normalized(a) - m.forward_normalized(b))
    assert lhs <= lip * np.linalg.norm(a - b) * (1 + 1e-12)


def test_layer_shapes_validated():
    with pytest.raises(ValueError):
        MlpModel([np.zeros((FRAME, 4)), np.zeros((5, FRAME))], [np.zeros(4), np.zeros(FRAME)], NormalizationStats.identity())
    with pytest.raises(ValueError):
        MlpModel([np.zeros((FRAME, 4))], [np.zeros(4)], NormalizationStats.identity())


def test_frame_length_checked():
    with pytest.raises(ValueError):
        identity_model().forward(np.zeros(14))


# --- gradients and optimizer -------------------------------------------------


def test_gradient_check():
    rng = np.random.default_rng(4)
    m = MlpModel.initialize([FRAME, 2, FRAME], NormalizationStats.identity(), seed=2)
    m.biases[0][:] = rng.normal(size=2)  # keep both hidden units away from the kink
    zi, zo = rng.normal(size=(3, FRAME)), rng.normal(size=(3, FRAME))
    wd = 1e-2
    _, _, gw, gb = loss_and_grads(m, zi, zo, wd)
    h = 1e-6
    for params, grads in ((m.weights, gw), (m.biases, gb)):
        for p, g in zip(params, grads):
            num = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = p[i]
                p[i] = old + h
                lp = loss_and_grads(m, zi, zo, wd)[0]
                p[i] = old - h
                lm = loss_and_grads(m, zi, zo, wd)[0]
                p[i] = old
                num[i] = (lp - lm) / (2 * h)
            rel = np.linalg.norm(num - g) / max(np.linalg.norm(num), 1e-12)
            assert rel < 1e-5


def test_no_decay_loss_is_mse():
    m = MlpModel.initialize([FRAME, 4, FRAME], NormalizationStats.identity(), seed=1)
    rng = np.random.default_rng(0)
    zi, zo = rng.normal(size=(5, FRAME)), rng.normal(size=(5, FRAME))
    loss, mse, _, _ = loss_and_grads(m, zi, zo, 0.0)
    assert loss == mse
    assert mse == pytest.approx(np.mean((m.forward_normalized(zi) - zo) ** 2), rel=1e-14)
    penalised = loss_and_grads(m, zi, zo, 0.1)[0]
    assert penalised == pytest.approx(mse + 0.05 * sum(np.sum(w * w) for w in m.weights), rel=1e-14)


def test_adam_first_step():
    w = np.array([1.0])
    opt = Adam([w], lr=0.1)
    opt.step([2.0 * w])  # gradient of w^2
    assert w[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-10)


def test_adam_minimizes_quadratic():
    w = np.array([3.0, -2.0])
    opt = Adam([w], lr=0.05)
    for _ in range(2000):
        opt.step([2.0 * w])
    assert np.all(np.abs(w) < 1e-2)


def test_plateau_schedule():
    s = PlateauSchedule(1e-2, patience=2, factor=10.0, lr_min=1e-4)
    lrs = [s.update(x) for x in [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9]]
    assert lrs[:3] == [1e-2, 1e-2, 1e-2]
    assert lrs[3] == pytest.approx(1e-3)
    assert lrs[5] == pytest.approx(1e-4)
    assert lrs[-1] == pytest.approx(1e-4)  # floored


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=1e-7, lr_min=1e-6)
    assert TrainConfig().digest() == TrainConfig().digest() != TrainConfig(seed=1).digest()


# --- training --------------------------------------------------------------


def test_frame_pairs():
    t = toy_trajectories(3, 5)
    x, y = frame_pairs(t)
    assert x.shape == y.shape == (12, FRAME)
    np.testing.assert_array_equal(x[0], t[0, 0])
    np.testing.assert_array_equal(y[0], t[0, 1])
    np.testing.assert_array_equal(x[4], t[1, 0])


def test_training_is_deterministic():
    t = toy_trajectories()
    m1, h1 = train(t[:6], t[6:], small_cfg())
    m2, h2 = train(t[:6], t[6:], small_cfg())
    assert model_to_bytes(m1) == model_to_bytes(m2)
    assert h1.train_loss == h2.train_loss and h1.test_mse == h2.test_mse


def test_training_reduces_loss():
    t = toy_trajectories(20, 8)
    _, h = train(t[:16], t[16:], small_cfg(epochs=40, hidden_units=32))
    assert h.train_loss[-1] < 0.5 * h.train_loss[0]
    assert len(h.lr) == len(h.test_mse) == 40
    assert np.all(np.diff(h.best_so_far()) <= 0)


def test_stats_come_from_training_split():
    t = toy_trajectories()
    test = t[6:] * 100.0
    m, _ = train(t[:6], test, small_cfg(epochs=1))
    np.testing.assert_allclose(m.stats.mean, NormalizationStats.from_frames(t[:6]).mean)


def test_empty_training_set():
    with pytest.raises(TrainingError):
        train(np.zeros((0, 30, FRAME)), np.zeros((0, 30, FRAME)), small_cfg())


def test_non_finite_data_rejected():
    t = toy_trajectories()
    t[0, 2, 0] = np.inf
    with pytest.raises(TrainingError, match="non-finite"):
        train(t, t[:0], small_cfg())


def test_divergence_reports_epoch(monkeypatch):
    import warmscp.mlp as mlp

    real = mlp.loss_and_grads
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        loss, mse, gw, gb = real(*args)
        return (np.nan if calls["n"] > 3 else loss), mse, gw, gb

    monkeypatch.setattr(mlp, "loss_and_grads", flaky)
    t = toy_trajectories()
    with pytest.raises(TrainingError) as info:
        train(t, t[:0], small_cfg(batch_size=20))
    assert info.value.epoch == 1


# --- generation ------------------------------------------------------------


def test_single_frame_generation_is_seed():
    x0 = np.arange(14, dtype=float)
    g = generate_trajectory(identity_model(), x0, [1.0, 2.0, 3.0], 1)
    np.testing.assert_array_equal(g.xs, x0[None])
    np.testing.assert_array_equal(g.us, [[1.0, 2.0, 3.0]])


def test_generation_renormalizes_quaternion():
    x0 = np.zeros(14)
    x0[7:11] = [1.0, 1.0, 0.0, 0.0]
    g = generate_trajectory(identity_model(), x0, [0, 0, 1.0], 4)
    np.testing.assert_allclose(np.linalg.norm(g.xs[1:, 7:11], axis=1), 1.0)
    assert g.to_reference(12.0).tf == 12.0


def test_generation_error_on_nan():
    m = identity_model()
    m.biases[-1][0] = np.nan
    with pytest.raises(GenerationError):
        generate_trajectory(m, np.r_[np.zeros(7), 1, 0, 0, 0, np.zeros(3)], [0, 0, 1.0], 3)


# --- persistence -----------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    m = MlpModel.initialize([FRAME, 6, 5, FRAME], NormalizationStats.from_frames(toy_trajectories()), seed=3, metadata={"k": [1, 2]})
    path = tmp_path / "m.bin"
    save_model(m, path)
    back = load_model(path)
    assert back.sizes == m.sizes and back.metadata == m.metadata
    for a, b in zip(back.weights + back.biases, m.weights + m.biases):
        np.testing.assert_array_equal(a, b)
    x = np.random.default_rng(0).normal(size=(3, FRAME))
    np.testing.assert_array_equal(back.forward(x), m.forward(x))


def test_corruption_detected():
    data = bytearray(model_to_bytes(identity_model()))
    data[100] ^= 0xFF
    with pytest.raises(ModelFormatError, match="checksum"):
        model_from_bytes(bytes(data))


def test_truncation_detected():
    data = model_to_bytes(identity_model())
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[: len(data) // 2])
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[:10])


def test_version_mismatch():
    data = bytearray(model_to_bytes(identity_model()))
    struct.pack_into("<I", data, 8, 99)
    with pytest.raises(ModelFormatError, match="unsupported"):
        model_from_bytes(bytes(data))
