"""Frame-to-frame MLP trajectory generator, trained with Adam (all numpy).

A frame is the 17-vector ``[m, r(3), v(3), q(4), w(3), T(3)]`` in SI units.
The network maps the normalized frame at node k to the normalized frame at
node k+1 and is unrolled from the initial state to produce a full guess.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamics as dyn
from .discretization import ReferenceTrajectory

FRAME = 17
_Q = slice(7, 11)

MAGIC = b"WSMLP\x00\x00\x01"
FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg: str, epoch: int | None = None):
        super().__init__(msg if epoch is None else f"epoch {epoch}: {msg}")
        self.epoch = epoch


class ModelFormatError(ValueError):
    pass


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std)) and np.all(self.std > 0)):
            raise ValueError("normalization stats must be finite with positive std")

    @classmethod
    def from_frames(cls, frames, floor: float = 1e-12) -> "NormalizationStats":
        """Population mean/std per feature; near-constant features get std 1."""
        f = np.asarray(frames, dtype=float).reshape(-1, np.shape(frames)[-1])
        if f.shape[0] == 0:
            raise ValueError("no frames to compute statistics from")
        mean = f.mean(axis=0)
        std = f.std(axis=0)
        std[std <= floor * np.maximum(1.0, np.abs(mean))] = 1.0
        return cls(mean, std)

    @classmethod
    def identity(cls, n: int = FRAME) -> "NormalizationStats":
        return cls(np.zeros(n), np.ones(n))

    def normalize(self, f):
        return (np.asarray(f, dtype=float) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean


@dataclass
class MlpModel:
    """Fully connected ReLU network; ``weights[i]`` has shape ``(fan_in, fan_out)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    stats: NormalizationStats
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad weight/bias shapes {w.shape}, {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input size does not match previous output")
        if self.stats.mean.shape != (self.sizes[0],) or self.sizes[0] != self.sizes[-1]:
            raise ValueError("stats and input/output sizes must agree")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def initialize(cls, sizes, stats: NormalizationStats, seed: int = 0, metadata=None) -> "MlpModel":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        ws = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(b) for b in sizes[1:]]
        return cls(ws, bs, stats, dict(metadata or {}))

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            NormalizationStats(self.stats.mean.copy(), self.stats.std.copy()),
            json.loads(json.dumps(self.metadata)),
        )

    def forward_normalized(self, z):
        h = np.asarray(z, dtype=float)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def forward(self, frame):
        """Predict the next frame(s) from dimensional frame(s)."""
        frame = np.asarray(frame, dtype=float)
        if frame.shape[-1] != self.sizes[0]:
            raise ValueError(f"frame length {frame.shape[-1]} != {self.sizes[0]}")
        return self.stats.denormalize(self.forward_normalized(self.stats.normalize(frame)))


def forward(model: MlpModel, frame):
    return model.forward(frame)


def loss_and_grads(model: MlpModel, z_in, z_out, weight_decay: float):
    """``MSE + weight_decay/2 * sum ||W||^2`` and its gradients (normalized space).

    The squared error is averaged over the batch and the output components.
    Biases are not penalized.
    """
    acts = [np.asarray(z_in, dtype=float)]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = acts[-1] @ w + b
        acts.append(np.maximum(h, 0.0) if i < last else h)
    err = acts[-1] - z_out
    mse = float(np.mean(err * err))
    penalty = 0.5 * weight_decay * sum(float(np.sum(w * w)) for w in model.weights)

    g = 2.0 * err / err.size
    gw: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        gw[i] = acts[i].T @ g + weight_decay * model.weights[i]
        gb[i] = g.sum(axis=0)
        if i:
            g = (g @ model.weights[i].T) * (acts[i] > 0)
    return mse + penalty, mse, gw, gb


class Adam:
    """Bias-corrected Adam over a list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 800
    weight_decay: float = 1e-5
    plateau_patience: int = 25
    lr_decay_factor: float = 10.0
    lr_min: float = 1e-6
    seed: int = 0
    hidden_layers: int = 5
    hidden_units: int = 256

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "plateau_patience", "lr_decay_factor", "lr_min", "hidden_layers", "hidden_units"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.lr_min > self.learning_rate:
            raise ValueError("lr_min must not exceed learning_rate")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)  # full objective, epoch average
    train_mse: list[float] = field(default_factory=list)
    test_mse: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.train_loss)) if self.train_loss else np.zeros(0)


class PlateauSchedule:
    """Divide the rate once no new best loss has appeared for ``patience`` epochs."""

    def __init__(self, lr: float, patience: int, factor: float, lr_min: float):
        self.lr, self.patience, self.factor, self.lr_min = lr, patience, factor, lr_min
        self.best = np.inf
        self.stale = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr / self.factor, self.lr_min)
                self.stale = 0
        return self.lr


def frame_pairs(trajectories) -> tuple[np.ndarray, np.ndarray]:
    """Consecutive (frame_k, frame_k+1) pairs from an ``(n, N, 17)`` stack."""
    t = np.asarray(trajectories, dtype=float)
    if t.ndim != 3 or t.shape[1] < 2:
        return np.zeros((0, FRAME)), np.zeros((0, FRAME))
    return t[:, :-1].reshape(-1, t.shape[2]), t[:, 1:].reshape(-1, t.shape[2])


def train(train_traj, test_traj, cfg: TrainConfig, metadata: dict | None = None, progress=None):
    """Fit a generator to consecutive frame pairs.

    ``train_traj``/``test_traj`` are ``(n, N, 17)`` arrays of dimensional
    frames.  Normalization statistics come from the training trajectories
    only.  Returns ``(model, history)``; identical inputs give bitwise
    identical results.
    """
    train_traj = np.asarray(train_traj, dtype=float)
    x_tr, y_tr = frame_pairs(train_traj)
    if x_tr.shape[0] == 0:
        raise TrainingError("empty training set")
    if not np.all(np.isfinite(train_traj)):
        raise TrainingError("non-finite values in training trajectories")
    x_te, y_te = frame_pairs(test_traj)

    stats = NormalizationStats.from_frames(train_traj)
    z_in, z_out = stats.normalize(x_tr), stats.normalize(y_tr)
    t_in, t_out = stats.normalize(x_te), stats.normalize(y_te)

    sizes = [FRAME] + [cfg.hidden_units] * cfg.hidden_layers + [FRAME]
    meta = {"train_config": cfg.digest(), "frame": "m,r3,v3,q4,w3,T3"}
    meta.update(metadata or {})
    model = MlpModel.initialize(sizes, stats, seed=cfg.seed, metadata=meta)
    opt = Adam(model.weights + model.biases, lr=cfg.learning_rate)
    sched = PlateauSchedule(cfg.learning_rate, cfg.plateau_patience, cfg.lr_decay_factor, cfg.lr_min)
    rng = np.random.default_rng(cfg.seed + 1)
    hist = TrainHistory()
    n = z_in.shape[0]

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot = mse_tot = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, mse, gw, gb = loss_and_grads(model, z_in[idx], z_out[idx], cfg.weight_decay)
            if not np.isfinite(loss):
                raise TrainingError("non-finite loss", epoch)
            opt.step(gw + gb)
            tot += loss * len(idx)
            mse_tot += mse * len(idx)
        hist.train_loss.append(tot / n)
        hist.train_mse.append(mse_tot / n)
        if t_in.shape[0]:
            hist.test_mse.append(float(np.mean((model.forward_normalized(t_in) - t_out) ** 2)))
        else:
            hist.test_mse.append(float("nan"))
        hist.lr.append(opt.lr)
        opt.lr = sched.update(hist.train_loss[-1])
        if progress is not None:
            progress(epoch, hist)
    return model, hist


@dataclass
class GeneratedTrajectory:
    xs: np.ndarray
    us: np.ndarray

    def to_reference(self, tf: float) -> ReferenceTrajectory:
        return ReferenceTrajectory(tf, self.xs.copy(), self.us.copy())


def generate_trajectory(model: MlpModel, x0, u0, n: int) -> GeneratedTrajectory:
    """Unroll the network from ``(x0, u0)`` for ``n`` frames (dimensional)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    frames = np.empty((n, FRAME))
    frames[0] = np.concatenate([np.asarray(x0, dtype=float), np.asarray(u0, dtype=float)])
    for k in range(1, n):
        f = model.forward(frames[k - 1])
        qn = np.linalg.norm(f[_Q])
        if not (np.all(np.isfinite(f)) and qn > 0):
            raise GenerationError(f"non-finite prediction at frame {k}")
        f[_Q] /= qn
        frames[k] = f
    return GeneratedTrajectory(frames[:, : dyn.NX].copy(), frames[:, dyn.NX :].copy())


# -- persistence -------------------------------------------------------------
#
# Little-endian layout:
#   magic (8 bytes) | u32 version | u32 n_layers | u32 dims[n_layers+1]
#   | per layer: f64 W (fan_in x fan_out, row-major) | per layer: f64 b
#   | f64 mean[d0] | f64 std[d0] | u32 meta_len | meta (UTF-8 JSON)
#   | sha256 of everything before it (32 bytes)


def model_to_bytes(model: MlpModel) -> bytes:
    sizes = model.sizes
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(model.weights))]
    parts.append(struct.pack(f"<{len(sizes)}I", *sizes))
    parts += [np.ascontiguousarray(w, dtype="<f8").tobytes() for w in model.weights]
    parts += [np.ascontiguousarray(b, dtype="<f8").tobytes() for b in model.biases]
    parts += [model.stats.mean.astype("<f8").tobytes(), model.stats.std.astype("<f8").tobytes()]
    meta = json.dumps(model.metadata, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta)), meta]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def model_from_bytes(data: bytes) -> MlpModel:
    if len(data) < len(MAGIC) + 8 + 32 or data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    pos = len(MAGIC)
    version, nl = struct.unpack_from("<II", body, pos)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("checksum mismatch: file is corrupted or truncated")
    pos += 8
    try:
        sizes = struct.unpack_from(f"<{nl + 1}I", body, pos)
        pos += 4 * (nl + 1)

        def take(count):
            nonlocal pos
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(float)
            pos += 8 * count
            return arr

        ws = [take(a * b).reshape(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        bs = [take(b) for b in sizes[1:]]
        mean, std = take(sizes[0]), take(sizes[0])
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos : pos + mlen].decode())
        pos += mlen
    except (struct.error, ValueError) as exc:
        raise ModelFormatError(f"truncated model file: {exc}") from exc
    if pos != len(body):
        raise ModelFormatError("trailing bytes in model file")
    return MlpModel(ws, bs, NormalizationStats(mean, std), meta)


def save_model(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
