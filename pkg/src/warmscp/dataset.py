"""Perturbed-problem sampling and the training-trajectory store.

Each problem index gets its own generator seeded from ``(master_seed,
index)``, so the dataset is identical whatever the worker count.
Records are kept in a fixed-width little-endian binary file next to a JSON
manifest; ``export_text`` writes a lossless CSV copy for inspection.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing as mp
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .discretization import PropagationError
from .mlp import FRAME
from .scp import DATASET, ScpAbort, ScpConfig, run_scp, straight_line_init
from .subproblem import GuidanceProblem

log = logging.getLogger(__name__)

EULER_CONVENTION = "ZYX intrinsic (yaw, pitch, roll); angles listed as (roll x, pitch y, yaw z)"
DEFAULT_SPLIT = 45000 / 48333

RECORDS_FILE = "records.bin"
MANIFEST_FILE = "manifest.json"
MAGIC = b"WSDS"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sIII")  # magic, version, n_nodes, count
_META = struct.Struct("<QQII4d")  # id, seed, converged, iterations, tf, final mass, J_tr, J_vc


class DatasetError(RuntimeError):
    pass


@dataclass
class PerturbationRanges:
    """Half-widths of the uniform boxes around the nominal initial state."""

    dm: float = 0.0  # kg
    dr: tuple = (500.0, 500.0, 0.0)  # m
    dv: tuple = (40.0, 40.0, 20.0)  # m/s
    d_euler_deg: tuple = (30.0, 30.0, 0.0)  # roll, pitch, yaw
    dw_deg: tuple = (20.0, 20.0, 0.0)  # deg/s

    def __post_init__(self):
        for name in ("dr", "dv", "d_euler_deg", "dw_deg"):
            val = np.asarray(getattr(self, name), dtype=float)
            if val.shape != (3,) or np.any(val < 0):
                raise ValueError(f"{name} must be three non-negative half-widths")
            setattr(self, name, tuple(float(v) for v in val))
        if self.dm < 0:
            raise ValueError("dm must be non-negative")


def problem_seed(master_seed: int, index: int) -> int:
    """Per-problem seed derived from the master seed and the problem index."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def sample_initial_state(x0_nominal, ranges: PerturbationRanges, seed) -> np.ndarray:
    """Uniformly perturbed copy of ``x0_nominal``.

    The attitude draw is a set of Euler angles converted to a quaternion and
    composed with the nominal attitude (for the identity nominal this simply
    sets ``q0``).  Draw order is fixed: mass, position, velocity, Euler, rate.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x0_nominal, dtype=float).copy()

    def box(half):
        half = np.asarray(half, dtype=float)
        return rng.uniform(-1.0, 1.0, size=half.shape) * half

    x[dyn.M] += box(ranges.dm)
    x[dyn.R] += box(ranges.dr)
    x[dyn.V] += box(ranges.dv)
    roll, pitch, yaw = np.deg2rad(box(ranges.d_euler_deg))
    q = dyn.quat_multiply(x[dyn.Q], dyn.euler_to_quat(roll, pitch, yaw))
    x[dyn.Q] = q / np.linalg.norm(q)
    x[dyn.W] += np.deg2rad(box(ranges.dw_deg))
    return x


@dataclass
class TrajectoryRecord:
    problem_id: int
    seed: int
    x0: np.ndarray
    converged: bool
    tf: float
    frames: np.ndarray  # (N, 17) dimensional
    iterations: int
    final_mass: float
    j_tr: float = float("nan")
    j_vc: float = float("nan")

    def __eq__(self, other):
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (
            (self.problem_id, self.seed, self.converged, self.iterations) == (other.problem_id, other.seed, other.converged, other.iterations)
            and _same_bits([self.tf, self.final_mass, self.j_tr, self.j_vc], [other.tf, other.final_mass, other.j_tr, other.j_vc])
            and _same_bits(self.x0, other.x0)
            and _same_bits(self.frames, other.frames)
        )


def _same_bits(a, b) -> bool:
    a, b = np.asarray(a, dtype="<f8"), np.asarray(b, dtype="<f8")
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass
class DatasetManifest:
    record_count: int
    n_nodes: int
    train_ids: list[int]
    test_ids: list[int]
    config_hash: str
    acceptance: dict
    master_seed: int
    euler_convention: str = EULER_CONVENTION
    records_sha256: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        tr, te = set(self.train_ids), set(self.test_ids)
        if tr & te:
            raise DatasetError("train and test splits overlap")
        if len(tr) + len(te) != self.record_count:
            raise DatasetError("split does not cover every record exactly once")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


@dataclass
class DatasetJob:
    """Everything a worker needs to solve one perturbed problem."""

    problem: GuidanceProblem
    ranges: PerturbationRanges
    scp_cfg: ScpConfig
    master_seed: int


def solve_one(job: DatasetJob, index: int) -> TrajectoryRecord:
    seed = problem_seed(job.master_seed, index)
    x0 = sample_initial_state(job.problem.x0, job.ranges, seed)
    prob = GuidanceProblem(job.problem.params, job.problem.bounds, x0, job.problem.n_nodes, job.problem.n_substeps)
    n = prob.n_nodes
    empty = np.full((n, FRAME), np.nan)
    try:
        res = run_scp(prob, straight_line_init(x0, prob.bounds, n, job.scp_cfg.tf_guess), job.scp_cfg)
    except (ScpAbort, PropagationError, ValueError) as exc:
        log.info("problem %d failed: %s", index, exc)
        iters = len(exc.log) if isinstance(exc, ScpAbort) else 0
        return TrajectoryRecord(index, seed, x0, False, float("nan"), empty, iters, float("nan"))
    traj = res.trajectory
    last = res.log[-1]
    return TrajectoryRecord(
        problem_id=index,
        seed=seed,
        x0=x0,
        converged=bool(res.converged),
        tf=float(traj.tf),
        frames=np.hstack([traj.xs, traj.us]),
        iterations=res.iterations,
        final_mass=res.final_mass,
        j_tr=float(last.j_tr),
        j_vc=float(last.j_vc),
    )


_WORKER_JOB: DatasetJob | None = None


def _init_worker(job):
    global _WORKER_JOB
    _WORKER_JOB = job


def _worker(index):
    return solve_one(_WORKER_JOB, index)


def jsonable(obj):
    """Recursively convert dataclasses and numpy values to JSON-ready types."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def split_ids(ids, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded random train/test split; the train share is ``round(fraction * n)``."""
    ids = np.asarray(sorted(ids), dtype=int)
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])).permutation(len(ids))
    n_tr = int(round(fraction * len(ids)))
    return sorted(ids[perm[:n_tr]].tolist()), sorted(ids[perm[n_tr:]].tolist())


def build_dataset(
    problem: GuidanceProblem,
    ranges: PerturbationRanges,
    count: int,
    scp_cfg: ScpConfig,
    split_fraction: float = DEFAULT_SPLIT,
    jobs: int = 1,
    master_seed: int = 0,
    out_dir=None,
    progress=None,
) -> tuple[DatasetManifest, list[TrajectoryRecord]]:
    """Solve ``count`` perturbed problems and keep the converged trajectories."""
    if scp_cfg.criteria_mode != DATASET:
        raise ValueError("dataset generation requires the dataset convergence criteria")
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 < split_fraction <= 1.0:
        raise ValueError("split_fraction must be in (0, 1]")
    job = DatasetJob(problem, ranges, scp_cfg, int(master_seed))
    results: list[TrajectoryRecord] = []
    if jobs <= 1:
        for i in range(count):
            results.append(solve_one(job, i))
            if progress:
                progress(i + 1, count)
    else:
        ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
        with ctx.Pool(jobs, initializer=_init_worker, initargs=(job,)) as pool:
            for rec in pool.imap(_worker, range(count), chunksize=4):
                results.append(rec)
                if progress:
                    progress(len(results), count)

    kept = [r for r in results if r.converged]
    n_fail = sum(1 for r in results if not r.converged)
    gen_cfg = jsonable(
        {
            "x0": problem.x0,
            "n_nodes": problem.n_nodes,
            "n_substeps": problem.n_substeps,
            "ranges": ranges,
            "scp": scp_cfg,
            "count": count,
            "split_fraction": split_fraction,
            "master_seed": int(master_seed),
            "params": problem.params,
            "bounds": problem.bounds,
        }
    )
    train_ids, test_ids = split_ids([r.problem_id for r in kept], split_fraction, master_seed)
    manifest = DatasetManifest(
        record_count=len(kept),
        n_nodes=problem.n_nodes,
        train_ids=train_ids,
        test_ids=test_ids,
        config_hash=config_hash(gen_cfg),
        acceptance={
            "attempted": count,
            "converged": len(kept),
            "rejected": n_fail,
            "rate": len(kept) / count,
            "median_iterations": float(np.median([r.iterations for r in kept])) if kept else float("nan"),
        },
        master_seed=int(master_seed),
        config=gen_cfg,
    )
    if out_dir is not None:
        write_dataset(out_dir, manifest, kept)
    return manifest, kept


# -- persistence -------------------------------------------------------------
#
# records.bin, little-endian:
#   header: "WSDS" | u32 version | u32 n_nodes | u32 count
#   per record: u64 id | u64 seed | u32 converged | u32 iterations
#               | f64 tf | f64 final_mass | f64 J_tr | f64 J_vc
#               | f64 x0[14] | f64 frames[n_nodes * 17] (row-major)


def records_to_bytes(records: list[TrajectoryRecord], n_nodes: int) -> bytes:
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, n_nodes, len(records))]
    for r in records:
        if r.frames.shape != (n_nodes, FRAME):
            raise DatasetError(f"record {r.problem_id}: expected {n_nodes} frames")
        parts.append(_META.pack(r.problem_id, r.seed, int(r.converged), r.iterations, r.tf, r.final_mass, r.j_tr, r.j_vc))
        parts.append(np.ascontiguousarray(r.x0, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(r.frames, dtype="<f8").tobytes())
    return b"".join(parts)


def records_from_bytes(data: bytes) -> list[TrajectoryRecord]:
    if len(data) < _HEAD.size:
        raise DatasetError("record file too short")
    magic, version, n, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetError("not a dataset record file")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {version}")
    nval = dyn.NX + n * FRAME
    width = _META.size + 8 * nval
    if len(data) != _HEAD.size + count * width:
        raise DatasetError(f"record file size mismatch: expected {count} records of {width} bytes")
    out = []
    pos = _HEAD.size
    for i in range(count):
        pid, seed, conv, iters, tf, mf, jtr, jvc = _META.unpack_from(data, pos)
        vals = np.frombuffer(data, dtype="<f8", count=nval, offset=pos + _META.size).astype(float)
        pos += width
        frames = vals[dyn.NX :].reshape(n, FRAME)
        if conv and not np.all(np.isfinite(frames)):
            raise DatasetError(f"record {pid}: non-finite frame values")
        out.append(TrajectoryRecord(pid, seed, vals[: dyn.NX].copy(), bool(conv), tf, frames.copy(), iters, mf, jtr, jvc))
    return out


def write_dataset(out_dir, manifest: DatasetManifest, records: list[TrajectoryRecord]) -> None:
    """Single writer: write to temporary names, then rename into place."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = records_to_bytes(records, manifest.n_nodes)
    manifest.records_sha256 = hashlib.sha256(blob).hexdigest()
    for name, payload, mode in ((RECORDS_FILE, blob, "wb"), (MANIFEST_FILE, manifest.to_json() + "\n", "w")):
        tmp = out / (name + ".tmp")
        with open(tmp, mode) as fh:
            fh.write(payload)
        os.replace(tmp, out / name)


@dataclass
class Dataset:
    manifest: DatasetManifest
    records: list[TrajectoryRecord]

    def _select(self, split: str | None) -> list[TrajectoryRecord]:
        if split is None:
            return list(self.records)
        ids = {"train": self.manifest.train_ids, "test": self.manifest.test_ids}[split]
        by_id = {r.problem_id: r for r in self.records}
        return [by_id[i] for i in ids]

    def trajectories(self, split: str | None = None) -> np.ndarray:
        recs = self._select(split)
        if not recs:
            return np.zeros((0, self.manifest.n_nodes, FRAME))
        return np.stack([r.frames for r in recs])

    def pairs(self, split: str | None = None):
        """Yield ``(frame_k, frame_k+1)`` in manifest order."""
        for r in self._select(split):
            for k in range(r.frames.shape[0] - 1):
                yield r.frames[k], r.frames[k + 1]


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        man = json.loads((path / MANIFEST_FILE).read_text())
        blob = (path / RECORDS_FILE).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset at {path}: {exc}") from exc
    manifest = DatasetManifest(**man)
    if manifest.records_sha256 and hashlib.sha256(blob).hexdigest() != manifest.records_sha256:
        raise DatasetError("record file checksum does not match manifest")
    records = records_from_bytes(blob)
    if len(records) != manifest.record_count:
        raise DatasetError("manifest record count does not match record file")
    for r in records:
        if r.frames.shape[0] != manifest.n_nodes:
            raise DatasetError(f"record {r.problem_id}: wrong node count")
    return Dataset(manifest, records)


FRAME_HEADER = [
    "m_kg", "rx_m", "ry_m", "rz_m", "vx_mps", "vy_mps", "vz_mps",
    "q0", "q1", "q2", "q3", "wx_radps", "wy_radps", "wz_radps",
    "Tx_N", "Ty_N", "Tz_N",
]  # fmt: skip


def export_text(dataset: Dataset, path) -> None:
    """Lossless CSV: one row per node, floats written with ``repr``."""
    with open(path, "w") as fh:
        fh.write(",".join(["problem_id", "seed", "node", "tf_s"] + FRAME_HEADER) + "\n")
        for r in dataset.records:
            for k, f in enumerate(r.frames):
                fh.write(",".join([str(r.problem_id), str(r.seed), str(k), repr(float(r.tf))] + [repr(float(v)) for v in f]) + "\n")
