"""Run configuration: YAML documents with unit-suffixed keys, strictly validated.

Every section is optional and falls back to the nominal vehicle and
problem; unknown sections or keys are rejected.  Angles are given in
degrees here and converted to radians when the domain objects are built.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import dynamics as dyn
from .dataset import DEFAULT_SPLIT, PerturbationRanges
from .mlp import TrainConfig
from .scp import DATASET, ONLINE, ScpConfig
from .subproblem import GuidanceProblem, ScpWeights

PRESETS = ("table1", "mission1", "mission2", "trial13", "trial13_h6")


class ConfigError(ValueError):
    pass


def _vec(name, val, n=3):
    a = np.asarray(val, dtype=float)
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ConfigError(f"{name}: expected {n} finite numbers")
    return a


@dataclass
class VehicleSection:
    g0_mps2: float = 9.81
    isp_s: float = 282.0
    p_atm_pa: float = 0.0
    s_ne_m2: float = 0.0
    rho_kgpm3: float = 1.225
    s_a_m2: float = 10.0
    c_a_diag: list = field(default_factory=lambda: [3.0, 3.0, 1.0])
    j_b_diag_kgm2: list = field(default_factory=lambda: [4e6, 4e6, 1e5])
    d_t_m: list = field(default_factory=lambda: [0.0, 0.0, -14.0])
    d_a_m: list = field(default_factory=lambda: [0.0, 0.0, 2.0])
    g_mps2: list = field(default_factory=lambda: [0.0, 0.0, -9.81])
    aero_body_frame: bool = False

    def build(self) -> dyn.VehicleParams:
        return dyn.VehicleParams(
            g0=self.g0_mps2,
            isp=self.isp_s,
            p_atm=self.p_atm_pa,
            s_ne=self.s_ne_m2,
            rho=self.rho_kgpm3,
            s_a=self.s_a_m2,
            c_a=np.diag(_vec("c_a_diag", self.c_a_diag)),
            j_b=np.diag(_vec("j_b_diag_kgm2", self.j_b_diag_kgm2)),
            d_t=_vec("d_t_m", self.d_t_m),
            d_a=_vec("d_a_m", self.d_a_m),
            g_vec=_vec("g_mps2", self.g_mps2),
            aero_body_frame=bool(self.aero_body_frame),
        )


@dataclass
class BoundsSection:
    m_min_kg: float = 22000.0
    t_min_newton: float = 320000.0
    t_max_newton: float = 800000.0
    gamma_c_deg: float = 20.0
    theta_max_deg: float = 80.0
    omega_max_degps: float = 30.0
    vartheta_max_deg: float = 20.0

    def build(self) -> dyn.ProblemBounds:
        return dyn.ProblemBounds(
            m_min=self.m_min_kg,
            t_min=self.t_min_newton,
            t_max=self.t_max_newton,
            gamma_c=np.deg2rad(self.gamma_c_deg),
            theta_max=np.deg2rad(self.theta_max_deg),
            omega_max=np.deg2rad(self.omega_max_degps),
            vartheta_max=np.deg2rad(self.vartheta_max_deg),
        )


@dataclass
class MissionSection:
    m0_kg: float = 30000.0
    r0_m: list = field(default_factory=lambda: [0.0, 0.0, 1500.0])
    v0_mps: list = field(default_factory=lambda: [0.0, 0.0, -80.0])
    q0: list | None = None  # unit quaternion, ordering per quat_convention
    quat_convention: str = "scalar_first"
    euler0_deg: list | None = None  # (roll, pitch, yaw), Z-Y-X intrinsic
    w0_degps: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def initial_state(self) -> np.ndarray:
        if self.q0 is not None and self.euler0_deg is not None:
            raise ConfigError("mission: give q0 or euler0_deg, not both")
        if self.euler0_deg is not None:
            q = dyn.euler_to_quat(*np.deg2rad(_vec("euler0_deg", self.euler0_deg)))
        elif self.q0 is not None:
            q = _vec("q0", self.q0, 4)
            if self.quat_convention == "scalar_last":
                q = np.roll(q, 1)
            elif self.quat_convention != "scalar_first":
                raise ConfigError("mission.quat_convention must be scalar_first or scalar_last")
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ConfigError("mission.q0 must be a unit quaternion")
        else:
            q = dyn.Q_IDENTITY.copy()
        return np.concatenate(
            [[self.m0_kg], _vec("r0_m", self.r0_m), _vec("v0_mps", self.v0_mps), q, np.deg2rad(_vec("w0_degps", self.w0_degps))]
        )


@dataclass
class DiscretizationSection:
    n_nodes: int = 30
    n_substeps: int = 10


@dataclass
class ScpSection:
    w_tr: float = 0.5
    w_vc: float = 1e5
    eps_tr: float = 5e-4
    eps_vc: float = 5e-4
    eps_x: float = 1e-2
    criteria_mode: str = ONLINE
    max_iters: int = 20
    tf_guess_s: float = 18.0
    backend: str = "clarabel"

    def build(self, mode: str | None = None) -> ScpConfig:
        return ScpConfig(
            weights=ScpWeights(self.w_tr, self.w_vc),
            eps_tr=self.eps_tr,
            eps_vc=self.eps_vc,
            eps_x=self.eps_x,
            criteria_mode=mode or self.criteria_mode,
            max_iters=self.max_iters,
            tf_guess=self.tf_guess_s,
        )


@dataclass
class DatasetSection:
    count: int = 2000
    split_fraction: float = DEFAULT_SPLIT
    seed: int = 7
    dm_kg: float = 0.0
    dr_m: list = field(default_factory=lambda: [500.0, 500.0, 0.0])
    dv_mps: list = field(default_factory=lambda: [40.0, 40.0, 20.0])
    d_euler_deg: list = field(default_factory=lambda: [30.0, 30.0, 0.0])
    dw_degps: list = field(default_factory=lambda: [20.0, 20.0, 0.0])

    def ranges(self) -> PerturbationRanges:
        return PerturbationRanges(self.dm_kg, tuple(self.dr_m), tuple(self.dv_mps), tuple(self.d_euler_deg), tuple(self.dw_degps))


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 800
    weight_decay: float = 1e-5
    plateau_patience_epochs: int = 25
    lr_decay_factor: float = 10.0
    lr_min: float = 1e-6
    seed: int = 0
    hidden_layers: int = 5
    hidden_units: int = 256

    def build(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            plateau_patience=self.plateau_patience_epochs,
            lr_decay_factor=self.lr_decay_factor,
            lr_min=self.lr_min,
            seed=self.seed,
            hidden_layers=self.hidden_layers,
            hidden_units=self.hidden_units,
        )


@dataclass
class McSection:
    n_cases: int = 100
    seed: int = 1001


@dataclass
class PathsSection:
    output_dir: str = "out"
    dataset: str = "dataset"  # relative paths resolve against output_dir
    model: str = "model.bin"


SECTIONS = {
    "vehicle": VehicleSection,
    "bounds": BoundsSection,
    "mission": MissionSection,
    "discretization": DiscretizationSection,
    "scp": ScpSection,
    "dataset": DatasetSection,
    "train": TrainSection,
    "mc": McSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    vehicle: VehicleSection = field(default_factory=VehicleSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    mission: MissionSection = field(default_factory=MissionSection)
    discretization: DiscretizationSection = field(default_factory=DiscretizationSection)
    scp: ScpSection = field(default_factory=ScpSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    mc: McSection = field(default_factory=McSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- domain objects ------------------------------------------------------

    def problem(self) -> GuidanceProblem:
        return GuidanceProblem(
            self.vehicle.build(),
            self.bounds.build(),
            self.mission.initial_state(),
            self.discretization.n_nodes,
            self.discretization.n_substeps,
        )

    def validate(self) -> "RunConfig":
        """Build every domain object once so bad values surface as ConfigError."""
        try:
            self.problem()
            self.scp.build()
            self.scp.build(DATASET)
            self.dataset.ranges()
            self.train.build()
            if self.mc.n_cases < 1 or self.dataset.count < 1:
                raise ValueError("counts must be >= 1")
            if not 0 < self.dataset.split_fraction <= 1:
                raise ValueError("dataset.split_fraction must be in (0, 1]")
            if self.scp.backend not in ("clarabel", "cvxopt"):
                raise ValueError(f"unknown backend {self.scp.backend!r}")
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_type(section: str, key: str, default, value):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
    elif isinstance(default, list) or default is None:
        if value is not None and not (isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            raise ConfigError(f"{where}: expected a list of numbers")
    return value


def merge(cfg: RunConfig, doc: dict) -> RunConfig:
    """Overlay a parsed document onto ``cfg`` with strict key checking."""
    if doc is None:
        return cfg
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping of sections")
    for sec_name, body in doc.items():
        if sec_name not in SECTIONS:
            raise ConfigError(f"unknown section {sec_name!r}")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {sec_name!r} must be a mapping")
        sec = getattr(cfg, sec_name)
        names = {f.name for f in fields(sec)}
        for key, value in body.items():
            if key not in names:
                raise ConfigError(f"unknown key {sec_name}.{key}")
            setattr(sec, key, _check_type(sec_name, key, getattr(type(sec)(), key), value))
    return cfg


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error: {exc}") from exc
    return merge(base or RunConfig(), doc)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return resources.files("warmscp").joinpath("presets", f"{name}.yaml").read_text()


def load_config(path=None, preset: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the preset, then the file, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if preset:
        cfg = parse_text(preset_text(preset), cfg)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_text(text, cfg)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        cfg = merge(cfg, {sec: {name: value}})
    return cfg.validate()
