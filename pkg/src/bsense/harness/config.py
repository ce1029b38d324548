"""Experiment configuration, read from and written to YAML.

Every section is a dataclass; unknown keys are rejected so typos fail loudly.
Length-like settings left as ``null`` resolve against the mesh width when the
experiment is built.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from bsense.harness.scenarios import SCENARIO_NAMES, TRUE_STIFFNESS

CONTROLLERS = ("lgh", "lgd", "sld", "pmp", "user")
MODES = ("state", "pointcloud")
SCHEDULES = ("corner_lifts", "active", "cut_loop", "suture")


@dataclass
class MeshSpec:
    rows: int = 10
    cols: int = 10
    spacing: float = 1.0 / 9.0  # unit-width sheet at 10 x 10


@dataclass
class PhysicsSpec:
    k_m: float = 1.0
    k_bend: float | None = None
    k_a: float = 1.0
    grasp_radius: float | None = None
    gravity: list[float] | None = field(default_factory=lambda: [0.0, 0.0, -0.01])
    ground_plane_z: float | None = 0.0
    particle_mass: float = 1.0
    dt: float = 1.0
    method: str = "newton"
    max_iterations: int = 200
    residual_tolerance: float | None = None
    inertial_frame: bool = True


@dataclass
class NoiseSpec:
    obs_variance: float = 1e-6
    base_motion_variance: float = 0.0
    event_motion_variance: float = 0.05
    suture_stiffness: float = 0.1
    event_dilation: int = 1
    joseph: bool = False


@dataclass
class EstimatorSpec:
    k: int = 3
    mu0: float = 1e-4
    sigma0: float = 0.1
    jacobian: str = "implicit"
    noise: NoiseSpec = field(default_factory=NoiseSpec)


@dataclass
class ControllerSpec:
    kind: str = "user"
    step_size: float | None = None  # null -> 0.02 * mesh width
    lg_iterations: int = 10
    sample_count: int = 100
    sl_iterations: int = 5
    truncation_length: float | None = None  # null -> 0.05 * mesh width
    elite_fraction: float = 0.1
    gradient: str = "adjoint"
    max_backtracks: int = 4
    primitive: str | None = None  # pmp: force one direction instead of searching
    primitive_step: float | None = None  # null -> 0.02 * mesh width
    energy_weight: float = 1.0
    workspace_weight: float = 10.0
    uwd_weight: float | None = None  # null -> 1 / width^2
    entropy_weight: float = 1.0


@dataclass
class ScheduleSpec:
    kind: str = "corner_lifts"
    lift_fraction: float = 0.5
    lift_steps: int = 50
    grasp_corner: int = 0  # index into the mesh corners for active phases
    pre_lift_steps: int = 5  # scripted lift before feedback controllers take over
    pre_lift_fraction: float = 0.1
    max_cycles: int = 10  # cut loop
    sense_steps: int = 50  # steps per active phase in cut/suture runs
    suture_region: str | list[int] = "Line"  # scenario layout name or explicit indices


@dataclass
class EventSpec:
    t: int
    kind: str
    region: str | list[int]


@dataclass
class SafetySpec:
    energy_max: float = 1e-8  # reference threshold in the original unit system
    safe_fraction: float = 0.05  # attached particles displaced by this share of the width


@dataclass
class MetricSpec:
    b_thresh: float = 0.05
    dilation: int = 1


@dataclass
class PointCloudSpec:
    count: int = 1000
    model_samples: int | None = None  # surface samples on the simulated sheet; null -> count
    noise_fraction: float = 0.01
    alpha_step: float = 0.05
    decay: float = 0.9
    rounds: int = 5
    outer_rounds: int = 2
    obs_variance: float | None = None  # null -> (noise_fraction * width)^2


@dataclass
class BaselineSpec:
    adam: bool = False
    lr: float = 0.005


@dataclass
class ExperimentConfig:
    scenario: str = "Line"
    stiffness: float = TRUE_STIFFNESS
    mode: str = "state"
    seed: int = 0
    horizon: int | None = None  # T; null -> length of the schedule
    snapshot_every: int = 50
    mesh: MeshSpec = field(default_factory=MeshSpec)
    physics: PhysicsSpec = field(default_factory=PhysicsSpec)
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    events: list[EventSpec] = field(default_factory=list)
    safety: SafetySpec = field(default_factory=SafetySpec)
    metrics: MetricSpec = field(default_factory=MetricSpec)
    pointcloud: PointCloudSpec = field(default_factory=PointCloudSpec)
    baseline: BaselineSpec = field(default_factory=BaselineSpec)

    def validate(self) -> ExperimentConfig:
        if self.scenario not in SCENARIO_NAMES:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.controller.kind not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.schedule.kind not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.safety.energy_max > 0 or not self.safety.safe_fraction > 0:
            raise ValueError("safety thresholds must be positive")
        if self.estimator.k < 1:
            raise ValueError("k must be >= 1")
        if not self.metrics.b_thresh > 0 or self.metrics.dilation < 0:
            raise ValueError("b_thresh must be positive and dilation >= 0")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0")
        for ev in self.events:
            if ev.kind not in ("cut", "suture") or ev.t < 0:
                raise ValueError(f"bad event {ev}")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


_NESTED = {
    "mesh": MeshSpec, "physics": PhysicsSpec, "estimator": EstimatorSpec, "noise": NoiseSpec,
    "controller": ControllerSpec, "schedule": ScheduleSpec, "safety": SafetySpec, "metrics": MetricSpec,
    "pointcloud": PointCloudSpec, "baseline": BaselineSpec,
}


def _plain(v: Any):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def _build(cls, data: dict | None, where: str):
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ValueError(f"section {where or 'root'} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown key(s) in {where or 'root'}: {', '.join(sorted(unknown))}")
    kw = {}
    for k, v in data.items():
        if k in _NESTED:
            kw[k] = _build(_NESTED[k], v, f"{where}.{k}".lstrip("."))
        elif k == "events" and cls is ExperimentConfig:
            kw[k] = [_build(EventSpec, e, "events") for e in (v or [])]
        else:
            kw[k] = v
    return cls(**kw)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path) -> ExperimentConfig:
    with Path(path).open() as fh:
        return config_from_dict(yaml.safe_load(fh))


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return path
