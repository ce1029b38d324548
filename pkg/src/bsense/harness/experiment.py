"""The closed sensing loop: hidden simulator, filter, controller, topology events.

Every step runs in a fixed order: apply any scheduled event to the hidden
sheet and the belief, predict, observe the hidden step and update, then pick
the next action. Four schedules build on that step:

``corner_lifts``  each corner grasped from rest and lifted in turn
``active``        one corner grasped, optional scripted pre-lift, then the controller
``cut_loop``      sense, cut the current detections, repeat until nothing is detected
``suture``        sense a free sheet, suture a region, sense again
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from bsense.controllers import ControllerConfig, PrimitiveSet, SamplingPlanner, lg_step, pmp_select
from bsense.errors import BsenseError
from bsense.estimator import (BoundaryBelief, NoiseConfig, Transition, ekf_predict, ekf_update, entropy,
                              export_belief, make_cut_event, make_suture_event, sample_timesteps)
from bsense.harness.baseline import AdamState, adam_baseline_update
from bsense.harness.config import ExperimentConfig, dump_config
from bsense.harness.metrics import detections, mean_boundary_energy, pcd_pug, scaled_energy_threshold
from bsense.harness.scenarios import attachment_mask, lift_targets, make_scenario
from bsense.harness.trace import TraceRecord, export_trace
from bsense.mesh import Mesh, build_grid_mesh, export_obj
from bsense.objectives import LossWeights
from bsense.registration import CloudTransition, RegistrationConfig, joint_estimate, synth_observation
from bsense.simulator import Simulator, SolverConfig

logger = logging.getLogger(__name__)


class HorizonReached(Exception):
    """Internal signal: the configured number of steps has been taken."""


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[TraceRecord] = field(default_factory=list)
    belief: BoundaryBelief | None = None
    truth_b: np.ndarray | None = None
    adam_b: np.ndarray | None = None
    energy_max: float = 0.0
    energy_max_scaled: float = 0.0
    error: str | None = None
    # (t, kind, pcd, pug) measured right after each event's prediction, before its update
    post_event: list[tuple] = field(default_factory=list)
    cycles: int = 0
    detached: bool | None = None
    registration_rmse: list[float] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    mesh: Mesh | None = None

    @property
    def final(self) -> TraceRecord | None:
        return self.records[-1] if self.records else None

    def max_boundary_energy(self) -> float:
        return max((r.boundary_energy for r in self.records), default=0.0)


# -- construction -------------------------------------------------------------------------

def build_mesh(cfg: ExperimentConfig) -> Mesh:
    return build_grid_mesh(cfg.mesh.rows, cfg.mesh.cols, cfg.mesh.spacing)


def build_simulator(cfg: ExperimentConfig, mesh: Mesh) -> Simulator:
    p = cfg.physics
    kw = dict(max_iterations=p.max_iterations, gravity=p.gravity, ground_plane_z=p.ground_plane_z,
              method=p.method, inertial_frame=p.inertial_frame, particle_mass=p.particle_mass, dt=p.dt)
    if p.residual_tolerance is not None:
        kw["residual_tolerance"] = p.residual_tolerance
    return Simulator(mesh, SolverConfig.for_mesh(mesh, **kw), k_m=p.k_m, k_bend=p.k_bend, k_a=p.k_a,
                     grasp_radius=p.grasp_radius)


def build_noise(cfg: ExperimentConfig, mesh: Mesh) -> NoiseConfig:
    n = cfg.estimator.noise
    obs = n.obs_variance
    if cfg.mode == "pointcloud":
        pc = cfg.pointcloud
        obs = pc.obs_variance if pc.obs_variance is not None else (pc.noise_fraction * mesh.width) ** 2
    return NoiseConfig(obs_variance=obs, base_motion_variance=n.base_motion_variance,
                       event_motion_variance=n.event_motion_variance, suture_stiffness=n.suture_stiffness,
                       event_dilation=n.event_dilation, joseph=n.joseph)


def build_controller(cfg: ExperimentConfig, mesh: Mesh) -> tuple[ControllerConfig, LossWeights]:
    c = cfg.controller
    kw = dict(lg_iterations=c.lg_iterations, sample_count=c.sample_count, sl_iterations=c.sl_iterations,
              elite_fraction=c.elite_fraction, gradient=c.gradient, max_backtracks=c.max_backtracks,
              rng_seed=cfg.seed)
    if c.step_size is not None:
        kw["step_size"] = c.step_size
    if c.truncation_length is not None:
        kw["truncation_length"] = c.truncation_length
    wkw = dict(energy_weight=c.energy_weight, workspace_weight=c.workspace_weight, entropy_weight=c.entropy_weight)
    if c.uwd_weight is not None:
        wkw["uwd_weight"] = c.uwd_weight
    return ControllerConfig.for_mesh(mesh, **kw), LossWeights.for_mesh(mesh, **wkw)


def _region(mesh: Mesh, region) -> np.ndarray:
    if isinstance(region, str):
        return np.flatnonzero(attachment_mask(region, mesh))
    return np.asarray(region, dtype=np.int64)


# -- the loop ---------------------------------------------------------------------------------

class Session:
    """Mutable state of one run: hidden sheet, belief, transition history, trace."""

    def __init__(self, cfg: ExperimentConfig, truth_b: np.ndarray, result: ExperimentResult):
        self.cfg = cfg
        self.result = result
        self.mesh = build_mesh(cfg)
        self.sim = build_simulator(cfg, self.mesh)
        self.noise = build_noise(cfg, self.mesh)
        self.ccfg, self.weights = build_controller(cfg, self.mesh)
        self.primitives = PrimitiveSet(step=cfg.controller.primitive_step or 0.02 * self.mesh.width)
        self.planner = SamplingPlanner(self.ccfg) if cfg.controller.kind == "sld" else None
        self.truth_b = np.asarray(truth_b, dtype=np.float64).copy()
        est = cfg.estimator
        self.belief = BoundaryBelief.initial(self.mesh.particle_count, est.mu0, est.sigma0)
        self.rng = np.random.default_rng(cfg.seed)
        self.cloud_rng = np.random.default_rng([cfg.seed, 1])
        self.reg_cfg = RegistrationConfig(alpha_step=cfg.pointcloud.alpha_step, decay=cfg.pointcloud.decay,
                                          rounds=cfg.pointcloud.rounds,
                                          sample_count=cfg.pointcloud.model_samples or cfg.pointcloud.count,
                                          outer_rounds=cfg.pointcloud.outer_rounds, seed=cfg.seed)
        self.adam_b = np.full(self.mesh.particle_count, est.mu0) if self._adam else None
        self.adam_state = AdamState(lr=cfg.baseline.lr)
        self.history: list = []
        self.t_c = 0
        self.t = 0
        self.state_true = self.sim.rest_state()
        self.state_obs = self.sim.rest_state()
        self.events = {}
        for ev in cfg.events:
            self.events.setdefault(ev.t, []).append((ev.kind, _region(self.mesh, ev.region)))
        self.u = np.zeros(3)

    @property
    def _adam(self) -> bool:
        return self.cfg.baseline.adam and self.cfg.mode == "state"

    @property
    def truth_mask(self) -> np.ndarray:
        return self.truth_b > 0

    # -- physical set-up ---------------------------------------------------------------
    def regrasp(self, u0, reset: bool = True):
        """Grasp at ``u0``; with ``reset`` the sheet is first returned to rest."""
        true = self.sim.rest_state() if reset else self.sim.release(self.state_true)
        obs = self.sim.rest_state() if reset else self.sim.release(self.state_obs)
        self.state_true = self.sim.grasp(replace(true, time_index=self.t), u0)
        self.state_obs = self.sim.grasp(replace(obs, time_index=self.t), u0)
        self.u = np.asarray(u0, dtype=np.float64).copy()

    def schedule_event(self, kind: str, region):
        self.events.setdefault(self.t, []).append((kind, np.asarray(region, dtype=np.int64)))

    # -- one step -----------------------------------------------------------------------
    def _apply_events(self):
        labels, event = [], None
        for kind, region in self.events.pop(self.t, []):
            if kind == "cut":
                self.truth_b[region] = 0.0
                event = make_cut_event(self.mesh, region, self.belief, self.noise)
            else:
                self.truth_b[region] = self.cfg.stiffness
                event = make_suture_event(self.mesh, region, self.belief, self.noise)
            # several events on one step are folded into successive predictions
            self.belief = replace(ekf_predict(self.belief, event, self.noise), time_index=self.belief.time_index)
            labels.append(kind)
            pcd, pug = self.metrics()
            self.result.post_event.append((self.t, kind, pcd, pug))
        if labels:
            self.t_c = len(self.history)
            self.belief = replace(self.belief, time_index=self.belief.time_index + 1)
        else:
            self.belief = ekf_predict(self.belief, None, self.noise)
        return "+".join(labels)

    def step(self, u) -> TraceRecord:
        if self.cfg.horizon is not None and self.t >= self.cfg.horizon:
            raise HorizonReached
        u = np.asarray(u, dtype=np.float64)
        label = self._apply_events()
        nxt = self.sim.step(self.state_true, u, self.truth_b)
        est = self.cfg.estimator
        if self.cfg.mode == "state":
            self.history.append(Transition(self.state_obs, u, nxt.positions))
            M = sample_timesteps(self.t_c, len(self.history) - 1, est.k, self.rng)
            self.belief = ekf_update(self.belief, self.history, M, self.sim, self.noise, est.jacobian)
            if self.adam_b is not None:
                self.adam_b, self.adam_state = adam_baseline_update(self.adam_b, self.history, M, self.adam_state,
                                                                    self.sim, est.jacobian)
            self.state_obs = nxt
        else:
            pc = self.cfg.pointcloud
            cloud = synth_observation(self.mesh, nxt, pc.noise_fraction * self.mesh.width, pc.count, self.cloud_rng)
            self.history.append(CloudTransition(self.state_obs, u, cloud))
            M = sample_timesteps(self.t_c, len(self.history) - 1, est.k, self.rng)
            self.belief, reg = joint_estimate(self.sim, self.belief, self.history, M, self.noise, self.reg_cfg,
                                              est.jacobian)
            self.state_obs = reg
            err = reg.positions - nxt.positions
            self.result.registration_rmse.append(float(np.sqrt(np.mean(np.einsum("ij,ij->i", err, err)))))
        self.state_true = nxt
        self.u = u
        pcd, pug = self.metrics()
        rec = TraceRecord(self.t, tuple(float(c) for c in u), entropy(self.belief),
                          mean_boundary_energy(nxt.positions, self.sim.anchors, self.truth_b), pcd, pug, label)
        self.result.records.append(rec)
        every = self.cfg.snapshot_every
        if every and self.t % every == 0:
            self.result.snapshots[self.t] = nxt.positions.copy()
        self.t += 1
        return rec

    def metrics(self):
        m = self.cfg.metrics
        return pcd_pug(self.belief.mean, self.truth_mask, m.b_thresh, m.dilation, self.mesh)

    # -- actions ------------------------------------------------------------------------------
    def next_action(self, kind: str) -> np.ndarray:
        """Controller output from the current observed state and belief."""
        if kind in ("lgh", "lgd"):
            return lg_step(kind, self.sim, self.state_obs, self.belief, self.u, self.ccfg, self.weights, self.noise)
        if kind == "sld":
            return self.planner.plan(self.sim, self.state_obs, self.belief, self.u, self.weights)
        if kind == "pmp":
            name = self.cfg.controller.primitive
            if name is not None:
                d = PrimitiveSet(names=(name,)).directions[0]
                return self.u + self.primitives.step * d
            return pmp_select(self.sim, self.state_obs, self.belief, self.u, self.primitives, self.noise)
        raise ValueError(f"no feedback controller named {kind!r}")

    def sense_phase(self, corner: int, steps: int, kind: str | None = None):
        """Grasp a corner from rest and take ``steps`` steps.

        The ``user`` policy lifts straight up to ``lift_fraction`` of the width
        over ``lift_steps`` and then holds; feedback controllers take over after
        ``pre_lift_steps`` scripted lift steps.
        """
        sch = self.cfg.schedule
        kind = kind or self.cfg.controller.kind
        u0 = self.mesh.rest_positions[self.mesh.corners()[corner % 4]].copy()
        self.regrasp(u0)
        W = self.mesh.width
        if kind == "user":
            script = lift_targets(u0, sch.lift_fraction * W, max(sch.lift_steps, 1))
        elif sch.pre_lift_steps > 0:
            script = lift_targets(u0, sch.pre_lift_fraction * W, sch.pre_lift_steps)
        else:
            script = np.zeros((0, 3))
        for i in range(steps):
            if i < len(script):
                u = script[i]
            elif kind == "user":
                u = script[-1] if len(script) else u0
            else:
                u = self.next_action(kind)
            self.step(u)


# -- schedules --------------------------------------------------------------------------------

def _corner_lifts(s: Session):
    sch = s.cfg.schedule
    for c in range(4):
        s.sense_phase(c, sch.lift_steps, "user")


def _active(s: Session):
    T = s.cfg.horizon if s.cfg.horizon is not None else 150
    s.sense_phase(s.cfg.schedule.grasp_corner, T)


def _cut_loop(s: Session):
    sch, m = s.cfg.schedule, s.cfg.metrics
    for cycle in range(sch.max_cycles):
        s.sense_phase(sch.grasp_corner + cycle, sch.sense_steps)
        s.result.cycles = cycle + 1
        det = np.flatnonzero(detections(s.belief.mean, m.b_thresh))
        if det.size == 0:
            break
        logger.info("cycle %d: cutting %d particles", cycle + 1, det.size)
        s.schedule_event("cut", det)
    no_det = not np.any(detections(s.belief.mean, m.b_thresh))
    s.result.detached = bool(no_det and not np.any(s.truth_b > 0))


def _suture(s: Session):
    sch = s.cfg.schedule
    s.sense_phase(sch.grasp_corner, sch.sense_steps)
    s.schedule_event("suture", _region(s.mesh, sch.suture_region))
    s.sense_phase(sch.grasp_corner + 1, sch.sense_steps)


_SCHEDULES = {"corner_lifts": _corner_lifts, "active": _active, "cut_loop": _cut_loop, "suture": _suture}


def initial_truth(cfg: ExperimentConfig, mesh: Mesh) -> np.ndarray:
    """Hidden stiffness at t = 0; the suture schedule starts from a free sheet."""
    if cfg.schedule.kind == "suture":
        return np.zeros(mesh.particle_count)
    return make_scenario(cfg.scenario, mesh, cfg.stiffness).ground_truth_b


def safety_threshold(cfg: ExperimentConfig, mesh: Mesh) -> float:
    """Energy threshold scaled to this mesh from the layout that will be attached."""
    layout = cfg.schedule.suture_region if cfg.schedule.kind == "suture" else cfg.scenario
    b = np.zeros(mesh.particle_count)
    b[_region(mesh, layout)] = cfg.stiffness
    return scaled_energy_threshold(mesh, b, cfg.safety.safe_fraction)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run the configured schedule; solver or controller failures end the run early.

    A failure is recorded as the run's ``error`` and as an ``error:`` event on
    a final trace row; whatever was produced so far is still written out.
    """
    cfg.validate()
    mesh = build_mesh(cfg)
    result = ExperimentResult(cfg, mesh=mesh)
    result.energy_max = cfg.safety.energy_max
    result.energy_max_scaled = safety_threshold(cfg, mesh)
    s = Session(cfg, initial_truth(cfg, mesh), result)
    try:
        _SCHEDULES[cfg.schedule.kind](s)
    except HorizonReached:
        pass
    except (BsenseError, np.linalg.LinAlgError) as exc:
        logger.error("run aborted at t=%d: %s", s.t, exc)
        result.error = f"{type(exc).__name__}: {exc}"
        last = result.records[-1] if result.records else None
        result.records.append(TraceRecord(
            s.t, tuple(float(c) for c in s.u), entropy(s.belief),
            last.boundary_energy if last else 0.0, *s.metrics(), f"error:{type(exc).__name__}"))
    result.belief = s.belief
    result.truth_b = s.truth_b.copy()
    result.adam_b = None if s.adam_b is None else s.adam_b.copy()
    if cfg.snapshot_every:
        result.snapshots.setdefault(s.t - 1 if s.t else 0, s.state_true.positions.copy())
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    comments = {"scenario": cfg.scenario, "schedule": cfg.schedule.kind, "controller": cfg.controller.kind,
                "mode": cfg.mode, "seed": cfg.seed, "energy_max": f"{result.energy_max:.9g}",
                "energy_max_scaled": f"{result.energy_max_scaled:.9g}"}
    if result.error:
        comments["error"] = result.error
    export_trace(result.records, out / "trace.csv", comments)
    if result.belief is not None:
        export_belief(result.belief, out / "belief_final.csv")
    if result.adam_b is not None:
        export_belief(BoundaryBelief(result.adam_b, np.zeros((len(result.adam_b),) * 2)), out / "adam_final.csv")
    for t, pos in sorted(result.snapshots.items()):
        export_obj(result.mesh, pos, out / f"mesh_{t:04d}.obj")
    dump_config(cfg, out / "config_resolved.yaml")
    return out


# -- comparisons ----------------------------------------------------------------------------

def run_pmp_comparison(cfg: ExperimentConfig, out_dir=None) -> tuple[str, dict[str, ExperimentResult]]:
    """Each primitive run on its own as a constant direction; returns the lowest-entropy one and all runs."""
    runs = {}
    for name in PrimitiveSet().names:
        c = replace(cfg, controller=replace(cfg.controller, kind="pmp", primitive=name))
        runs[name] = run_experiment(c, None if out_dir is None else Path(out_dir) / name)
    best = min(runs, key=lambda k: runs[k].final.entropy if runs[k].final else np.inf)
    return best, runs


def first_violation(result: ExperimentResult, threshold: float | None = None) -> int | None:
    """First step whose ground-truth boundary energy reaches the threshold, or None."""
    thr = result.energy_max_scaled if threshold is None else threshold
    for r in result.records:
        if r.boundary_energy >= thr:
            return r.t
    return None
