"""Action selection for active sensing.

* local gradient controllers (entropy surrogate or displacement loss) with
  guarded descent,
* a sampling-based large-step planner that refines a population of candidate
  targets and moves a truncated step towards the best,
* an exhaustive search over fixed motion primitives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from bsense.errors import ControllerError, SolverDivergenceError
from bsense.estimator import BoundaryBelief, NoiseConfig, log_entropy_product_form
from bsense.jacobian import observation_jacobian
from bsense.mesh import Mesh
from bsense.objectives import LossWeights, loss_LD, loss_LD_and_grad, loss_LH
from bsense.simulator import SimState, Simulator

logger = logging.getLogger(__name__)


@dataclass
class ControllerConfig:
    step_size: float = 0.02
    lg_iterations: int = 10
    sample_count: int = 100
    sl_iterations: int = 5
    truncation_length: float = 0.05
    elite_fraction: float = 0.10
    workspace_bounds: tuple | None = None  # ((xmin, ymin, zmin), (xmax, ymax, zmax))
    fd_eps: float = 1e-5
    gradient: str = "adjoint"  # "adjoint" or "fd" (LG-H always uses finite differences)
    max_backtracks: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not 0 <= self.elite_fraction < 1:
            raise ValueError("elite_fraction must lie in [0, 1)")
        if not self.truncation_length > 0:
            raise ValueError("truncation_length must be positive")
        if self.lg_iterations < 0 or self.sl_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if not self.fd_eps > 0:
            raise ValueError("fd_eps must be positive")
        if self.gradient not in ("adjoint", "fd"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")

    @classmethod
    def for_mesh(cls, mesh: Mesh, **kw) -> ControllerConfig:
        """Mesh-relative defaults: steps scale with the mesh width."""
        W = mesh.width
        kw.setdefault("step_size", 0.02 * W)
        kw.setdefault("truncation_length", 0.05 * W)
        kw.setdefault("workspace_bounds", default_workspace_bounds(mesh))
        return cls(**kw)


def default_workspace_bounds(mesh: Mesh):
    """Mesh bounding box extruded upward by one mesh width, clipped at z >= 0."""
    lo = mesh.rest_positions.min(axis=0).astype(float)
    hi = mesh.rest_positions.max(axis=0).astype(float)
    lo[2] = max(lo[2], 0.0)
    hi[2] = max(hi[2], 0.0) + mesh.width
    return tuple(lo), tuple(hi)


_DIRECTIONS = {
    "up": (0.0, 0.0, 1.0),
    "forward": (1.0, 0.0, 0.0),
    "backward": (-1.0, 0.0, 0.0),
    "left": (0.0, 1.0, 0.0),
    "right": (0.0, -1.0, 0.0),
}


@dataclass(frozen=True)
class PrimitiveSet:
    """Fixed motion directions; downward motion is never offered."""

    names: tuple[str, ...] = ("up", "forward", "backward", "left", "right")
    step: float = 0.02

    def __post_init__(self):
        if not self.names:
            raise ValueError("primitive set must be non-empty")
        for n in self.names:
            if n not in _DIRECTIONS:
                raise ValueError(f"unknown primitive {n!r}")

    @property
    def directions(self) -> np.ndarray:
        return np.array([_DIRECTIONS[n] for n in self.names])


def action_gradient(loss: Callable[[np.ndarray], float], u, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss`` over the 3-D action."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    u = np.asarray(u, dtype=np.float64)
    g = np.zeros(3)
    for c in range(3):
        e = np.zeros(3)
        e[c] = eps
        g[c] = (loss(u + e) - loss(u - e)) / (2 * eps)
    return g


def _loss_and_grad(kind: str, sim, x_ref, belief, weights, noise, cfg):
    """Closures ``f(u)`` and ``fg(u) -> (f, grad)`` for the chosen loss."""
    if kind == "lgh":
        def f(u):
            return loss_LH(sim, x_ref, u, belief, weights, noise)
    elif kind == "lgd":
        def f(u):
            return loss_LD(sim, x_ref, u, belief, weights)
    else:
        raise ValueError(f"unknown local controller {kind!r}")

    if kind == "lgd" and cfg.gradient == "adjoint":
        def fg(u):
            return loss_LD_and_grad(sim, x_ref, u, belief, weights)
    else:
        def fg(u):
            return f(u), action_gradient(f, u, cfg.fd_eps)
    return f, fg


def guarded_descent(f, fg, u0, step_size: float, iterations: int, max_step: float | None = None,
                    max_backtracks: int = 4):
    """Gradient descent that only accepts loss-decreasing steps.

    Returns ``(u, loss, history)`` where ``history`` lists accepted losses.
    """
    u = np.asarray(u0, dtype=np.float64).copy()
    val, g = fg(u)
    history = [val]
    for _ in range(iterations):
        if not np.any(g) or not np.all(np.isfinite(g)):
            break
        step = step_size * g
        norm = float(np.linalg.norm(step))
        if max_step is not None and norm > max_step:
            step *= max_step / norm
        for _ in range(max_backtracks + 1):
            cand = u - step
            try:
                cv = f(cand)
            except SolverDivergenceError:
                cv = np.inf
            if cv < val:
                break
            step *= 0.5
        else:
            break
        u = cand
        val, g = fg(u)
        history.append(val)
    return u, val, history


def lg_step(kind: str, sim: Simulator, x_ref: SimState, belief: BoundaryBelief, u_prev, cfg: ControllerConfig,
            weights: LossWeights, noise: NoiseConfig | None = None) -> np.ndarray:
    """Local gradient controller: ``lg_iterations`` guarded steps from ``u_prev``.

    ``kind`` is ``"lgh"`` (entropy surrogate) or ``"lgd"`` (displacement).
    """
    noise = noise if noise is not None else NoiseConfig()
    f, fg = _loss_and_grad(kind, sim, x_ref, belief, weights, noise, cfg)
    u, _, _ = guarded_descent(f, fg, u_prev, cfg.step_size, cfg.lg_iterations,
                              max_step=cfg.truncation_length, max_backtracks=cfg.max_backtracks)
    return u


def truncate_step(u_prev, target, gamma: float) -> np.ndarray:
    """Move from ``u_prev`` toward ``target`` by at most ``gamma``."""
    u_prev = np.asarray(u_prev, dtype=np.float64)
    d = np.asarray(target, dtype=np.float64) - u_prev
    dist = float(np.linalg.norm(d))
    if dist < gamma:
        return np.asarray(target, dtype=np.float64).copy()
    return u_prev + gamma * d / dist


@dataclass
class SamplingPlanner:
    """Large-step planner state: RNG plus the elite samples carried between calls."""

    cfg: ControllerConfig
    rng: np.random.Generator = field(init=False)
    elites: np.ndarray = field(init=False)
    last_samples: np.ndarray | None = field(init=False, default=None)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.cfg.rng_seed)
        self.elites = np.zeros((0, 3))

    def initial_samples(self) -> np.ndarray:
        if self.cfg.workspace_bounds is None:
            raise ValueError("workspace bounds are required for sampling")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.cfg.workspace_bounds)
        fresh = self.rng.uniform(lo, hi, size=(self.cfg.sample_count - len(self.elites), 3))
        return np.vstack([self.elites, fresh])

    def plan(self, sim: Simulator, x_ref: SimState, belief: BoundaryBelief, u_prev, weights: LossWeights) -> np.ndarray:
        cfg = self.cfg
        samples = self.initial_samples()
        self.last_samples = samples.copy()
        f, fg = _loss_and_grad("lgd", sim, x_ref, belief, weights, None, cfg)
        refined = np.empty_like(samples)
        losses = np.empty(len(samples))
        for i, s in enumerate(samples):
            try:
                refined[i], losses[i], _ = guarded_descent(f, fg, s, cfg.step_size, cfg.sl_iterations,
                                                           max_backtracks=cfg.max_backtracks)
            except SolverDivergenceError as exc:
                logger.debug("sample %d diverged: %s", i, exc)
                refined[i], losses[i] = s, np.inf
        if not np.any(np.isfinite(losses)):
            raise ControllerError("every sample diverged")
        order = np.argsort(losses, kind="stable")
        keep = int(np.floor(cfg.elite_fraction * len(samples)))
        self.elites = refined[order[:keep]].copy()
        best = refined[order[0]]
        return truncate_step(u_prev, best, cfg.truncation_length)


def sl_d_plan(planner: SamplingPlanner, sim: Simulator, x_ref: SimState, belief: BoundaryBelief, u_prev,
              weights: LossWeights) -> np.ndarray:
    return planner.plan(sim, x_ref, belief, u_prev, weights)


def primitive_scores(sim: Simulator, x_ref: SimState, belief: BoundaryBelief, u_prev,
                     primitives: PrimitiveSet, noise: NoiseConfig) -> np.ndarray:
    """Predicted posterior log-determinant after each primitive."""
    u_prev = np.asarray(u_prev, dtype=np.float64)
    scores = np.empty(len(primitives.names))
    for i, d in enumerate(primitives.directions):
        _, J = observation_jacobian(sim, x_ref, u_prev + primitives.step * d, belief.mean)
        scores[i] = log_entropy_product_form(belief.cov, J, noise.obs_variance)
    return scores


def pmp_select(sim: Simulator, x_ref: SimState, belief: BoundaryBelief, u_prev, primitives: PrimitiveSet,
               noise: NoiseConfig) -> np.ndarray:
    """Exhaustive one-step search: the primitive with the lowest predicted entropy."""
    scores = primitive_scores(sim, x_ref, belief, u_prev, primitives, noise)
    best = int(np.argmin(scores))
    return np.asarray(u_prev, dtype=np.float64) + primitives.step * primitives.directions[best]
