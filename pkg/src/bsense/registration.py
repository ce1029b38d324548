"""Point-cloud observations: surface sampling, chamfer matching and joint state/stiffness estimation.

Surface samples are fixed barycentric combinations of face vertices, so a
sampled cloud is a linear function of the particle positions. With nearest
neighbour correspondences frozen, the chamfer distance is then a quadratic in
the positions and can be added as an extra energy term to a simulator step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from bsense.estimator import BoundaryBelief, NoiseConfig, apply_update
from bsense.jacobian import observation_jacobian
from bsense.mesh import Mesh
from bsense.simulator import SimState, Simulator

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """Face index and barycentric weights of every sample point."""

    faces: np.ndarray  # (K,) face index
    weights: np.ndarray  # (K, 3)
    vertex_ids: np.ndarray  # (K, 3) vertex indices of each sample's face

    def __len__(self):
        return len(self.faces)

    def matrix(self, n: int) -> sp.csr_matrix:
        """``(K, n)`` sparse map from particle positions to sample points."""
        K = len(self.faces)
        rows = np.repeat(np.arange(K), 3)
        return sp.csr_matrix((self.weights.ravel(), (rows, self.vertex_ids.ravel())), shape=(K, n))

    def points(self, positions: np.ndarray) -> np.ndarray:
        pos = np.asarray(positions)
        return np.einsum("kj,kjc->kc", self.weights, pos[self.vertex_ids])


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame_index: int = 0
    samples: SurfaceSamples | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def face_areas(mesh: Mesh, positions: np.ndarray) -> np.ndarray:
    p = np.asarray(positions)[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def sample_surface(mesh: Mesh, count: int, seed, positions: np.ndarray | None = None) -> SurfaceSamples:
    """Area-weighted uniform barycentric samples on the faces."""
    if count < 1:
        raise ValueError("count must be >= 1")
    pos = mesh.rest_positions if positions is None else np.asarray(positions)
    rng = np.random.default_rng(seed)
    area = face_areas(mesh, pos)
    faces = rng.choice(len(mesh.faces), size=count, p=area / area.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    w = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    return SurfaceSamples(faces, w, mesh.faces[faces])


def sample_surface_points(mesh: Mesh, state: SimState, count: int, seed) -> PointCloud:
    samples = sample_surface(mesh, count, seed, state.positions)
    return PointCloud(samples.points(state.positions), state.time_index, samples)


def synth_observation(mesh: Mesh, ground_truth_state: SimState, noise_sigma: float, count: int, seed) -> PointCloud:
    """Surface samples of the hidden state with isotropic Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    samples = sample_surface(mesh, count, rng, ground_truth_state.positions)
    pts = samples.points(ground_truth_state.positions)
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    return PointCloud(pts, ground_truth_state.time_index, None)


# -- chamfer -------------------------------------------------------------------------

def _nearest(tree_pts: np.ndarray, query: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Index of the nearest tree point per query; equal distances resolve to the lower index."""
    tree = cKDTree(tree_pts) if tree is None else tree
    k = min(2, len(tree_pts))
    d, idx = tree.query(query, k=k)
    if k == 1:
        return np.atleast_1d(idx)
    tie = np.isclose(d[:, 0], d[:, 1], rtol=0.0, atol=1e-15)
    return np.where(tie, idx.min(axis=1), idx[:, 0])


def _points(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point clouds must be non-empty")
    return pts


def chamfer(P, Q) -> float:
    """Sum of squared nearest-neighbour distances, both directions."""
    p, q = _points(P), _points(Q)
    dp, _ = cKDTree(q).query(p)
    dq, _ = cKDTree(p).query(q)
    return float(np.dot(dp, dp) + np.dot(dq, dq))


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Frozen matches: sample k -> target ``to_target[k]``; target j -> sample ``to_sample[j]``."""

    to_target: np.ndarray
    to_sample: np.ndarray


def correspondences(P: np.ndarray, Q: np.ndarray) -> Correspondences:
    return Correspondences(_nearest(Q, P), _nearest(P, Q))


def chamfer_quadratic(samples: SurfaceSamples, Q, corr: Correspondences, n: int):
    """Chamfer term with frozen matches as a callable ``x -> (value, grad, hess)``."""
    q = _points(Q)
    B = samples.matrix(n)
    B2 = B[corr.to_sample]
    q1 = q[corr.to_target]
    gram = (B.T @ B + B2.T @ B2).tocsr()
    hess = 2.0 * sp.kron(gram, sp.identity(3), format="csc")
    B1t, B2t = B.T.tocsr(), B2.T.tocsr()

    def term(x):
        x = np.asarray(x)
        r1 = B @ x - q1
        r2 = B2 @ x - q
        val = float(np.einsum("ij,ij->", r1, r1) + np.einsum("ij,ij->", r2, r2))
        # from the residuals rather than gram @ x - lin: exact zero on coincident clouds
        grad = 2.0 * (B1t @ r1 + B2t @ r2)
        return val, grad, hess

    return term


def chamfer_gradient(mesh: Mesh, positions: np.ndarray, samples: SurfaceSamples, Q,
                     corr: Correspondences | None = None) -> np.ndarray:
    """Per-vertex gradient of chamfer(samples(positions), Q) with frozen matches."""
    positions = np.asarray(positions)
    if corr is None:
        corr = correspondences(samples.points(positions), _points(Q))
    _, grad, _ = chamfer_quadratic(samples, Q, corr, mesh.particle_count)(positions)
    return grad


# -- registration -------------------------------------------------------------------------

@dataclass
class RegistrationConfig:
    alpha_step: float = 0.05
    decay: float = 0.9
    rounds: int = 5
    sample_count: int = 1000
    outer_rounds: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.alpha_step < 0:
            raise ValueError("alpha_step must be >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.rounds < 1 or self.outer_rounds < 1:
            raise ValueError("round counts must be >= 1")


def _scaled(term, a: float):
    def scaled(y):
        v, g, h = term(y)
        return a * v, a * g, a * h
    return scaled


def _register(sim: Simulator, state: SimState, u, b, Q, alpha_step: float, cfg: RegistrationConfig,
              samples: SurfaceSamples):
    """Registered positions and the weighted chamfer term of the final round."""
    q = _points(Q)
    x = sim.solve(state, u, b).positions
    alpha = float(alpha_step)
    extra = None
    for _ in range(cfg.rounds):
        corr = correspondences(samples.points(x), q)
        extra = _scaled(chamfer_quadratic(samples, q, corr, sim.n), alpha)

        x = sim.solve(state, u, b, extra=extra, initial=x).positions
        alpha *= cfg.decay
    return x, extra


def step_with_residual(sim: Simulator, state: SimState, u, b, Q, alpha_step: float,
                       cfg: RegistrationConfig | None = None, samples: SurfaceSamples | None = None) -> SimState:
    """A simulator step pulled toward the observed cloud ``Q``.

    Each round freezes nearest-neighbour matches at the current estimate and
    re-solves the step with ``alpha * chamfer`` added to the energy; ``alpha``
    decays geometrically between rounds. ``alpha_step == 0`` is a plain step.
    """
    if alpha_step < 0:
        raise ValueError("alpha_step must be >= 0")
    if alpha_step == 0:
        return sim.step(state, u, b)
    cfg = cfg if cfg is not None else RegistrationConfig()
    if samples is None:
        samples = sample_surface(sim.mesh, cfg.sample_count, cfg.seed)
    x, _ = _register(sim, state, u, b, Q, alpha_step, cfg, samples)
    return state.with_positions(x)


def registration_gain_jacobian(sim: Simulator, state: SimState, u, b, x_reg: np.ndarray, extra,
                               J: np.ndarray) -> np.ndarray:
    """``C J`` where ``C = (H + A)^-1 A`` maps a step error onto the registered state.

    ``H`` is the frame Hessian and ``A`` the weighted chamfer Hessian at the
    registered positions. The registration only moves a share ``C`` of the way
    from the prediction to the cloud, so the innovation it produces responds
    to the stiffness through ``C J`` rather than ``J``.
    """
    _, _, A = extra(x_reg)
    return sim.equilibrium_jacobian(x_reg, u, b, state.grasp, -(A @ J), start=state.positions, extra=extra)


@dataclass(frozen=True, eq=False)
class CloudTransition:
    """Registered start state, action, and the cloud observed after the step."""

    start: SimState
    u: np.ndarray
    cloud: PointCloud


def joint_estimate(sim: Simulator, belief: BoundaryBelief, history: Sequence[CloudTransition], M: Sequence[int],
                   noise: NoiseConfig, cfg: RegistrationConfig | None = None, jacobian: str = "implicit"):
    """Alternate cloud registration and the filter update over the sampled steps.

    Round ``i`` registers every sampled cloud under the current estimate
    ``mu_i`` and corrects the *prior* with an iterated-filter innovation
    ``reg - f(mu_i) + CJ (mu_i - mu_prior)``, so repeated rounds refine the
    linearisation point without counting the data twice. Returns the
    posterior and the registered state for the last sampled step.
    """
    if len(M) == 0:
        raise ValueError("sample set M must be non-empty")
    cfg = cfg if cfg is not None else RegistrationConfig()
    # model samples are redrawn per observed frame: a fixed pattern would bias every step the same way
    samples = {m: sample_surface(sim.mesh, cfg.sample_count, [cfg.seed, history[m].cloud.frame_index]) for m in M}
    post = belief
    registered = None
    for _ in range(cfg.outer_rounds):
        mu = post.mean
        residuals, jacobians = [], []
        for m in M:
            tr = history[m]
            pred, J = observation_jacobian(sim, tr.start, tr.u, mu, method=jacobian)
            if cfg.alpha_step > 0:
                x, extra = _register(sim, tr.start, tr.u, mu, tr.cloud, cfg.alpha_step, cfg, samples[m])
                J = registration_gain_jacobian(sim, tr.start, tr.u, mu, x, extra, J)
            else:
                x = pred
            residuals.append((x - pred).ravel() + J @ (mu - belief.mean))
            jacobians.append(J)
            registered = tr.start.with_positions(x)
        post = apply_update(belief, np.concatenate(residuals), np.vstack(jacobians), noise)
    return post, registered


# -- XYZ text --------------------------------------------------------------------------------

def export_xyz(cloud, path) -> Path:
    path = Path(path)
    np.savetxt(path, _points(cloud), fmt="%.9g")
    return path


def load_xyz(path, frame_index: int = 0) -> PointCloud:
    return PointCloud(np.loadtxt(path, ndmin=2), frame_index)
