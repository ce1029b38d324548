"""Sensitivity of equilibrium particle positions to boundary stiffness.

Two routes are provided for the full simulator: central finite differences
through complete re-solves, and the implicit-function form
``-H^{-1} d(grad E)/db`` evaluated at the converged equilibrium. The linear
spring model (fixed rest directions) gets the closed-form block solution and
its own equilibrium solver, which serve as each other's oracles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from bsense.errors import SingularSystemError, SolverDivergenceError
from bsense.simulator import SimState, Simulator

logger = logging.getLogger(__name__)


def displacement_matrix(dx: np.ndarray) -> np.ndarray:
    """Block-diagonal ``(3n, n)`` layout of per-particle displacements.

    Column ``i`` holds the 3-vector ``dx[i]`` in rows ``3i..3i+2``.
    """
    dx = np.asarray(dx, dtype=np.float64).reshape(-1, 3)
    n = dx.shape[0]
    out = np.zeros((3 * n, n))
    rows = 3 * np.arange(n)
    for c in range(3):
        out[rows + c, np.arange(n)] = dx[:, c]
    return out


def fd_observation_jacobian(sim: Simulator, x_ref: SimState, u, b, eps: float = 1e-6) -> np.ndarray:
    """Central-difference ``d f(x_ref, u, b) / d b`` with shape ``(3n, n)``.

    Perturbations below zero are clamped, in which case the column uses the
    actual (one-sided) parameter spread.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    J = np.zeros((3 * sim.n, n))
    for i in range(n):
        hi, lo = b.copy(), b.copy()
        hi[i] += eps
        lo[i] = max(lo[i] - eps, 0.0)
        try:
            xp = sim.solve(x_ref, u, hi).positions
            xm = sim.solve(x_ref, u, lo).positions
        except SolverDivergenceError as exc:
            raise SolverDivergenceError(f"solver diverged while perturbing b[{i}]: {exc}",
                                        iteration=exc.iteration, column=i) from exc
        J[:, i] = (xp - xm).ravel() / (hi[i] - lo[i])
    return J


def implicit_observation_jacobian(sim: Simulator, x_ref: SimState, x_eq: np.ndarray, u, b) -> np.ndarray:
    """Implicit-function sensitivity of the step solution ``x_eq`` w.r.t. ``b``."""
    x_eq = np.asarray(x_eq)
    D = displacement_matrix(x_eq - sim.anchors)
    return sim.equilibrium_jacobian(x_eq, u, b, x_ref.grasp, D, start=x_ref.positions)


def observation_jacobian(sim: Simulator, x_ref: SimState, u, b, method: str = "implicit",
                         eps: float = 1e-6, prediction: np.ndarray | None = None):
    """Prediction ``f(x_ref, u, b)`` and its Jacobian by the chosen route."""
    if prediction is None:
        prediction = sim.solve(x_ref, u, b).positions
    if method == "implicit":
        J = implicit_observation_jacobian(sim, x_ref, prediction, u, b)
    elif method == "fd":
        J = fd_observation_jacobian(sim, x_ref, u, b, eps)
    else:
        raise ValueError(f"unknown jacobian method {method!r}")
    return prediction, J


# -- linear spring model ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StiffnessLaplacian:
    """Quadratic model of the non-boundary springs, in boundary-first order.

    ``order`` lists particle indices: the ``m`` boundary-related particles
    followed by the ``q`` others. ``L`` (3n x 3n), ``P`` (3n x 3s) and ``d``
    (3s) are expressed in that order, so that the spring energy equals
    ``0.5 x^T L x - x^T P d`` up to a constant.
    """

    L: np.ndarray
    P: np.ndarray
    d: np.ndarray
    order: np.ndarray
    m: int
    rest_positions: np.ndarray

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def q(self) -> int:
        return self.n - self.m

    def blocks(self):
        k = 3 * self.m
        L = self.L
        return L[:k, :k], L[:k, k:], L[k:, :k], L[k:, k:]

    def flatten(self, positions: np.ndarray) -> np.ndarray:
        """Particle-indexed ``(n, 3)`` array to the boundary-first flat vector."""
        return np.asarray(positions)[self.order].ravel()

    def unflatten(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((self.n, 3))
        out[self.order] = np.asarray(x).reshape(-1, 3)
        return out


def assemble_stiffness_laplacian(rest_positions: np.ndarray, pairs: np.ndarray, k,
                                 boundary: np.ndarray, rest_lengths: np.ndarray | None = None) -> StiffnessLaplacian:
    """``L = (sum_j k_j A_j A_j^T) kron I3`` and ``P``, ``d`` for the rest directions.

    ``boundary`` selects the boundary-related particles, placed first.
    Springs keep the direction they have at rest; ``rest_lengths`` defaults to
    the rest-pose distances.
    """
    X0 = np.asarray(rest_positions, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    k = np.broadcast_to(np.asarray(k, dtype=np.float64), (len(pairs),))
    if np.any(k < 0):
        raise ValueError("spring stiffness must be non-negative")
    n = X0.shape[0]
    boundary = np.asarray(boundary, dtype=np.int64)
    others = np.setdiff1d(np.arange(n), boundary)
    order = np.concatenate([boundary, others])
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)

    s = len(pairs)
    A = np.zeros((n, s))
    if s:
        A[pos[pairs[:, 0]], np.arange(s)] = 1.0
        A[pos[pairs[:, 1]], np.arange(s)] = -1.0
    graph = (A * k) @ A.T
    I3 = np.eye(3)
    L = np.kron(graph, I3)
    P = np.kron(A * k, I3)
    rest_vec = X0[pairs[:, 0]] - X0[pairs[:, 1]] if s else np.zeros((0, 3))
    if rest_lengths is not None and s:
        nrm = np.linalg.norm(rest_vec, axis=1, keepdims=True)
        rest_vec = rest_vec / nrm * np.asarray(rest_lengths)[:, None]
    return StiffnessLaplacian(L, P, rest_vec.ravel(), order, len(boundary), X0)


def graph_laplacian(lap: StiffnessLaplacian) -> np.ndarray:
    """Pre-Kronecker ``n x n`` matrix recovered from ``L``."""
    return lap.L[0::3, 0::3]


def _block_system(lap: StiffnessLaplacian, b, external_stiffness) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (lap.m,):
        raise ValueError(f"b must have {lap.m} entries")
    K = lap.L.copy()
    idx = np.arange(3 * lap.m)
    K[idx, idx] += np.repeat(b, 3)
    if external_stiffness is not None:
        ext = np.asarray(external_stiffness, dtype=np.float64)
        K[np.diag_indices_from(K)] += np.repeat(ext[lap.order], 3)
    return K


def _solve(K: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        lu = sla.lu_factor(K, check_finite=False)
    except (sla.LinAlgError, ValueError) as exc:
        raise SingularSystemError(f"{what}: {exc}") from exc
    if np.any(np.abs(np.diag(lu[0])) <= 1e-14 * max(np.abs(np.diag(lu[0])).max(), 1.0)):
        raise SingularSystemError(f"{what}: system matrix is singular")
    return sla.lu_solve(lu, rhs, check_finite=False)


def response_matrix(lap: StiffnessLaplacian, b, external_stiffness=None, regularize: float | None = None) -> np.ndarray:
    """``R(b) = -[[L_BB + diag(b), L_BU], [L_UB, L_UU]]^{-1}``.

    With ``regularize`` set, a singular system is retried with a Tikhonov
    shift instead of raising.
    """
    K = _block_system(lap, b, external_stiffness)
    try:
        return -_solve(K, np.eye(K.shape[0]), "response matrix")
    except SingularSystemError:
        if regularize is None:
            raise
        logger.warning("singular block system, regularising with %.1e", regularize)
        return -np.linalg.inv(K + regularize * np.eye(K.shape[0]))


def boundary_displacement_block(displacement: np.ndarray, n: int) -> np.ndarray:
    """``D = [disp_matrix(dx_B); 0]`` of shape ``(3n, m)``."""
    DB = displacement_matrix(displacement)
    return np.vstack([DB, np.zeros((3 * n - DB.shape[0], DB.shape[1]))])


def analytical_jacobian(lap: StiffnessLaplacian, b, displacement: np.ndarray,
                        external_stiffness=None) -> np.ndarray:
    """Closed-form Jacobian ``R(b) D`` in boundary-first row order.

    ``displacement`` holds the ``(m, 3)`` boundary-particle displacements from
    rest at the equilibrium of interest.
    """
    displacement = np.asarray(displacement, dtype=np.float64).reshape(-1, 3)
    if displacement.shape[0] != lap.m:
        raise ValueError("one displacement per boundary particle expected")
    D = boundary_displacement_block(displacement, lap.n)
    K = _block_system(lap, b, external_stiffness)
    return -_solve(K, D, "analytical jacobian")


def linear_spring_equilibrium(lap: StiffnessLaplacian, b, anchors=(), force=None) -> np.ndarray:
    """Exact minimiser of the quadratic spring model.

    Energy: ``0.5 x^T L x - x^T P d + 0.5 sum_B b_i |x_i - x0_i|^2`` plus, for
    each ``(particle, target, stiffness)`` in ``anchors``, a zero-rest spring to
    a fixed target, minus ``force . x``. Returns ``(n, 3)`` particle positions.
    """
    n = lap.n
    ext = np.zeros(n)
    rhs_p = np.zeros((n, 3))
    for i, target, ks in anchors:
        ext[i] += ks
        rhs_p[i] += ks * np.asarray(target, dtype=np.float64)
    K = _block_system(lap, b, ext)
    X0 = lap.rest_positions
    bb = np.zeros(n)
    bb[lap.order[:lap.m]] = np.asarray(b, dtype=np.float64)
    rhs_p += bb[:, None] * X0
    if force is not None:
        rhs_p += np.asarray(force, dtype=np.float64).reshape(n, 3)
    rhs = rhs_p[lap.order].ravel() + lap.P @ lap.d
    x = _solve(K, rhs, "linear spring equilibrium")
    return lap.unflatten(x)


def linear_spring_gradient(lap: StiffnessLaplacian, b, x: np.ndarray, anchors=(), force=None) -> np.ndarray:
    """Energy gradient of the quadratic model at ``(n, 3)`` positions ``x``."""
    xf = lap.flatten(x)
    g = lap.L @ xf - lap.P @ lap.d
    gp = lap.unflatten(g)
    bb = np.zeros(lap.n)
    bb[lap.order[:lap.m]] = np.asarray(b, dtype=np.float64)
    gp += bb[:, None] * (np.asarray(x) - lap.rest_positions)
    for i, target, ks in anchors:
        gp[i] += ks * (x[i] - np.asarray(target, dtype=np.float64))
    if force is not None:
        gp -= np.asarray(force, dtype=np.float64).reshape(-1, 3)
    return gp
