"""Active-sensing objectives: uncertainty-weighted displacement, entropy surrogate, penalties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bsense.estimator import BoundaryBelief, NoiseConfig, kalman_gain, sqrtm_psd
from bsense.jacobian import displacement_matrix, observation_jacobian
from bsense.mesh import Mesh
from bsense.simulator import SimState, Simulator


@dataclass
class LossWeights:
    """Term weights; ``uwd_weight`` multiplies the (negated) displacement score."""

    energy_weight: float = 1.0
    workspace_weight: float = 10.0
    uwd_weight: float = 1.0
    entropy_weight: float = 1.0

    def __post_init__(self):
        for name in ("energy_weight", "workspace_weight", "uwd_weight", "entropy_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def for_mesh(cls, mesh: Mesh, **kw) -> LossWeights:
        """Defaults with the displacement score made dimensionless by the mesh width."""
        kw.setdefault("uwd_weight", 1.0 / mesh.width ** 2)
        return cls(**kw)


def uwd_matrix(dx: np.ndarray) -> np.ndarray:
    """``(3n, n)`` block-diagonal arrangement of particle displacements."""
    return displacement_matrix(dx)


def uwd_value(dx: np.ndarray, cov: np.ndarray) -> float:
    """Frobenius norm of ``uwd_matrix(dx) @ cov`` without forming the product.

    Row ``3i+c`` of the product is ``dx[i, c] * cov[i]``, so the squared norm
    is ``sum_i |dx_i|^2 * |cov_i|^2``.
    """
    dx = np.asarray(dx, dtype=np.float64).reshape(-1, 3)
    row_sq = np.einsum("ij,ij->i", cov, cov)
    return float(np.sqrt(np.dot(np.einsum("ij,ij->i", dx, dx), row_sq)))


def uwd_value_grad(dx: np.ndarray, cov: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient w.r.t. ``dx`` of :func:`uwd_value`."""
    dx = np.asarray(dx, dtype=np.float64).reshape(-1, 3)
    row_sq = np.einsum("ij,ij->i", cov, cov)
    val = float(np.sqrt(np.dot(np.einsum("ij,ij->i", dx, dx), row_sq)))
    if val == 0.0:
        return 0.0, np.zeros_like(dx)
    return val, row_sq[:, None] * dx / val


def predict(sim: Simulator, x_ref: SimState, u, belief: BoundaryBelief) -> np.ndarray:
    """Next positions under the belief mean."""
    return sim.solve(x_ref, u, belief.mean).positions


def uwd(sim: Simulator, x_ref: SimState, u, belief: BoundaryBelief, prediction: np.ndarray | None = None) -> float:
    """Uncertainty-weighted displacement of the predicted next state from rest."""
    x = predict(sim, x_ref, u, belief) if prediction is None else prediction
    return uwd_value(x - sim.anchors, belief.cov)


def entropy_surrogate(K: np.ndarray, J: np.ndarray) -> float:
    """``det(I - K J)``: posterior-to-prior covariance determinant ratio."""
    K, J = np.asarray(K), np.asarray(J)
    sign, logdet = np.linalg.slogdet(np.eye(K.shape[0]) - K @ J)
    return float(sign * np.exp(logdet))


def in_workspace(u) -> float:
    """``exp(-min(u_z, 0))``: 1 above the ground plane, growing below it."""
    return float(np.exp(-min(float(np.asarray(u)[2]), 0.0)))


def workspace_penalty(u) -> float:
    return max(0.0, in_workspace(u) - 1.0)


def workspace_penalty_grad(u) -> np.ndarray:
    g = np.zeros(3)
    uz = float(np.asarray(u)[2])
    if uz < 0:
        g[2] = -np.exp(-uz)
    return g


def loss_LD(sim: Simulator, x_ref: SimState, u, belief: BoundaryBelief, w: LossWeights) -> float:
    """``-D + E_b + sigma * penalty`` evaluated on the mean-belief prediction."""
    x = predict(sim, x_ref, u, belief)
    d = uwd_value(x - sim.anchors, belief.cov)
    eb = sim.boundary_energy(x, belief.mean)
    return -w.uwd_weight * d + w.energy_weight * eb + w.workspace_weight * workspace_penalty(u)


def loss_LD_and_grad(sim: Simulator, x_ref: SimState, u, belief: BoundaryBelief, w: LossWeights):
    """:func:`loss_LD` with its action gradient through the implicit step sensitivity."""
    u = np.asarray(u, dtype=np.float64)
    x = predict(sim, x_ref, u, belief)
    dx = x - sim.anchors
    d, dd = uwd_value_grad(dx, belief.cov)
    eb = sim.boundary_energy(x, belief.mean)
    val = -w.uwd_weight * d + w.energy_weight * eb + w.workspace_weight * workspace_penalty(u)
    dL_dx = -w.uwd_weight * dd + w.energy_weight * belief.mean[:, None] * dx
    coupling = sim.grasp_coupling(x, u, x_ref.grasp)
    dx_du = sim.equilibrium_jacobian(x, u, belief.mean, x_ref.grasp, coupling, start=x_ref.positions)
    grad = dx_du.T @ dL_dx.ravel() + w.workspace_weight * workspace_penalty_grad(u)
    return val, grad


def induced_gain(sim: Simulator, x_ref: SimState, u, belief: BoundaryBelief, noise: NoiseConfig,
                 jacobian: str = "implicit"):
    """Prediction, Jacobian and Kalman gain an action ``u`` would produce."""
    x, J = observation_jacobian(sim, x_ref, u, belief.mean, method=jacobian)
    return x, J, kalman_gain(belief.cov, J, noise.obs_variance)


def loss_LH(sim: Simulator, x_ref: SimState, u, belief: BoundaryBelief, w: LossWeights,
            noise: NoiseConfig, jacobian: str = "implicit") -> float:
    """``det(I - K J) + E_b + sigma * penalty`` for the candidate action."""
    x, J, K = induced_gain(sim, x_ref, u, belief, noise, jacobian)
    eb = sim.boundary_energy(x, belief.mean)
    return (w.entropy_weight * entropy_surrogate(K, J) + w.energy_weight * eb
            + w.workspace_weight * workspace_penalty(u))



def uwd_lower_bound(R: np.ndarray, D: np.ndarray, cov: np.ndarray) -> tuple[float, float]:
    """Both sides of ``eta |D S|_F <= |R D S^1/2|_F``, ``eta = 1 / (|R^-1|_F |S^1/2|_F)``.

    The inequality follows from ``D S = R^-1 (R D S^1/2) S^1/2`` and
    submultiplicativity, so it links the displacement score to the size of the
    Jacobian ``R D`` seen by the filter.
    """
    half = sqrtm_psd(cov)
    eta = 1.0 / (np.linalg.norm(np.linalg.inv(R)) * np.linalg.norm(half))
    return float(eta * np.linalg.norm(D @ cov)), float(np.linalg.norm(R @ D @ half))
