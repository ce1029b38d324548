"""Extended Kalman filter over per-particle boundary stiffness.

The state is the stiffness vector itself, so prediction is a plain random walk
plus deliberate shifts at cut/suture events. Updates stack several past
transitions (multiple shooting): each sampled step is re-simulated from its
observed start under the predicted mean, and the stacked residuals and
Jacobians drive a single gain computation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from bsense.jacobian import observation_jacobian
from bsense.mesh import Mesh, dilate_mask
from bsense.simulator import SimState, Simulator

logger = logging.getLogger(__name__)

ENTROPY_FLOOR = -1e9


@dataclass(frozen=True, eq=False)
class BoundaryBelief:
    mean: np.ndarray
    cov: np.ndarray
    time_index: int = 0
    update_failed: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError("covariance must be n x n for an n-vector mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def initial(cls, n: int, mean: float = 1e-4, variance: float = 0.1) -> BoundaryBelief:
        return cls(np.full(n, float(mean)), float(variance) * np.eye(n), 0)

    @property
    def n(self) -> int:
        return self.mean.size

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.cov).copy()


@dataclass(frozen=True, eq=False)
class TopologyEvent:
    kind: str
    region: np.ndarray
    delta_b: np.ndarray
    noise: np.ndarray  # diagonal of W

    def __post_init__(self):
        if self.kind not in ("cut", "suture"):
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass
class NoiseConfig:
    obs_variance: float = 1e-6
    base_motion_variance: float = 0.0
    event_motion_variance: float = 0.05
    suture_stiffness: float = 0.1
    event_dilation: int = 1
    joseph: bool = False

    def __post_init__(self):
        if not self.obs_variance > 0:
            raise ValueError("observation variance must be positive")
        if self.base_motion_variance < 0:
            raise ValueError("base motion variance must be >= 0")
        if self.event_motion_variance < self.base_motion_variance:
            raise ValueError("event variance must not be below the base variance")


@dataclass(frozen=True, eq=False)
class Transition:
    """One observed step: ``start`` (with its grasp) driven by ``u`` landed on ``observed``."""

    start: SimState
    u: np.ndarray
    observed: np.ndarray


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


# -- prediction ------------------------------------------------------------------

def ekf_predict(belief: BoundaryBelief, event: TopologyEvent | None = None,
                noise: NoiseConfig | None = None) -> BoundaryBelief:
    """Random-walk prediction; an event shifts the mean and injects its own noise."""
    mean = belief.mean.copy()
    cov = belief.cov.copy()
    if event is not None:
        mean += event.delta_b
        cov[np.diag_indices_from(cov)] += event.noise
    elif noise is not None and noise.base_motion_variance > 0:
        cov[np.diag_indices_from(cov)] += noise.base_motion_variance
    np.maximum(mean, 0.0, out=mean)
    return BoundaryBelief(mean, cov, belief.time_index + 1)


def _event_noise(mesh: Mesh, region: np.ndarray, noise: NoiseConfig) -> np.ndarray:
    mask = np.zeros(mesh.particle_count, dtype=bool)
    mask[region] = True
    if noise.event_dilation:
        mask = dilate_mask(mesh, mask, noise.event_dilation)
    return np.where(mask, noise.event_motion_variance, noise.base_motion_variance)


def _region(mesh: Mesh, region) -> np.ndarray:
    region = np.unique(np.asarray(region, dtype=np.int64))
    if region.size == 0:
        raise ValueError("event region must be non-empty")
    if region.min() < 0 or region.max() >= mesh.particle_count:
        raise ValueError("event region index out of range")
    return region


def make_cut_event(mesh: Mesh, region, belief: BoundaryBelief, noise: NoiseConfig) -> TopologyEvent:
    """Cut: drive the mean to zero on ``region`` and inflate variance around it."""
    region = _region(mesh, region)
    delta = np.zeros(mesh.particle_count)
    delta[region] = -belief.mean[region]
    return TopologyEvent("cut", region, delta, _event_noise(mesh, region, noise))


def make_suture_event(mesh: Mesh, region, belief: BoundaryBelief, noise: NoiseConfig) -> TopologyEvent:
    """Suture: raise the mean by the configured suture stiffness on ``region``."""
    region = _region(mesh, region)
    delta = np.zeros(mesh.particle_count)
    delta[region] = noise.suture_stiffness
    return TopologyEvent("suture", region, delta, _event_noise(mesh, region, noise))


# -- update ------------------------------------------------------------------------

def sample_timesteps(t_c: int, t: int, k: int, rng: np.random.Generator | None = None) -> list[int]:
    """``t`` plus up to ``k - 1`` distinct earlier steps from ``[t_c, t - 1]``, sorted."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if t < t_c:
        raise ValueError("t must not precede t_c")
    window = np.arange(t_c, t)
    extra = min(k - 1, window.size)
    picked = []
    if extra:
        rng = rng if rng is not None else np.random.default_rng()
        picked = rng.choice(window, size=extra, replace=False).tolist()
    return sorted(int(m) for m in picked) + [int(t)]


def kalman_gain(cov: np.ndarray, J: np.ndarray, alpha: float) -> np.ndarray:
    """``K = S J^T (J S J^T + alpha I)^{-1}`` for an isotropic observation noise."""
    n, p = cov.shape[0], J.shape[0]
    SJt = cov @ J.T
    if p <= n:
        S = J @ SJt
        S[np.diag_indices_from(S)] += alpha
        return sla.solve(S, SJt.T, assume_a="pos").T
    # push-through identity: S J^T (alpha I + J S J^T)^{-1} = (alpha I + S J^T J)^{-1} S J^T
    A = SJt @ J
    A[np.diag_indices_from(A)] += alpha
    return sla.solve(A, SJt)


def posterior_covariance(cov: np.ndarray, K: np.ndarray, J: np.ndarray, alpha: float,
                         joseph: bool = False) -> np.ndarray:
    IKJ = np.eye(cov.shape[0]) - K @ J
    if joseph:
        post = IKJ @ cov @ IKJ.T + alpha * (K @ K.T)
    else:
        post = IKJ @ cov
    return _symmetrize(post)


def stack_predictions(sim: Simulator, history: Sequence[Transition], M: Sequence[int], mean: np.ndarray,
                      jacobian: str = "implicit", eps: float = 1e-6):
    """Residuals and Jacobians of the sampled transitions under ``mean``, stacked."""
    residuals, jacobians = [], []
    for m in M:
        tr = history[m]
        pred, J = observation_jacobian(sim, tr.start, tr.u, mean, method=jacobian, eps=eps)
        residuals.append((np.asarray(tr.observed) - pred).ravel())
        jacobians.append(J)
    return np.concatenate(residuals), np.vstack(jacobians)


def apply_update(belief: BoundaryBelief, residual: np.ndarray, J: np.ndarray, noise: NoiseConfig) -> BoundaryBelief:
    """Linear-Gaussian correction from a stacked residual and Jacobian."""
    alpha = noise.obs_variance
    try:
        K = kalman_gain(belief.cov, J, alpha)
    except (sla.LinAlgError, ValueError) as exc:
        logger.warning("innovation system not solvable (%s); keeping the prior", exc)
        return replace(belief, update_failed=True)
    if not np.all(np.isfinite(K)):
        logger.warning("non-finite Kalman gain; keeping the prior")
        return replace(belief, update_failed=True)
    mean = np.maximum(belief.mean + K @ residual, 0.0)
    cov = posterior_covariance(belief.cov, K, J, alpha, noise.joseph)
    return BoundaryBelief(mean, cov, belief.time_index)


def ekf_update(belief: BoundaryBelief, history: Sequence[Transition], M: Sequence[int], sim: Simulator,
               noise: NoiseConfig, jacobian: str = "implicit", eps: float = 1e-6) -> BoundaryBelief:
    """Multiple-shooting correction using the transitions indexed by ``M``."""
    if len(M) == 0:
        raise ValueError("sample set M must be non-empty")
    for m in M:
        if not 0 <= m < len(history):
            raise IndexError(f"no transition recorded for step {m}")
    residual, J = stack_predictions(sim, history, M, belief.mean, jacobian, eps)
    return apply_update(belief, residual, J, noise)


# -- entropy ------------------------------------------------------------------------

def logdet_psd(a: np.ndarray) -> float:
    """ln det of a symmetric PSD matrix, ``-inf`` when singular."""
    try:
        c = np.linalg.cholesky(a)
        return 2.0 * float(np.sum(np.log(np.diag(c))))
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(_symmetrize(a))
        if np.any(w <= 0):
            return -np.inf
        return float(np.sum(np.log(w)))


def entropy(belief: BoundaryBelief) -> float:
    """Gaussian entropy up to constants, ``ln det cov``, floored for reporting."""
    return max(logdet_psd(belief.cov), ENTROPY_FLOOR)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(_symmetrize(a))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _product_terms(cov: np.ndarray, J: np.ndarray, alpha: float) -> np.ndarray:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    lam = np.linalg.svd(np.asarray(J) @ sqrtm_psd(cov), compute_uv=False)
    lam2 = lam * lam
    return alpha / (lam2 + alpha)


def entropy_product_form(cov: np.ndarray, J: np.ndarray, alpha: float) -> float:
    """Posterior determinant ``|S| prod(1 - l^2 / (l^2 + alpha))`` over singular values of ``J S^1/2``."""
    return float(np.linalg.det(cov) * np.prod(_product_terms(cov, J, alpha)))


def log_entropy_product_form(cov: np.ndarray, J: np.ndarray, alpha: float) -> float:
    """Logarithm of :func:`entropy_product_form`, safe against under/overflow."""
    return logdet_psd(cov) + float(np.sum(np.log(_product_terms(cov, J, alpha))))


# -- persistence ---------------------------------------------------------------------

def export_belief(belief: BoundaryBelief, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle_index", "mean", "variance"])
        for i, (m, v) in enumerate(zip(belief.mean, np.diag(belief.cov))):
            w.writerow([i, f"{m:.9g}", f"{v:.9g}"])
    return path


def load_belief_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance columns of an exported belief snapshot."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    mean = np.array([float(r["mean"]) for r in rows])
    var = np.array([float(r["variance"]) for r in rows])
    return mean, var
