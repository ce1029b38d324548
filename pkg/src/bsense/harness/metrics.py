"""Detection metrics and safety accounting."""

from __future__ import annotations

import numpy as np

from bsense.mesh import Mesh, dilate_mask

# PCD has no value when nothing is detected
UNDEFINED = None


def detections(mean: np.ndarray, b_thresh: float) -> np.ndarray:
    return np.asarray(mean) > b_thresh


def pcd_pug(estimate_mean: np.ndarray, truth_mask: np.ndarray, b_thresh: float, dilation: int, mesh: Mesh):
    """Percent correct detections and percent uncovered ground truth.

    PCD counts detections that fall inside the dilated truth; PUG counts truth
    particles inside the dilated detections. PCD is ``UNDEFINED`` with no
    detections; PUG is 0 then (and undefined for an empty truth).
    """
    if not b_thresh > 0:
        raise ValueError("b_thresh must be positive")
    if dilation < 0:
        raise ValueError("dilation must be >= 0")
    det = detections(estimate_mean, b_thresh)
    truth = np.asarray(truth_mask, dtype=bool)
    n_det, n_truth = int(det.sum()), int(truth.sum())
    pcd = UNDEFINED if n_det == 0 else 100.0 * int((det & dilate_mask(mesh, truth, dilation)).sum()) / n_det
    if n_truth == 0:
        pug = UNDEFINED
    else:
        pug = 100.0 * int((dilate_mask(mesh, det, dilation) & truth).sum()) / n_truth
    return pcd, pug


def mean_boundary_energy(positions: np.ndarray, anchors: np.ndarray, b: np.ndarray) -> float:
    """Boundary spring energy averaged over all particles."""
    d = np.asarray(positions) - np.asarray(anchors)
    return 0.5 * float(np.dot(b, np.einsum("ij,ij->i", d, d))) / len(b)


def scaled_energy_threshold(mesh: Mesh, truth_b: np.ndarray, safe_fraction: float) -> float:
    """Mean boundary energy with every attached particle displaced by ``safe_fraction`` of the mesh width.

    Stands in for an absolute tearing threshold, which has no meaning once
    the mesh size and stiffness units change.
    """
    if not safe_fraction > 0:
        raise ValueError("safe_fraction must be positive")
    delta = safe_fraction * mesh.width
    return 0.5 * float(np.sum(truth_b)) * delta * delta / len(truth_b)
