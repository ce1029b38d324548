"""Attachment layouts on grid meshes and the grasp schedules used to probe them.

Shapes are drawn in normalised grid coordinates ``(X, Y) in [0, 1]^2`` (X along
columns, Y along rows) and rasterised onto any resolution by densely sampling
each curve and marking the nearest particle, so a shape keeps its topology as
the grid is refined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bsense.mesh import Mesh

SCENARIO_NAMES = ("Arc", "Line", "Line-dot", "Arc-line", "U-shape", "Large-attach")
TRUE_STIFFNESS = 0.1


@dataclass(frozen=True, eq=False)
class GraspSegment:
    """One grasp: the point grabbed at rest and the end-effector targets that follow."""

    u0: np.ndarray
    targets: np.ndarray  # (steps, 3)


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    mesh: Mesh
    ground_truth_b: np.ndarray
    grasp_sequence: tuple[GraspSegment, ...]

    @property
    def truth_mask(self) -> np.ndarray:
        return self.ground_truth_b > 0


def _normalised(mesh: Mesh) -> np.ndarray:
    p = mesh.rest_positions[:, :2]
    lo, hi = p.min(axis=0), p.max(axis=0)
    return (p - lo) / np.where(hi > lo, hi - lo, 1.0)


def rasterize_polyline(mesh: Mesh, points, samples_per_unit: int = 400) -> np.ndarray:
    """Boolean mask of particles nearest to a dense sampling of a polyline."""
    pts = np.asarray(points, dtype=np.float64)
    coords = _normalised(mesh)
    dense = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        k = max(2, int(np.ceil(np.linalg.norm(b - a) * samples_per_unit)))
        dense.append(a + np.linspace(0.0, 1.0, k)[1:, None] * (b - a))
    dense = np.vstack(dense)
    d2 = ((dense[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    mask = np.zeros(mesh.particle_count, dtype=bool)
    mask[np.argmin(d2, axis=1)] = True
    return mask


def _arc(center, radius, start_deg, end_deg, count=64):
    t = np.radians(np.linspace(start_deg, end_deg, count))
    return np.stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)], axis=1)


def _point(mesh: Mesh, xy) -> np.ndarray:
    return rasterize_polyline(mesh, [xy, xy])


def attachment_mask(name: str, mesh: Mesh) -> np.ndarray:
    """Particles attached in the named layout."""
    if name == "Line":
        return rasterize_polyline(mesh, [(0.0, 1.0), (1.0, 1.0)])
    if name == "Arc":
        # half circle bulging into the upper half of the sheet
        return rasterize_polyline(mesh, _arc((0.5, 0.45), 0.35, 0.0, 180.0))
    if name == "Line-dot":
        return rasterize_polyline(mesh, [(0.0, 1.0), (1.0, 1.0)]) | _point(mesh, (0.35, 0.4))
    if name == "Arc-line":
        line = rasterize_polyline(mesh, [(0.0, 1.0), (0.5, 1.0)])
        return line | rasterize_polyline(mesh, _arc((1.0, 1.0), 0.5, 180.0, 270.0))
    if name == "U-shape":
        return rasterize_polyline(mesh, [(0.0, 0.35), (0.0, 1.0), (1.0, 1.0), (1.0, 0.35)])
    if name == "Large-attach":
        c = _normalised(mesh)
        return (np.abs(c[:, 0] - 0.5) <= 0.25) & (c[:, 1] >= 0.45) & (c[:, 1] <= 0.85)
    raise ValueError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIO_NAMES)}")


def lift_targets(u0, height: float, steps: int) -> np.ndarray:
    """Straight vertical lift from ``u0`` to ``u0 + height * z`` in equal increments."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    u0 = np.asarray(u0, dtype=np.float64)
    frac = np.arange(1, steps + 1) / steps
    return u0[None] + frac[:, None] * np.array([0.0, 0.0, height])[None]


def corner_lift_schedule(mesh: Mesh, height_fraction: float = 0.5, steps: int = 50) -> tuple[GraspSegment, ...]:
    """Each corner in turn, lifted to ``height_fraction`` of the mesh width."""
    segs = []
    for c in mesh.corners():
        u0 = mesh.rest_positions[c].copy()
        segs.append(GraspSegment(u0, lift_targets(u0, height_fraction * mesh.width, steps)))
    return tuple(segs)


def make_scenario(name: str, mesh: Mesh, stiffness: float = TRUE_STIFFNESS,
                  lift_fraction: float = 0.5, lift_steps: int = 50) -> Scenario:
    mask = attachment_mask(name, mesh)
    b = np.where(mask, float(stiffness), 0.0)
    return Scenario(name, mesh, b, corner_lift_schedule(mesh, lift_fraction, lift_steps))
