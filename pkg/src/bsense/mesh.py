"""Triangulated thin-shell meshes: construction, topology queries, dilation and export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from bsense.errors import GraspMissError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable particle mesh.

    Edges and bending pairs are stored as ``(E, 2)`` index arrays with matching
    rest-length vectors. ``adjacency`` lists the edge neighbours of each particle.
    """

    rest_positions: np.ndarray
    edges: np.ndarray
    edge_rest: np.ndarray
    faces: np.ndarray
    bending_pairs: np.ndarray
    bending_rest: np.ndarray
    adjacency: tuple[np.ndarray, ...]
    shape: tuple[int, int] | None = None
    spacing: float | None = None

    def __post_init__(self):
        for name in ("rest_positions", "edges", "edge_rest", "faces", "bending_pairs", "bending_rest"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def particle_count(self) -> int:
        return self.rest_positions.shape[0]

    @property
    def width(self) -> float:
        """Largest in-plane extent of the rest configuration."""
        ext = self.rest_positions.max(axis=0) - self.rest_positions.min(axis=0)
        return float(ext[:2].max())

    @property
    def spring_pairs(self) -> np.ndarray:
        """Edges followed by bending pairs (all mesh distance constraints)."""
        return np.vstack([self.edges, self.bending_pairs])

    @property
    def spring_rest(self) -> np.ndarray:
        return np.concatenate([self.edge_rest, self.bending_rest])

    def adjacency_matrix(self) -> sp.csr_matrix:
        n = self.particle_count
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sp.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    def grid_index(self, row: int, col: int) -> int:
        if self.shape is None:
            raise ValueError("mesh was not built on a grid")
        return row * self.shape[1] + col

    def corners(self) -> list[int]:
        rows, cols = self.shape
        return [0, cols - 1, rows * cols - 1, (rows - 1) * cols]


def _mesh_from_faces(rest: np.ndarray, faces: np.ndarray, shape=None, spacing=None) -> Mesh:
    n = rest.shape[0]
    # every undirected edge with the faces that use it
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for f, tri in enumerate(faces):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edge_faces.setdefault(key, []).append(f)
    edges = np.array(sorted(edge_faces), dtype=np.int64).reshape(-1, 2)
    edge_rest = np.linalg.norm(rest[edges[:, 0]] - rest[edges[:, 1]], axis=1)

    bending = []
    for (a, b), fs in sorted(edge_faces.items()):
        if len(fs) != 2:
            continue
        opp = [int(next(v for v in faces[f] if v != a and v != b)) for f in fs]
        bending.append((min(opp), max(opp)))
    bending = np.array(bending, dtype=np.int64).reshape(-1, 2)
    bending_rest = np.linalg.norm(rest[bending[:, 0]] - rest[bending[:, 1]], axis=1) if len(bending) else np.zeros(0)

    nbrs: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        nbrs[a].append(int(b))
        nbrs[b].append(int(a))
    adjacency = tuple(np.array(sorted(v), dtype=np.int64) for v in nbrs)
    return Mesh(rest, edges, edge_rest, faces, bending, bending_rest, adjacency, shape, spacing)


def build_grid_mesh(rows: int, cols: int, spacing: float) -> Mesh:
    """Planar ``rows x cols`` grid in the z=0 plane, one diagonal per quad.

    Diagonal orientation alternates in a checkerboard pattern. Particle
    ``(r, c)`` has index ``r * cols + c`` and sits at ``(c, r, 0) * spacing``.
    """
    if rows < 2 or cols < 2:
        raise ValueError(f"grid needs at least 2x2 particles, got {rows}x{cols}")
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    rest = np.stack([c.ravel() * spacing, r.ravel() * spacing, np.zeros(rows * cols)], axis=1)

    faces = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a, b = i * cols + j, i * cols + j + 1
            d, e = (i + 1) * cols + j, (i + 1) * cols + j + 1
            if (i + j) % 2 == 0:
                faces += [(a, b, e), (a, e, d)]
            else:
                faces += [(a, b, d), (b, e, d)]
    faces = np.array(faces, dtype=np.int64)
    return _mesh_from_faces(rest, faces, shape=(rows, cols), spacing=float(spacing))


def dilate_mask(mesh: Mesh, mask: np.ndarray, iterations: int) -> np.ndarray:
    """Graph dilation: each pass switches on every neighbour of an on particle."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (mesh.particle_count,):
        raise ValueError("mask length must equal the particle count")
    out = mask.copy()
    if iterations == 0:
        return out
    adj = mesh.adjacency_matrix()
    for _ in range(iterations):
        out = out | (adj @ out.astype(np.float64) > 0)
    return out


def grasp_neighborhood(mesh: Mesh, u0, r: float, positions: np.ndarray | None = None) -> np.ndarray:
    """Indices of particles strictly closer than ``r`` to the grasp point ``u0``.

    Distances are measured on ``positions`` (rest positions by default).
    """
    if not r > 0:
        raise ValueError("grasp radius must be positive")
    pos = mesh.rest_positions if positions is None else np.asarray(positions)
    dist = np.linalg.norm(pos - np.asarray(u0, dtype=float), axis=1)
    idx = np.flatnonzero(dist < r)
    if idx.size == 0:
        raise GraspMissError(f"no particle within {r:g} of grasp point {np.asarray(u0).tolist()}")
    return idx


def export_obj(mesh: Mesh, positions: np.ndarray, path) -> Path:
    """Write vertex positions and faces in Wavefront OBJ format."""
    path = Path(path)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(positions)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts), np.array(faces, dtype=np.int64)


def export_scalars(values: Sequence[float], path, name: str = "value") -> Path:
    """Per-particle scalar sidecar: ``particle_index,<name>`` rows."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle_index", name])
        for i, v in enumerate(values):
            w.writerow([i, f"{float(v):.9g}"])
    return path
