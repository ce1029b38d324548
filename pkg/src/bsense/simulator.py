"""Quasi-static position-based simulation of a grasped, spring-anchored thin shell.

The system energy is ``0.5 * C(x, u)^T diag(k) C(x, u)`` over three constraint
families (mesh distance springs, grasp springs to the virtual end-effector
particle, zero-rest-length boundary springs to the rest pose) plus an optional
gravity potential.

A step is one zero-velocity frame: the constraint iterations started at the
current positions converge to the minimiser of
``0.5 * m / dt^2 * |y - x_t|^2 + E(y)``, which is what XPBD with compliance
``1 / (k dt^2)`` computes when run to convergence. The frame is solved either
with projected Newton iterations (default) or with Gauss-Seidel XPBD sweeps.
Setting ``inertial_frame=False`` drops the first term and solves for the
static minimum of ``E`` instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from bsense.errors import SolverDivergenceError
from bsense.mesh import Mesh, grasp_neighborhood

logger = logging.getLogger(__name__)

_TINY = 1e-12
# largest system (in DOFs) assembled and factorised densely
_DENSE_LIMIT = 900


def _assemble(rows, cols, vals, size, dense):
    if dense:
        return np.bincount(rows * size + cols, vals, size * size).reshape(size, size)
    return sp.csc_matrix((vals, (rows, cols)), shape=(size, size))


def _add_diagonal(H, w):
    if isinstance(H, np.ndarray):
        H[np.diag_indices_from(H)] += w
        return H
    return H + sp.identity(H.shape[0], format="csc") * w


def _add_matrix(H, other):
    """``H + other`` keeping ``H``'s storage (dense plus sparse would give np.matrix)."""
    if isinstance(H, np.ndarray):
        return H + (other.toarray() if sp.issparse(other) else other)
    return (H + other).tocsc()


def _submatrix(H, free):
    if isinstance(H, np.ndarray):
        return H[np.ix_(free, free)]
    return H[free][:, free].tocsc()


@dataclass(frozen=True, eq=False)
class GraspFragment:
    """Springs tying grasped particles to the end-effector point."""

    indices: np.ndarray
    rest_lengths: np.ndarray
    stiffness: float
    origin: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class SimState:
    positions: np.ndarray
    time_index: int = 0
    grasp: GraspFragment | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("positions must have shape (n, 3)")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain NaN or Inf")
        object.__setattr__(self, "positions", pos)

    def with_positions(self, positions, time_index=None) -> SimState:
        t = self.time_index + 1 if time_index is None else time_index
        return replace(self, positions=positions, time_index=t)


@dataclass
class SolverConfig:
    max_iterations: int = 200
    residual_tolerance: float = 1e-7
    dt: float = 1.0
    gravity: np.ndarray | None = None
    ground_plane_z: float | None = None
    particle_mass: float = 1.0
    method: str = "newton"
    regularization: float = 1e-10
    inertial_frame: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.residual_tolerance > 0:
            raise ValueError("residual_tolerance must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.method not in ("newton", "xpbd"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.gravity is not None:
            self.gravity = np.asarray(self.gravity, dtype=np.float64)

    @property
    def inertia(self) -> float:
        """Weight of the frame's distance-to-start term (0 for static solves)."""
        return self.particle_mass / (self.dt * self.dt) if self.inertial_frame else 0.0

    @classmethod
    def for_mesh(cls, mesh: Mesh, **kw) -> SolverConfig:
        spacing = mesh.spacing or float(np.min(mesh.edge_rest))
        kw.setdefault("residual_tolerance", 1e-6 * spacing)
        return cls(**kw)


@dataclass(frozen=True)
class SolveResult:
    positions: np.ndarray
    iterations: int
    residual: float
    converged: bool


def apply_grasp(mesh: Mesh, u0, r: float, k_a: float, positions: np.ndarray | None = None) -> GraspFragment:
    """Attach every particle within ``r`` of ``u0`` to the end effector.

    Each spring keeps its initial particle-to-``u0`` distance as rest length.
    """
    pos = mesh.rest_positions if positions is None else np.asarray(positions)
    idx = grasp_neighborhood(mesh, u0, r, positions=pos)
    u0 = np.asarray(u0, dtype=np.float64)
    rest = np.linalg.norm(pos[idx] - u0, axis=1)
    return GraspFragment(idx, rest, float(k_a), u0.copy())


def boundary_energy(positions: np.ndarray, anchors: np.ndarray, b: np.ndarray) -> float:
    """``0.5 * sum_i b_i |x_i - x_i0|^2``."""
    d = np.asarray(positions) - np.asarray(anchors)
    return 0.5 * float(np.dot(np.asarray(b, dtype=np.float64), np.einsum("ij,ij->i", d, d)))


def _spring_terms(d: np.ndarray, rest: np.ndarray, k: np.ndarray, project: bool):
    """Gradient vectors and 3x3 Hessian blocks for springs with offset vectors ``d``."""
    L = np.linalg.norm(d, axis=1)
    zero_rest = rest <= 0.0
    Ls = np.maximum(L, _TINY)
    nvec = d / Ls[:, None]
    # zero-rest springs: E = k|d|^2 / 2 exactly, avoids the undefined direction at d=0
    grad = np.where(zero_rest[:, None], k[:, None] * d, (k * (L - rest))[:, None] * nvec)
    geo = np.where(zero_rest, 1.0, 1.0 - rest / Ls)
    if project:
        geo = np.maximum(geo, 0.0)
    nn = nvec[:, :, None] * nvec[:, None, :]
    eye = np.eye(3)[None]
    blocks = k[:, None, None] * (np.where(zero_rest[:, None, None], 0.0, nn) + geo[:, None, None] * (eye - np.where(zero_rest[:, None, None], 0.0, nn)))
    return grad, blocks


class Simulator:
    """Mesh plus known constraint stiffnesses; the boundary stiffness ``b`` is an input.

    ``k_m`` weights edge springs, ``k_bend`` the cross-edge bending springs and
    ``k_a`` is the default grasp stiffness used by :meth:`grasp`.
    """

    def __init__(self, mesh: Mesh, config: SolverConfig | None = None, k_m: float = 1.0,
                 k_bend: float | None = None, k_a: float = 1.0, grasp_radius: float | None = None):
        self.mesh = mesh
        self.config = config if config is not None else SolverConfig.for_mesh(mesh)
        self.k_m = float(k_m)
        self.k_bend = float(k_m if k_bend is None else k_bend)
        self.k_a = float(k_a)
        spacing = mesh.spacing or float(np.min(mesh.edge_rest))
        self.grasp_radius = 1.5 * spacing if grasp_radius is None else float(grasp_radius)
        self.pairs = mesh.spring_pairs
        self.rest = mesh.spring_rest
        self.stiffness = np.concatenate([
            np.full(len(mesh.edges), self.k_m), np.full(len(mesh.bending_pairs), self.k_bend)])
        self.anchors = mesh.rest_positions
        n = mesh.particle_count
        self.n = n
        # sparse pattern of the spring Hessian: blocks (i,i), (j,j), (i,j), (j,i)
        i3 = 3 * self.pairs[:, 0][:, None] + np.arange(3)[None]
        j3 = 3 * self.pairs[:, 1][:, None] + np.arange(3)[None]
        def blk(r, c):
            return (np.repeat(r, 3, axis=1).reshape(-1, 9), np.tile(c, (1, 3)).reshape(-1, 9))
        rows, cols = zip(blk(i3, i3), blk(j3, j3), blk(i3, j3), blk(j3, i3))
        self._h_rows = np.concatenate(rows, axis=1).ravel()
        self._h_cols = np.concatenate(cols, axis=1).ravel()
        self._diag = np.arange(3 * n)
        self.dense = 3 * n <= _DENSE_LIMIT

    # -- construction helpers -------------------------------------------------
    def rest_state(self) -> SimState:
        return SimState(self.mesh.rest_positions.copy(), 0, None)

    def grasp(self, state: SimState, u0, r: float | None = None, k_a: float | None = None) -> SimState:
        """Return ``state`` with its grasp fragment replaced by a new grasp at ``u0``."""
        frag = apply_grasp(self.mesh, u0, self.grasp_radius if r is None else r,
                           self.k_a if k_a is None else k_a, positions=state.positions)
        return replace(state, grasp=frag)

    def release(self, state: SimState) -> SimState:
        return replace(state, grasp=None)

    # -- energies and residuals ---------------------------------------------
    def constraint_residuals(self, x: np.ndarray, u, grasp: GraspFragment | None) -> np.ndarray:
        """Raw constraint values: mesh springs, grasp springs, boundary springs."""
        x = np.asarray(x)
        cm = np.linalg.norm(x[self.pairs[:, 0]] - x[self.pairs[:, 1]], axis=1) - self.rest
        if grasp is not None and len(grasp):
            ca = np.linalg.norm(x[grasp.indices] - np.asarray(u, dtype=float), axis=1) - grasp.rest_lengths
        else:
            ca = np.zeros(0)
        cb = np.linalg.norm(x - self.anchors, axis=1)
        return np.concatenate([cm, ca, cb])

    def constraint_stiffness(self, grasp: GraspFragment | None, b) -> np.ndarray:
        ka = np.full(len(grasp) if grasp is not None else 0, grasp.stiffness if grasp is not None else 0.0)
        return np.concatenate([self.stiffness, ka, np.asarray(b, dtype=np.float64)])

    def total_energy(self, x: np.ndarray, u, b, grasp: GraspFragment | None) -> float:
        """``0.5 * C^T diag(k) C`` over all constraints (gravity excluded)."""
        c = self.constraint_residuals(x, u, grasp)
        return 0.5 * float(np.dot(self.constraint_stiffness(grasp, b), c * c))

    def objective(self, x: np.ndarray, u, b, grasp: GraspFragment | None) -> float:
        """Energy minimised by a step: constraint energy plus gravity potential."""
        e = self.total_energy(x, u, b, grasp)
        if self.config.gravity is not None:
            e -= self.config.particle_mass * float(np.sum(x @ self.config.gravity))
        return e

    def boundary_energy(self, x: np.ndarray, b) -> float:
        return boundary_energy(x, self.anchors, b)

    # -- derivatives ----------------------------------------------------------
    def gradient(self, x: np.ndarray, u, b, grasp: GraspFragment | None) -> np.ndarray:
        g, _ = self._grad_hess(x, u, b, grasp, hessian=False)
        return g

    def hessian(self, x: np.ndarray, u, b, grasp: GraspFragment | None, project: bool = False) -> sp.csc_matrix:
        _, H = self._grad_hess(x, u, b, grasp, hessian=True, project=project)
        return H

    def _grad_hess(self, x, u, b, grasp, hessian=True, project=True):
        n = self.n
        b = np.asarray(b, dtype=np.float64)
        p0, p1 = self.pairs[:, 0], self.pairs[:, 1]
        gs, bs = _spring_terms(x[p0] - x[p1], self.rest, self.stiffness, project)
        g = np.empty((n, 3))
        for c in range(3):
            g[:, c] = np.bincount(p0, gs[:, c], n) - np.bincount(p1, gs[:, c], n)
        db = x - self.anchors
        g += b[:, None] * db
        if grasp is not None and len(grasp):
            gi = grasp.indices
            ga, ba = _spring_terms(x[gi] - np.asarray(u, dtype=float), grasp.rest_lengths,
                                   np.full(len(gi), grasp.stiffness), project)
            np.add.at(g, gi, ga)
        if self.config.gravity is not None:
            g -= self.config.particle_mass * self.config.gravity[None]
        if not hessian:
            return g, None
        flat = bs.reshape(-1, 9)
        rows, cols = [self._h_rows], [self._h_cols]
        vals = [np.concatenate([flat, flat, -flat, -flat], axis=1).ravel()]
        if grasp is not None and len(grasp):
            g3 = 3 * grasp.indices[:, None] + np.arange(3)[None]
            rows.append(np.repeat(g3, 3, axis=1).ravel())
            cols.append(np.tile(g3, (1, 3)).ravel())
            vals.append(ba.ravel())
        rows.append(self._diag)
        cols.append(self._diag)
        vals.append(np.repeat(b, 3))
        return g, _assemble(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), 3 * n, self.dense)

    def grasp_coupling(self, x: np.ndarray, u, grasp: GraspFragment | None) -> sp.csc_matrix:
        """Mixed second derivative d(grad_x E)/du as a (3n, 3) sparse matrix."""
        n = self.n
        if grasp is None or not len(grasp):
            return sp.csc_matrix((3 * n, 3))
        gi = grasp.indices
        _, ba = _spring_terms(x[gi] - np.asarray(u, dtype=float), grasp.rest_lengths,
                              np.full(len(gi), grasp.stiffness), project=False)
        rows = np.repeat(3 * gi[:, None] + np.arange(3)[None], 3, axis=1).ravel()
        cols = np.tile(np.arange(3), 3 * len(gi))
        return sp.csc_matrix((-ba.ravel(), (rows, cols)), shape=(3 * n, 3))

    # -- contact --------------------------------------------------------------
    def blocked_dofs(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Boolean (3n,) mask of z coordinates held by the ground plane."""
        blocked = np.zeros((self.n, 3), dtype=bool)
        z0 = self.config.ground_plane_z
        if z0 is not None:
            tol = 1e-3 * self.config.residual_tolerance
            blocked[:, 2] = (x[:, 2] <= z0 + tol) & (g[:, 2] > 0.0)
        return blocked.ravel()

    def _project(self, x: np.ndarray) -> np.ndarray:
        z0 = self.config.ground_plane_z
        if z0 is not None:
            x[:, 2] = np.maximum(x[:, 2], z0)
        return x

    # -- stepping -------------------------------------------------------------
    def solve(self, state: SimState, u, b, extra=None, initial: np.ndarray | None = None) -> SolveResult:
        """Equilibrium positions reached from ``state`` under action ``u``.

        ``extra`` optionally supplies an additional energy term as a callable
        ``extra(x) -> (value, grad (n,3), hess csc or None)``. ``initial`` is a
        Newton starting guess; the frame still starts from ``state``.
        """
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (self.n,):
            raise ValueError(f"b must have shape ({self.n},)")
        if np.any(b < 0):
            raise ValueError("boundary stiffness must be non-negative")
        u = np.asarray(u, dtype=np.float64)
        if self.config.method == "xpbd":
            if extra is not None:
                raise ValueError("extra energy terms need the newton solver")
            return self._solve_xpbd(state, u, b)
        return self._solve_newton(state, u, b, extra, initial)

    def step(self, state: SimState, u, b) -> SimState:
        res = self.solve(state, u, b)
        if not res.converged:
            logger.debug("step hit max_iterations (residual %.3e)", res.residual)
        return state.with_positions(res.positions)

    def _solve_newton(self, state, u, b, extra, initial=None) -> SolveResult:
        cfg = self.config
        grasp = state.grasp
        x_start = state.positions
        x = x_start.copy() if initial is None else self._project(np.asarray(initial, dtype=np.float64))
        tol = cfg.residual_tolerance
        w = cfg.inertia

        def energy(y):
            e = self.objective(y, u, b, grasp)
            if w:
                d = y - x_start
                e += 0.5 * w * float(np.einsum("ij,ij->", d, d))
            if extra is not None:
                e += extra(y)[0]
            return e

        def derivatives(y, project):
            g, H = self._grad_hess(y, u, b, grasp, hessian=True, project=project)
            if w:
                g += w * (y - x_start)
                H = _add_diagonal(H, w)
            if extra is not None:
                _, ge, he = extra(y)
                g = g + ge
                if he is not None:
                    H = _add_matrix(H, he)
            return g, H

        e_cur = energy(x)
        step_norm = np.inf
        for it in range(1, cfg.max_iterations + 1):
            g, H = derivatives(x, project=not self.dense)
            blocked = self.blocked_dofs(x, g)
            gflat = g.ravel()
            gflat[blocked] = 0.0
            if not np.any(gflat):
                return SolveResult(x, it - 1, 0.0, True)
            free = np.flatnonzero(~blocked)
            dx = np.zeros(3 * self.n)
            sol = self._newton_direction(H, free, gflat[free])
            if sol is None:
                _, Hp = derivatives(x, project=True)
                sol = self._newton_direction(Hp, free, gflat[free], force=True)
            dx[free] = sol
            if not np.all(np.isfinite(dx)):
                raise SolverDivergenceError("non-finite Newton step", iteration=it)
            dx = dx.reshape(-1, 3)
            slope = float(np.dot(gflat, dx.ravel()))
            t = 1.0
            for _ in range(40):
                x_new = self._project(x + t * dx)
                e_new = energy(x_new)
                if np.isfinite(e_new) and e_new <= e_cur + 1e-4 * t * slope + 1e-15 * abs(e_cur):
                    break
                t *= 0.5
            else:
                # no decrease possible at this resolution: treat as converged
                return SolveResult(x, it, float(np.abs(dx).max()), float(np.abs(dx).max()) <= tol)
            if not np.all(np.isfinite(x_new)):
                raise SolverDivergenceError("non-finite positions", iteration=it)
            step_norm = float(np.abs(x_new - x).max())
            x, e_cur = x_new, e_new
            if step_norm <= tol and t == 1.0:
                return SolveResult(x, it, step_norm, True)
        return SolveResult(x, cfg.max_iterations, step_norm, False)

    def _newton_direction(self, H, free, gfree, force=False):
        """Solve ``H_ff dx = -g_f``; ``None`` if a dense H_ff is not positive definite."""
        Hf = _submatrix(H, free)
        if not isinstance(Hf, np.ndarray):
            scale = max(float(np.abs(Hf.diagonal()).max()), 1.0)
            Hf = Hf + sp.identity(len(free), format="csc") * (self.config.regularization * scale)
            try:
                return spla.splu(Hf).solve(-gfree)
            except RuntimeError:
                return None if not force else np.full(len(free), np.nan)
        scale = max(float(np.abs(np.diag(Hf)).max()), 1.0)
        Hf[np.diag_indices_from(Hf)] += self.config.regularization * scale
        try:
            c = sla.cho_factor(Hf, check_finite=False)
        except np.linalg.LinAlgError:
            if not force:
                return None
            Hf[np.diag_indices_from(Hf)] += 1e-6 * scale
            c = sla.cho_factor(Hf, check_finite=False)
        return sla.cho_solve(c, -gfree, check_finite=False)

    def _solve_xpbd(self, state, u, b) -> SolveResult:
        """Gauss-Seidel XPBD sweeps over one zero-velocity frame.

        Multipliers accumulate across sweeps, so the iteration converges to the
        same frame minimiser as the Newton path. With ``inertial_frame=False``
        frames are repeated (multipliers reset, start moved) until the
        positions stop changing, which reaches the static minimum.
        """
        cfg = self.config
        grasp = state.grasp
        x = state.positions.copy()
        w = 1.0 / cfg.particle_mass
        dt2 = cfg.dt * cfg.dt
        tol = cfg.residual_tolerance
        # constraint list: (i, j or -1, target point or None, rest, stiffness)
        cons = [(int(i), int(j), None, float(l), float(k))
                for (i, j), l, k in zip(self.pairs, self.rest, self.stiffness) if k > 0]
        if grasp is not None and grasp.stiffness > 0:
            cons += [(int(i), -1, u, float(l), grasp.stiffness) for i, l in zip(grasp.indices, grasp.rest_lengths)]
        cons += [(i, -1, self.anchors[i], 0.0, float(b[i])) for i in range(self.n) if b[i] > 0]
        gvec = cfg.gravity
        z0 = cfg.ground_plane_z
        frames = 1 if cfg.inertial_frame else cfg.max_iterations
        total = 0
        delta = np.inf
        for frame in range(frames):
            x_frame = x.copy()
            if gvec is not None:
                x += dt2 * gvec[None]
            lam = np.zeros(len(cons))
            lam3 = np.zeros((len(cons), 3))
            # unilateral ground contacts carry their own non-negative multipliers
            lam_g = np.zeros(self.n)
            sweeps = cfg.max_iterations if cfg.inertial_frame else 50
            for sweep in range(1, sweeps + 1):
                x_prev = x.copy()
                for c, (i, j, p, rest, k) in enumerate(cons):
                    alpha = 1.0 / (k * dt2)
                    d = x[i] - (x[j] if j >= 0 else p)
                    if rest <= 0.0:
                        # zero rest length: three linear per-axis constraints, same energy
                        wsum = w + (w if j >= 0 else 0.0)
                        dl = -(d + alpha * lam3[c]) / (wsum + alpha)
                        lam3[c] += dl
                        x[i] += w * dl
                        if j >= 0:
                            x[j] -= w * dl
                        continue
                    L = np.sqrt(d @ d)
                    if L < _TINY:
                        continue
                    nrm = d / L
                    wsum = w + (w if j >= 0 else 0.0)
                    dlam = -(L - rest + alpha * lam[c]) / (wsum + alpha)
                    lam[c] += dlam
                    x[i] += w * dlam * nrm
                    if j >= 0:
                        x[j] -= w * dlam * nrm
                if z0 is not None:
                    lam_new = np.maximum(lam_g - (x[:, 2] - z0) / w, 0.0)
                    x[:, 2] += w * (lam_new - lam_g)
                    lam_g = lam_new
                total += 1
                if not np.all(np.isfinite(x)):
                    raise SolverDivergenceError("non-finite positions during XPBD sweep", iteration=total)
                delta = float(np.abs(x - x_prev).max())
                if delta <= tol:
                    break
            if cfg.inertial_frame:
                return SolveResult(x, total, delta, delta <= tol)
            delta = float(np.abs(x - x_frame).max())
            if delta <= tol:
                return SolveResult(x, total, delta, True)
        return SolveResult(x, total, delta, False)

    # -- sensitivities --------------------------------------------------------
    def equilibrium_jacobian(self, x: np.ndarray, u, b, grasp: GraspFragment | None,
                             rhs: np.ndarray | sp.spmatrix, start: np.ndarray | None = None,
                             extra=None) -> np.ndarray:
        """Solve ``-H^{-1} rhs`` on the free DOFs at a frame solution ``x``.

        ``start`` is the frame's starting positions (needed to tell which
        ground contacts are load-bearing). Rows of ground-held coordinates are
        zero. ``rhs`` is ``d(grad_x E)/dp`` with shape ``(3n, m)``. ``extra`` is
        the additional energy term the solution was computed with, if any.
        """
        g, H = self._grad_hess(x, u, b, grasp, hessian=True, project=False)
        w = self.config.inertia
        if w:
            H = _add_diagonal(H, w)
            if start is not None:
                g = g + w * (x - start)
        if extra is not None:
            _, ge, he = extra(x)
            g = g + ge
            if he is not None:
                H = _add_matrix(H, he)
        blocked = self.blocked_dofs(x, g)
        free = np.flatnonzero(~blocked)
        rhs = rhs.toarray() if sp.issparse(rhs) else np.asarray(rhs)
        out = np.zeros((3 * self.n, rhs.shape[1]))
        Hf = _submatrix(H, free)
        if isinstance(Hf, np.ndarray):
            scale = max(float(np.abs(np.diag(Hf)).max()), 1.0)
            Hf[np.diag_indices_from(Hf)] += self.config.regularization * scale
            out[free] = -sla.solve(Hf, rhs[free], assume_a="sym", check_finite=False)
        else:
            scale = max(float(np.abs(Hf.diagonal()).max()), 1.0)
            Hf = Hf + sp.identity(len(free), format="csc") * (self.config.regularization * scale)
            out[free] = -spla.splu(Hf).solve(np.ascontiguousarray(rhs[free]))
        return out


def step_quasistatic(sim: Simulator, state: SimState, u, b) -> SimState:
    return sim.step(state, u, b)


def total_energy(sim: Simulator, state: SimState, u, b) -> float:
    return sim.total_energy(state.positions, u, b, state.grasp)


def constraint_residuals(sim: Simulator, state: SimState, u) -> np.ndarray:
    return sim.constraint_residuals(state.positions, u, state.grasp)
