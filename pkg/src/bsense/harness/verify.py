"""Self-contained invariant and oracle checks behind ``bsense verify``.

Each check draws seeded random instances, compares a library result to an
independent computation and returns ``(ok, detail)``. The whole set runs in
well under a minute on a laptop.
"""

from __future__ import annotations

import itertools
import tempfile
import time
from pathlib import Path

import numpy as np

from bsense.estimator import (BoundaryBelief, NoiseConfig, Transition, ekf_update, entropy_product_form,
                              kalman_gain, posterior_covariance)
from bsense.harness.metrics import pcd_pug
from bsense.harness.trace import TraceRecord, export_trace, load_trace, round_record
from bsense.jacobian import (analytical_jacobian, assemble_stiffness_laplacian, boundary_displacement_block,
                             linear_spring_equilibrium, response_matrix)
from bsense.mesh import build_grid_mesh, dilate_mask
from bsense.objectives import uwd_lower_bound
from bsense.registration import chamfer
from bsense.simulator import Simulator, SolverConfig


def _random_chain(rng, n):
    """Random 3-D spring graph: a spanning path plus a few extra edges."""
    X0 = rng.normal(size=(n, 3))
    pairs = [(i, i + 1) for i in range(n - 1)]
    extra = [p for p in itertools.combinations(range(n), 2) if p not in pairs]
    for j in rng.choice(len(extra), size=min(len(extra), n // 2), replace=False):
        pairs.append(extra[j])
    return X0, np.array(pairs)


def check_fixed_point(rng) -> tuple[bool, str]:
    """A sheet at rest, ungrasped, does not move; so does a grasp held still."""
    mesh = build_grid_mesh(5, 5, 0.25)
    sim = Simulator(mesh, SolverConfig.for_mesh(mesh, gravity=[0, 0, -0.01], ground_plane_z=0.0))
    b = rng.uniform(0, 1, mesh.particle_count)
    s0 = sim.rest_state()
    err = float(np.abs(sim.step(s0, np.zeros(3), b).positions - s0.positions).max())
    g = sim.grasp(s0, mesh.rest_positions[6])
    err = max(err, float(np.abs(sim.step(g, mesh.rest_positions[6], b).positions - s0.positions).max()))
    return err < 1e-9, f"max drift {err:.2e}"


def check_zero_displacement_update(rng) -> tuple[bool, str]:
    """An observation equal to the prediction of an unmoved grasp leaves the belief unchanged."""
    mesh = build_grid_mesh(4, 4, 1 / 3)
    sim = Simulator(mesh, SolverConfig.for_mesh(mesh, gravity=[0, 0, -0.01], ground_plane_z=0.0))
    bel = BoundaryBelief(rng.uniform(0, 0.2, 16), np.diag(rng.uniform(0.01, 0.1, 16)))
    s = sim.grasp(sim.rest_state(), mesh.rest_positions[0])
    tr = Transition(s, mesh.rest_positions[0], s.positions.copy())
    post = ekf_update(bel, [tr], [0], sim, NoiseConfig())
    err = max(float(np.abs(post.mean - bel.mean).max()), float(np.abs(post.cov - bel.cov).max()))
    return err < 1e-12, f"belief change {err:.2e}"


def check_linear_jacobian(rng, trials: int = 30) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(3, 13))
        X0, pairs = _random_chain(rng, n)
        m = int(rng.integers(1, n))
        bidx = rng.choice(n, size=m, replace=False)
        lap = assemble_stiffness_laplacian(X0, pairs, rng.uniform(0.5, 2.0, len(pairs)), bidx)
        b = rng.uniform(0.01, 1.0, m)
        anchors = [(int(bidx[0]), X0[bidx[0]] + rng.normal(size=3), 0.0)]
        force = rng.normal(size=(n, 3))
        x = linear_spring_equilibrium(lap, b, anchors, force)
        disp = (x - X0)[lap.order[:m]]
        J = analytical_jacobian(lap, b, disp)
        fd = np.empty_like(J)
        h = 1e-6
        for i in range(m):
            e = np.zeros(m)
            e[i] = h
            fd[:, i] = (lap.flatten(linear_spring_equilibrium(lap, b + e, anchors, force))
                        - lap.flatten(linear_spring_equilibrium(lap, b - e, anchors, force))) / (2 * h)
        worst = max(worst, float(np.linalg.norm(J - fd) / max(np.linalg.norm(fd), 1e-300)))
    return worst <= 1e-5, f"worst relative error {worst:.2e}"


def check_entropy_product_form(rng, trials: int = 50) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(trials):
        n, p = int(rng.integers(1, 11)), int(rng.integers(1, 15))
        A = rng.normal(size=(n, n))
        cov = A @ A.T + 0.1 * np.eye(n)
        J = rng.normal(size=(p, n))
        alpha = float(10 ** rng.uniform(-3, 1))
        K = kalman_gain(cov, J, alpha)
        direct = np.linalg.det((np.eye(n) - K @ J) @ cov)
        worst = max(worst, abs(entropy_product_form(cov, J, alpha) - direct) / abs(direct))
    return worst <= 1e-8, f"worst relative error {worst:.2e}"


def check_gain_forms(rng, trials: int = 30) -> tuple[bool, str]:
    """The tall-Jacobian gain agrees with the textbook formula; Joseph and short forms agree."""
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 8))
        p = n + int(rng.integers(1, 10))
        A = rng.normal(size=(n, n))
        cov = A @ A.T + 0.1 * np.eye(n)
        J = rng.normal(size=(p, n))
        alpha = float(10 ** rng.uniform(-2, 1))
        S = J @ cov @ J.T + alpha * np.eye(p)
        K_ref = cov @ J.T @ np.linalg.inv(S)
        K = kalman_gain(cov, J, alpha)
        d1 = np.abs(K - K_ref).max() / np.abs(K_ref).max()
        P1 = posterior_covariance(cov, K, J, alpha)
        P2 = posterior_covariance(cov, K, J, alpha, joseph=True)
        worst = max(worst, d1, np.abs(P1 - P2).max() / np.abs(P1).max())
    return worst <= 1e-8, f"worst relative difference {worst:.2e}"


def check_uwd_bound(rng, trials: int = 50) -> tuple[bool, str]:
    slack = np.inf
    for _ in range(trials):
        n = int(rng.integers(2, 13))
        X0, pairs = _random_chain(rng, n)
        m = int(rng.integers(1, n + 1))
        bidx = rng.choice(n, size=m, replace=False)
        lap = assemble_stiffness_laplacian(X0, pairs, rng.uniform(0.5, 2.0, len(pairs)), bidx)
        b = rng.uniform(0.01, 1.0, m)
        R = response_matrix(lap, b)
        D = boundary_displacement_block(rng.normal(size=(m, 3)), n)
        A = rng.normal(size=(m, m))
        lhs, rhs = uwd_lower_bound(R, D, A @ A.T + 0.01 * np.eye(m))
        slack = min(slack, rhs - lhs)
    return slack >= -1e-9, f"minimum slack {slack:.2e}"


def check_chamfer(rng) -> tuple[bool, str]:
    P, Q = rng.normal(size=(40, 3)), rng.normal(size=(55, 3))
    d = ((P[:, None] - Q[None]) ** 2).sum(-1)
    brute = d.min(axis=1).sum() + d.min(axis=0).sum()
    errs = [abs(chamfer(P, Q) - brute), abs(chamfer(P, Q) - chamfer(Q, P)), chamfer(P, P)]
    worst = max(errs)
    return worst < 1e-10, f"max deviation {worst:.2e}"


def check_dilation_monotone(rng, trials: int = 40) -> tuple[bool, str]:
    mesh = build_grid_mesh(6, 6, 0.2)
    n = mesh.particle_count
    for _ in range(trials):
        truth = rng.random(n) < 0.2
        truth[rng.integers(n)] = True
        mean = np.where(rng.random(n) < 0.25, 0.1, 0.0)
        prev = (-1.0, -1.0)
        for dil in (0, 1, 2):
            pcd, pug = pcd_pug(mean, truth, 0.05, dil, mesh)
            det = mean > 0.05
            ref_pug = 100.0 * (dilate_mask(mesh, det, dil) & truth).sum() / truth.sum()
            if abs(pug - ref_pug) > 1e-12:
                return False, "PUG disagrees with set arithmetic"
            pcd_v = -1.0 if pcd is None else pcd
            if pcd_v < prev[0] or pug < prev[1]:
                return False, f"metric decreased at dilation {dil}"
            prev = (pcd_v, pug)
    return True, f"{trials} random masks"


def check_trace_roundtrip(rng) -> tuple[bool, str]:
    recs = [TraceRecord(t, tuple(rng.normal(size=3)), float(rng.normal()), float(rng.random()),
                        None if t % 3 == 0 else float(rng.random() * 100), float(rng.random() * 100),
                        "cut" if t == 2 else "") for t in range(6)]
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "trace.csv"
        export_trace(recs, path)
        back = load_trace(path)
        export_trace(back, Path(d) / "again.csv")
        same_bytes = path.read_bytes() == (Path(d) / "again.csv").read_bytes()
    ok = back == [round_record(r) for r in recs] and same_bytes
    return ok, "records and bytes identical" if ok else "round trip changed the trace"


CHECKS = {
    "simulator fixed point": check_fixed_point,
    "zero-displacement update": check_zero_displacement_update,
    "linear-spring jacobian vs finite differences": check_linear_jacobian,
    "entropy product form vs direct determinant": check_entropy_product_form,
    "kalman gain forms": check_gain_forms,
    "displacement score lower bound": check_uwd_bound,
    "chamfer brute-force oracle": check_chamfer,
    "pcd/pug dilation monotonicity": check_dilation_monotone,
    "trace round trip": check_trace_roundtrip,
}


def run_checks(seed: int = 0, out=print) -> bool:
    ok_all = True
    t_all = time.perf_counter()
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn(np.random.default_rng(seed))
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    out(f"{'all checks passed' if ok_all else 'some checks FAILED'} in {time.perf_counter() - t_all:.1f}s")
    return ok_all
