from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bsense.jacobian import assemble_stiffness_laplacian
from bsense.mesh import build_grid_mesh
from bsense.simulator import Simulator, SolverConfig

settings.register_profile("bsense", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("bsense")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_sim(rows=4, cols=4, spacing=1 / 3, **kw):
    """Desk-physics simulator on a small grid."""
    mesh = build_grid_mesh(rows, cols, spacing)
    kw.setdefault("gravity", [0.0, 0.0, -0.01])
    kw.setdefault("ground_plane_z", 0.0)
    return Simulator(mesh, SolverConfig.for_mesh(mesh, **kw))


def spring_free_sim(inertial: bool, k_a: float = 1.0):
    """2x2 sheet whose mesh springs are switched off: every particle is on its own."""
    mesh = build_grid_mesh(2, 2, 1.0)
    cfg = SolverConfig.for_mesh(mesh, inertial_frame=inertial, residual_tolerance=1e-12)
    return Simulator(mesh, cfg, k_m=0.0, k_bend=0.0, k_a=k_a, grasp_radius=0.5)


def random_instance(rng, n):
    """Random spring graph (spanning path plus extras) with a random boundary subset."""
    X0 = rng.normal(size=(n, 3))
    pairs = [(i, i + 1) for i in range(n - 1)]
    extra = [p for p in itertools.combinations(range(n), 2) if p not in pairs]
    if extra:
        for j in rng.choice(len(extra), size=min(len(extra), n // 2), replace=False):
            pairs.append(extra[j])
    m = int(rng.integers(1, n + 1))
    bidx = rng.choice(n, size=m, replace=False)
    lap = assemble_stiffness_laplacian(X0, np.array(pairs), rng.uniform(0.5, 2.0, len(pairs)), bidx)
    return lap, rng.uniform(0.01, 1.0, m)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
