from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsense.errors import SolverDivergenceError
from bsense.mesh import build_grid_mesh
from bsense.simulator import (Simulator, SolverConfig, apply_grasp, boundary_energy, constraint_residuals,
                              step_quasistatic, total_energy)

from conftest import small_sim, spring_free_sim


def naive_energy(sim, x, u, b, grasp):
    e = 0.0
    for (i, j), rest, k in zip(sim.pairs, sim.rest, sim.stiffness):
        e += 0.5 * k * (np.linalg.norm(x[i] - x[j]) - rest) ** 2
    if grasp is not None:
        for i, rest in zip(grasp.indices, grasp.rest_lengths):
            e += 0.5 * grasp.stiffness * (np.linalg.norm(x[i] - u) - rest) ** 2
    for i in range(sim.n):
        e += 0.5 * b[i] * np.linalg.norm(x[i] - sim.anchors[i]) ** 2
    return e


def test_rest_energy_is_zero():
    sim = small_sim()
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    assert total_energy(sim, s, sim.anchors[0], np.full(sim.n, 0.3)) == 0.0


def test_single_boundary_spring_energy():
    sim = spring_free_sim(inertial=False)
    x = sim.anchors.copy()
    x[2, 0] += 0.2
    b = np.array([0.0, 0.0, 0.1, 0.0])
    assert sim.total_energy(x, None, b, None) == pytest.approx(0.002, abs=1e-15)


def test_energy_matches_naive_sum(rng):
    sim = small_sim(3, 3, 0.5)
    s = sim.grasp(sim.rest_state(), sim.anchors[4])
    x = sim.anchors + rng.normal(scale=0.05, size=(9, 3))
    u = sim.anchors[4] + rng.normal(scale=0.1, size=3)
    b = rng.uniform(0, 1, 9)
    assert sim.total_energy(x, u, b, s.grasp) == pytest.approx(naive_energy(sim, x, u, b, s.grasp), rel=1e-12)


def test_boundary_energy_examples():
    anchors = np.zeros((3, 3))
    assert boundary_energy(anchors, anchors, np.ones(3)) == 0.0
    moved = np.ones((3, 3))
    assert boundary_energy(moved, anchors, np.zeros(3)) == 0.0
    x = anchors.copy()
    x[1] = [0.1, 0.0, 0.0]
    assert boundary_energy(x, anchors, np.array([0.0, 0.1, 0.0])) == pytest.approx(5e-4, abs=1e-18)


def test_fixed_point_at_rest():
    sim = small_sim()
    s = sim.grasp(sim.rest_state(), sim.anchors[5])
    out = step_quasistatic(sim, s, sim.anchors[5], np.full(sim.n, 0.1))
    assert np.array_equal(out.positions, s.positions)
    assert np.all(constraint_residuals(sim, out, sim.anchors[5]) == 0.0)


@pytest.mark.parametrize("inertial", [False, True])
def test_two_spring_closed_form(inertial):
    sim = spring_free_sim(inertial)
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    b = np.full(4, 0.3)
    d = np.array([0.2, -0.1, 0.4])
    u = sim.anchors[0] + d
    x = sim.step(s, u, b).positions
    m = 1.0 if inertial else 0.0
    # m pulls toward the frame start (rest), b toward the anchor (rest), k_a toward u
    expected = sim.anchors[0] + d * 1.0 / (1.0 + b[0] + m)
    np.testing.assert_allclose(x[0], expected, atol=1e-10)
    np.testing.assert_allclose(x[1:], sim.anchors[1:], atol=1e-12)


def test_grasp_fragment_geometry():
    mesh = build_grid_mesh(2, 2, 1.0)
    one = apply_grasp(mesh, mesh.rest_positions[3], 0.1, 1.0)
    assert one.indices.tolist() == [3] and one.rest_lengths.tolist() == [0.0]
    four = apply_grasp(mesh, [0.5, 0.5, 0.0], 0.8, 1.0)
    assert len(four) == 4
    np.testing.assert_allclose(four.rest_lengths, np.sqrt(2) / 2)


def test_constraint_residuals():
    sim = small_sim(3, 3, 1.0)
    s = sim.rest_state()
    assert np.all(sim.constraint_residuals(s.positions, None, None) == 0)
    # stretch edge between particles 0 and 1 along x by moving both ends apart
    e = int(np.flatnonzero((sim.pairs == [0, 1]).all(1) | (sim.pairs == [1, 0]).all(1))[0])
    x = s.positions.copy()
    x[0, 0] -= 0.05
    c = sim.constraint_residuals(x, None, None)[:len(sim.pairs)]
    assert c[e] == pytest.approx(0.05)
    moved = {frozenset(p) for p in sim.pairs[np.abs(c) > 1e-12].tolist()}
    assert all(0 in p for p in moved)


def test_step_is_deterministic(rng):
    sim = small_sim()
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    b = rng.uniform(0, 0.3, sim.n)
    u = sim.anchors[0] + [0.05, 0.02, 0.1]
    a, c = sim.step(s, u, b), sim.step(s, u, b)
    assert a.positions.tobytes() == c.positions.tobytes()


@given(b1=st.floats(0.01, 2.0), db=st.floats(0.01, 2.0), pull=st.floats(0.05, 1.0))
def test_stiffer_boundary_moves_less(b1, db, pull):
    sim = spring_free_sim(inertial=False)
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    u = sim.anchors[0] + [pull, 0.0, 0.0]
    disp = [np.linalg.norm(sim.step(s, u, np.full(4, b)).positions[0] - sim.anchors[0]) for b in (b1, b1 + db)]
    assert disp[1] < disp[0]


@given(shift=st.lists(st.floats(-2, 2), min_size=3, max_size=3), seed=st.integers(0, 1000))
def test_translation_equivariance_without_boundary(shift, seed):
    mesh = build_grid_mesh(3, 3, 0.5)
    sim = Simulator(mesh, SolverConfig.for_mesh(mesh, inertial_frame=True))
    v = np.asarray(shift)
    rng = np.random.default_rng(seed)
    s = sim.grasp(sim.rest_state(), sim.anchors[4])
    u = sim.anchors[4] + rng.normal(scale=0.1, size=3)
    b = np.zeros(9)
    base = sim.step(s, u, b).positions
    moved = sim.grasp(s.with_positions(s.positions + v), sim.anchors[4] + v)
    out = sim.step(moved, u + v, b).positions
    np.testing.assert_allclose(out, base + v, atol=1e-8)


def test_non_finite_state_rejected():
    sim = small_sim()
    pos = sim.anchors.copy()
    pos[3, 0] = np.nan
    with pytest.raises(ValueError):
        sim.rest_state().with_positions(pos)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_step_raises_divergence():
    sim = small_sim()
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    with pytest.raises(SolverDivergenceError) as info:
        sim.step(s, np.array([1e300, 0.0, 0.0]), np.zeros(sim.n))
    assert info.value.iteration is not None


def test_ground_holds_sheet():
    sim = small_sim()
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    out = sim.step(s, sim.anchors[0] + [0, 0, 0.2], np.zeros(sim.n))
    assert out.positions[:, 2].min() >= -1e-9
    assert out.positions[0, 2] > 0


@pytest.mark.parametrize("method", ["newton", "xpbd"])
def test_solvers_agree_on_small_pull(method):
    mesh = build_grid_mesh(3, 3, 0.5)
    sim = Simulator(mesh, SolverConfig.for_mesh(mesh, method=method, max_iterations=20000))
    ref = Simulator(mesh, SolverConfig.for_mesh(mesh))
    s = sim.grasp(sim.rest_state(), mesh.rest_positions[0])
    u = mesh.rest_positions[0] + [0.05, 0.0, 0.1]
    b = np.full(9, 0.2)
    np.testing.assert_allclose(sim.step(s, u, b).positions, ref.step(s, u, b).positions, atol=1e-4)
