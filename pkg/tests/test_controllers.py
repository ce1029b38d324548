from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

import bsense.controllers as controllers
from bsense.controllers import (ControllerConfig, PrimitiveSet, SamplingPlanner, action_gradient, guarded_descent,
                                lg_step, pmp_select, truncate_step)
from bsense.errors import ControllerError, SolverDivergenceError
from bsense.estimator import BoundaryBelief, NoiseConfig
from bsense.objectives import LossWeights

from conftest import small_sim


def lifted(sim, height=0.05):
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    u = sim.anchors[0] + [0, 0, height]
    return sim.step(s, u, np.zeros(sim.n)), u


def test_action_gradient_probes():
    assert np.all(action_gradient(lambda u: 3.0, np.ones(3)) == 0)
    np.testing.assert_allclose(action_gradient(lambda u: u[2], np.ones(3)), [0, 0, 1], atol=1e-8)
    c = np.array([0.3, -0.2, 0.5])
    u = np.array([1.0, 2.0, -1.0])
    g = action_gradient(lambda v: float(np.sum((v - c) ** 2)), u, eps=1e-4)
    np.testing.assert_allclose(g, 2 * (u - c), atol=1e-7)


def test_descent_stops_on_zero_gradient():
    u0 = np.array([0.1, 0.2, 0.3])
    u, _, hist = guarded_descent(lambda u: 1.0, lambda u: (1.0, np.zeros(3)), u0, 0.1, 10)
    np.testing.assert_array_equal(u, u0)
    assert hist == [1.0]


def test_descent_converges_on_quadratic():
    c = np.array([1.0, -2.0, 0.5])
    f = lambda u: float(np.sum((u - c) ** 2))
    fg = lambda u: (f(u), 2 * (u - c))
    alpha, iters = 0.1, 60
    u, _, hist = guarded_descent(f, fg, np.zeros(3), alpha, iters)
    # each step contracts the error by 1 - 2 alpha
    assert np.linalg.norm(u - c) <= (1 - 2 * alpha) ** iters * np.linalg.norm(c) + 1e-12
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_truncation_examples():
    u_prev = np.array([1.0, 1.0, 1.0])
    np.testing.assert_array_equal(truncate_step(u_prev, u_prev, 0.1), u_prev)
    out = truncate_step(u_prev, u_prev + [3.0, 4.0, 0.0], 0.5)
    assert np.linalg.norm(out - u_prev) == pytest.approx(0.5)
    np.testing.assert_allclose(out, u_prev + [0.3, 0.4, 0.0])


@given(target=st.lists(st.floats(-10, 10), min_size=3, max_size=3), gamma=st.floats(1e-3, 5.0))
def test_truncated_step_never_exceeds_gamma(target, gamma):
    u_prev = np.array([0.2, -0.1, 0.4])
    assert np.linalg.norm(truncate_step(u_prev, target, gamma) - u_prev) <= gamma * (1 + 1e-12)


def planner_for(sim, **kw):
    cfg = ControllerConfig.for_mesh(sim.mesh, **kw)
    return SamplingPlanner(cfg)


def test_single_far_sample_truncated_to_gamma():
    sim = small_sim()
    s, u = lifted(sim)
    planner = planner_for(sim, sample_count=1, sl_iterations=0, truncation_length=0.01, rng_seed=5)
    out = planner.plan(sim, s, BoundaryBelief.initial(sim.n), u, LossWeights.for_mesh(sim.mesh))
    sample = planner.last_samples[0]
    assert np.linalg.norm(sample - u) > 0.01
    np.testing.assert_allclose(out, u + 0.01 * (sample - u) / np.linalg.norm(sample - u), atol=1e-15)


def run_planner(sim, seed, calls=3):
    s, u = lifted(sim)
    planner = planner_for(sim, sample_count=6, sl_iterations=1, elite_fraction=0.34, rng_seed=seed)
    bel = BoundaryBelief.initial(sim.n)
    w = LossWeights.for_mesh(sim.mesh)
    out = []
    for _ in range(calls):
        elites_before = planner.elites.copy()
        u = planner.plan(sim, s, bel, u, w)
        out.append((u.copy(), elites_before, planner.last_samples.copy()))
    return out


def test_sampling_planner_is_reproducible_and_carries_elites():
    sim = small_sim()
    a, b = run_planner(sim, 11), run_planner(sim, 11)
    for (ua, elites, samples), (ub, _, _) in zip(a, b):
        assert ua.tobytes() == ub.tobytes()
        np.testing.assert_array_equal(samples[:len(elites)], elites)
    assert len(a[1][1]) == 2


def test_all_samples_diverging_is_a_controller_error(monkeypatch):
    sim = small_sim()
    s, u = lifted(sim)

    def boom(*a, **kw):
        raise SolverDivergenceError("diverged", iteration=0)

    monkeypatch.setattr(controllers, "guarded_descent", boom)
    planner = planner_for(sim, sample_count=3)
    with pytest.raises(ControllerError):
        planner.plan(sim, s, BoundaryBelief.initial(sim.n), u, LossWeights.for_mesh(sim.mesh))


def test_lg_step_respects_truncation():
    sim = small_sim()
    s, u = lifted(sim)
    cfg = ControllerConfig.for_mesh(sim.mesh, lg_iterations=3, truncation_length=0.005)
    bel = BoundaryBelief(np.full(sim.n, 0.05), 0.1 * np.eye(sim.n))
    for kind in ("lgd", "lgh"):
        out = lg_step(kind, sim, s, bel, u, cfg, LossWeights.for_mesh(sim.mesh), NoiseConfig())
        assert np.all(np.isfinite(out))
        assert np.linalg.norm(out - u) <= 3 * 0.005 + 1e-12
        sim.step(s, out, np.zeros(sim.n))


def test_unknown_local_controller():
    sim = small_sim()
    s, u = lifted(sim)
    with pytest.raises(ValueError):
        lg_step("lgx", sim, s, BoundaryBelief.initial(sim.n), u, ControllerConfig.for_mesh(sim.mesh),
                LossWeights.for_mesh(sim.mesh))


def test_primitives_never_point_down():
    assert np.all(PrimitiveSet().directions[:, 2] >= 0)
    with pytest.raises(ValueError):
        PrimitiveSet(names=("down",))


def test_pmp_tie_goes_to_first(monkeypatch):
    sim = small_sim()
    s, u = lifted(sim)
    monkeypatch.setattr(controllers, "observation_jacobian",
                        lambda sim, x, u, b, **kw: (None, np.zeros((3 * sim.n, sim.n))))
    prims = PrimitiveSet(step=0.01)
    out = pmp_select(sim, s, BoundaryBelief.initial(sim.n), u, prims, NoiseConfig())
    np.testing.assert_allclose(out, u + 0.01 * prims.directions[0])


def test_pmp_picks_the_informative_primitive(monkeypatch):
    sim = small_sim()
    s, u = lifted(sim)
    prims = PrimitiveSet(step=0.01)
    left = u + 0.01 * prims.directions[prims.names.index("left")]

    def fake(sim, x, cand, b, **kw):
        J = np.zeros((3 * sim.n, sim.n))
        if np.allclose(cand, left):
            J[0, 0] = 1.0
        return None, J

    monkeypatch.setattr(controllers, "observation_jacobian", fake)
    np.testing.assert_allclose(pmp_select(sim, s, BoundaryBelief.initial(sim.n), u, prims, NoiseConfig()), left)


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(sample_count=0)
    with pytest.raises(ValueError):
        ControllerConfig(elite_fraction=1.0)
    with pytest.raises(ValueError):
        ControllerConfig(gradient="symbolic")
