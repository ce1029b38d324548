from __future__ import annotations

import numpy as np
import pytest

import bsense.harness.experiment as experiment
from bsense.errors import SolverDivergenceError
from bsense.estimator import Transition
from bsense.harness.baseline import AdamState, adam_baseline_update, shooting_loss
from bsense.harness.cli import main
from bsense.harness.config import (ExperimentConfig, config_from_dict, dump_config, load_config)
from bsense.harness.metrics import UNDEFINED, mean_boundary_energy, pcd_pug, scaled_energy_threshold
from bsense.harness.scenarios import SCENARIO_NAMES, attachment_mask, make_scenario
from bsense.harness.trace import TRACE_HEADER, export_trace, load_trace
from bsense.mesh import build_grid_mesh

from conftest import small_sim


def tiny_config(**over) -> ExperimentConfig:
    data = {"mesh": {"rows": 5, "cols": 5, "spacing": 0.25}, "horizon": 6, "snapshot_every": 1,
            "schedule": {"lift_steps": 6}}
    data.update(over)
    return config_from_dict(data)


# -- scenarios and metrics ----------------------------------------------------------------

def test_line_is_one_edge():
    mesh = build_grid_mesh(10, 10, 1 / 9)
    mask = attachment_mask("Line", mesh)
    assert mask.sum() == 10
    rows = {divmod(int(i), 10)[0] for i in np.flatnonzero(mask)}
    assert rows == {9}


def test_every_layout_is_nonempty():
    mesh = build_grid_mesh(10, 10, 1 / 9)
    for name in SCENARIO_NAMES:
        assert attachment_mask(name, mesh).any(), name


def test_unknown_scenario():
    with pytest.raises(ValueError):
        make_scenario("Zigzag", build_grid_mesh(4, 4, 1.0))


def test_metric_examples():
    mesh = build_grid_mesh(5, 5, 1.0)
    truth = np.zeros(25, bool)
    truth[[0, 1, 2]] = True
    assert pcd_pug(np.where(truth, 0.1, 0.0), truth, 0.05, 0, mesh) == (100.0, 100.0)
    assert pcd_pug(np.zeros(25), truth, 0.05, 1, mesh) == (UNDEFINED, 0.0)
    half = np.zeros(25)
    half[[0, 24]] = 0.1
    pcd, pug = pcd_pug(half, truth, 0.05, 0, mesh)
    assert pcd == 50.0 and pug == pytest.approx(100 / 3)


def test_energy_threshold_scaling():
    mesh = build_grid_mesh(10, 10, 1 / 9)
    b = make_scenario("Line", mesh).ground_truth_b
    thr = scaled_energy_threshold(mesh, b, 0.05)
    assert thr == pytest.approx(0.5 * 10 * 0.1 * 0.05 ** 2 / 100)
    pos = mesh.rest_positions.copy()
    pos[b > 0, 0] += 0.05
    assert mean_boundary_energy(pos, mesh.rest_positions, b) == pytest.approx(thr)


# -- baseline -------------------------------------------------------------------------------

def test_adam_idle_on_consistent_data():
    sim = small_sim()
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    u = sim.anchors[0] + [0, 0, 0.1]
    b = np.full(sim.n, 0.05)
    hist = [Transition(s, u, sim.step(s, u, b).positions)]
    val, g = shooting_loss(sim, b, hist, [0])
    assert val == 0.0 and np.all(g == 0)
    out, state = adam_baseline_update(b, hist, [0], AdamState(), sim)
    np.testing.assert_array_equal(out, b)
    assert state.step == 1


def test_adam_gradient_matches_fd_and_is_reproducible():
    sim = small_sim()
    s = sim.grasp(sim.rest_state(), sim.anchors[0])
    u = sim.anchors[0] + [0.02, 0, 0.1]
    truth = np.zeros(sim.n)
    truth[-4:] = 0.1
    hist = [Transition(s, u, sim.step(s, u, truth).positions)]
    b = np.full(sim.n, 0.02)
    _, g = shooting_loss(sim, b, hist, [0])
    _, gfd = shooting_loss(sim, b, hist, [0], gradient="fd")
    np.testing.assert_allclose(g, gfd, rtol=1e-3, atol=1e-9)
    runs = []
    for _ in range(2):
        bb, st = b.copy(), AdamState()
        for _ in range(3):
            bb, st = adam_baseline_update(bb, hist, [0], st, sim)
        runs.append(bb)
    assert runs[0].tobytes() == runs[1].tobytes()


# -- trace and config -----------------------------------------------------------------------

def test_empty_trace_is_header_only(tmp_path):
    path = export_trace([], tmp_path / "t.csv")
    assert path.read_text() == ",".join(TRACE_HEADER) + "\n"
    assert load_trace(path) == []


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown key"):
        config_from_dict({"estimator": {"kk": 3}})
    with pytest.raises(ValueError):
        config_from_dict({"scenario": "Zigzag"})
    with pytest.raises(ValueError):
        config_from_dict({"controller": {"kind": "magic"}})


def test_config_round_trip(tmp_path):
    cfg = tiny_config(events=[{"t": 2, "kind": "cut", "region": "Line"}], seed=9)
    back = load_config(dump_config(cfg, tmp_path / "c.yaml"))
    assert back.to_dict() == cfg.to_dict()


# -- the loop -------------------------------------------------------------------------------

def test_single_zero_action_step_keeps_entropy():
    cfg = tiny_config(horizon=1, schedule={"lift_fraction": 0.0, "lift_steps": 1})
    res = experiment.run_experiment(cfg)
    assert len(res.records) == 1
    assert res.records[0].u == tuple(build_grid_mesh(5, 5, 0.25).rest_positions[0])
    assert res.records[0].entropy == pytest.approx(25 * np.log(0.1), rel=1e-12)


def test_full_run_is_deterministic(tmp_path):
    cfg = tiny_config(controller={"kind": "lgd", "lg_iterations": 2}, schedule={"kind": "active", "pre_lift_steps": 2})
    experiment.run_experiment(cfg, tmp_path / "a")
    experiment.run_experiment(cfg, tmp_path / "b")
    for name in ("trace.csv", "belief_final.csv", "config_resolved.yaml", "mesh_0003.obj"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_trace_energy_uses_ground_truth():
    res = experiment.run_experiment(tiny_config(scenario="Large-attach"))
    anchors = res.mesh.rest_positions
    for rec in res.records:
        pos = res.snapshots[rec.t]
        assert rec.boundary_energy == pytest.approx(mean_boundary_energy(pos, anchors, res.truth_b), rel=1e-12)
    assert res.max_boundary_energy() > 0


def test_loop_order(monkeypatch):
    calls = []

    def spy(name, fn):
        def wrapped(*a, **kw):
            calls.append(name)
            return fn(*a, **kw)
        monkeypatch.setattr(experiment, name, wrapped)

    for name in ("make_cut_event", "ekf_predict", "ekf_update", "lg_step"):
        spy(name, getattr(experiment, name))
    cfg = tiny_config(controller={"kind": "lgd", "lg_iterations": 1},
                      schedule={"kind": "active", "pre_lift_steps": 2},
                      events=[{"t": 3, "kind": "cut", "region": [0, 1]}])
    res = experiment.run_experiment(cfg)
    assert [r.event for r in res.records] == ["", "", "", "cut", "", ""]
    steps, cur = [], None
    for c in calls:
        if c in ("make_cut_event", "ekf_predict") and (cur is None or "ekf_update" in cur):
            cur = []
            steps.append(cur)
        cur.append(c)
    assert len(steps) == 6
    assert steps[3][:3] == ["make_cut_event", "ekf_predict", "ekf_update"]
    for i, st in enumerate(steps):
        body = [c for c in st if c != "lg_step"]
        assert body == (["make_cut_event"] if i == 3 else []) + ["ekf_predict", "ekf_update"]
        # the action for the next step is chosen after this step's update; the first two are scripted
        assert st.count("lg_step") == (1 if 1 <= i <= 4 else 0)
        if "lg_step" in st:
            assert st.index("lg_step") > st.index("ekf_update")
    assert calls.count("lg_step") == 4


def test_failure_flushes_partial_outputs(tmp_path, monkeypatch):
    real = experiment.Simulator.step
    count = {"n": 0}

    def flaky(self, state, u, b):
        count["n"] += 1
        if count["n"] == 4:
            raise SolverDivergenceError("synthetic failure", iteration=7)
        return real(self, state, u, b)

    monkeypatch.setattr(experiment.Simulator, "step", flaky)
    res = experiment.run_experiment(tiny_config(), tmp_path)
    assert res.error and "synthetic failure" in res.error
    rows = load_trace(tmp_path / "trace.csv")
    assert len(rows) == 4 and rows[-1].event.startswith("error:")
    assert (tmp_path / "belief_final.csv").exists()


def test_pointcloud_mode_runs():
    res = experiment.run_experiment(tiny_config(mode="pointcloud", horizon=3, pointcloud={"count": 200}))
    assert len(res.records) == 3 and len(res.registration_rmse) == 3
    assert all(np.isfinite(r) for r in res.registration_rmse)


def test_first_violation():
    res = experiment.run_experiment(tiny_config(scenario="Large-attach"))
    t = experiment.first_violation(res, threshold=0.0)
    assert t == 0
    assert experiment.first_violation(res, threshold=np.inf) is None


# -- CLI --------------------------------------------------------------------------------------

def test_cli_lists_scenarios(capsys):
    assert main(["scenarios"]) == 0
    assert capsys.readouterr().out.split() == list(SCENARIO_NAMES)


def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg_path = dump_config(tiny_config(), tmp_path / "c.yaml")
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "out"), "--seed", "3"]) == 0
    assert "steps=6" in capsys.readouterr().out
    assert (tmp_path / "out" / "trace.csv").exists()
    assert load_config(tmp_path / "out" / "config_resolved.yaml").seed == 3


def test_cli_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario: Line\nnot_a_key: 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err
