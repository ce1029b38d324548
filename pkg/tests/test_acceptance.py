"""End-to-end acceptance checks, one test per criterion.

Every test records a single PASS/FAIL line (shown in the pytest terminal
summary) with the measured value next to its tolerance, then asserts.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from bsense.estimator import BoundaryBelief, NoiseConfig, log_entropy_product_form, logdet_psd
from bsense.harness.cli import main
from bsense.harness.config import config_from_dict
from bsense.harness.experiment import first_violation, run_experiment, run_pmp_comparison
from bsense.harness.metrics import pcd_pug
from bsense.harness.scenarios import lift_targets, make_scenario
from bsense.harness.verify import check_entropy_product_form, check_linear_jacobian, check_uwd_bound
from bsense.jacobian import observation_jacobian
from bsense.mesh import build_grid_mesh
from bsense.objectives import uwd_value
from bsense.simulator import Simulator, SolverConfig

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance


def report(number: int, name: str, ok: bool, detail: str, seconds: float):
    line = f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {name}: {detail} ({seconds:.0f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def merged(base: dict, over: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for k, v in over.items():
        if isinstance(v, dict):
            out.setdefault(k, {}).update(v)
        else:
            out[k] = v
    return out


def test_01_linear_jacobian_consistency():
    t0 = time.perf_counter()
    ok, detail = check_linear_jacobian(np.random.default_rng(2024), trials=100)
    dt = time.perf_counter() - t0
    assert report(1, "analytical jacobian vs finite differences (100 instances, rel <= 1e-5, < 30 s)",
                  ok and dt < 30, detail, dt)


def test_02_entropy_product_form():
    t0 = time.perf_counter()
    ok, detail = check_entropy_product_form(np.random.default_rng(2024), trials=200)
    dt = time.perf_counter() - t0
    assert report(2, "entropy product form vs update determinant (200 triples, rel <= 1e-8, < 10 s)",
                  ok and dt < 10, detail, dt)


def test_03_uwd_lower_bound():
    t0 = time.perf_counter()
    ok, detail = check_uwd_bound(np.random.default_rng(2024), trials=100)
    dt = time.perf_counter() - t0
    assert report(3, "displacement score lower bound (100 instances, slack >= -1e-9, < 30 s)",
                  ok and dt < 30, detail, dt)


def test_04_uwd_tracks_entropy_reduction():
    t0 = time.perf_counter()
    mesh = build_grid_mesh(6, 6, 1 / 5)
    sim = Simulator(mesh, SolverConfig.for_mesh(mesh, gravity=[0, 0, -0.01], ground_plane_z=0.0))
    truth = make_scenario("Line", mesh).ground_truth_b
    state = sim.grasp(sim.rest_state(), mesh.rest_positions[0])
    for u in lift_targets(mesh.rest_positions[0], 0.1, 5):
        state = sim.step(state, u, truth)
    rng = np.random.default_rng(0)
    A = rng.normal(size=(36, 36))
    cov = 0.02 * (A @ A.T) / 36 + 0.01 * np.eye(36)
    belief = BoundaryBelief(np.full(36, 1e-4), cov)
    alpha = NoiseConfig().obs_variance
    score, gain = [], []
    for _ in range(200):
        cand = u + rng.uniform(-0.1, 0.1, 3)
        x, J = observation_jacobian(sim, state, cand, belief.mean)
        score.append(uwd_value(x - sim.anchors, cov))
        gain.append(logdet_psd(cov) - log_entropy_product_form(cov, J, alpha))
    rho = spearmanr(score, gain).statistic
    dt = time.perf_counter() - t0
    assert report(4, "spearman(displacement score, entropy reduction) on 6x6, 200 actions (> 0.3)",
                  rho > 0.3, f"rho = {rho:.3f}", dt)


@pytest.mark.parametrize("scenario,pug_min", [("Line", 40.0), ("Arc", 70.0)])
def test_05_estimation_accuracy(scenario, pug_min):
    t0 = time.perf_counter()
    cfg = config_from_dict({"scenario": scenario, "baseline": {"adam": True}, "snapshot_every": 0})
    res = run_experiment(cfg)
    dt = time.perf_counter() - t0
    m = cfg.metrics
    pcd, pug = res.final.pcd, res.final.pug
    adam_pcd, adam_pug = pcd_pug(res.adam_b, res.truth_b > 0, m.b_thresh, m.dilation, res.mesh)
    ok = (res.error is None and pcd is not None and pcd >= 90 and pug >= pug_min
          and pcd >= (adam_pcd if adam_pcd is not None else 0.0) and dt < 300)
    detail = (f"EKF PCD {pcd} (>= 90) PUG {pug:.1f} (>= {pug_min:.0f}); Adam PCD {adam_pcd} PUG {adam_pug:.1f} "
              f"(EKF PCD >= Adam PCD)")
    assert report(5, f"corner-lift estimation, {scenario} (< 5 min)", ok, detail, dt)


ACTIVE = {"scenario": "Line", "horizon": 150, "snapshot_every": 0, "schedule": {"kind": "active"}}


def test_06_active_sensing_ordering():
    t0 = time.perf_counter()
    sld = run_experiment(config_from_dict(merged(ACTIVE, {"controller": {"kind": "sld", "sample_count": 20,
                                                                             "sl_iterations": 3}})))
    lgd = run_experiment(config_from_dict(merged(ACTIVE, {"controller": {"kind": "lgd"}})))
    best, pmp_runs = run_pmp_comparison(config_from_dict(ACTIVE))
    dt = time.perf_counter() - t0
    h0 = float(np.log(0.1) * 100)
    thr = sld.energy_max_scaled
    h_sld, h_lgd = sld.final.entropy, lgd.final.entropy
    e_sld, e_lgd = sld.max_boundary_energy(), lgd.max_boundary_energy()
    viol = first_violation(pmp_runs[best])
    ok = (sld.error is None and lgd.error is None and len(sld.records) == 150 and len(lgd.records) == 150
          and h_sld <= h_lgd <= h0 and e_sld < thr and e_lgd < thr and viol is not None and viol < 150
          and dt < 900)
    detail = (f"H: SL-D {h_sld:.1f} <= LG-D {h_lgd:.1f} <= initial {h0:.1f}; max E_b SL-D {e_sld:.2e}, "
              f"LG-D {e_lgd:.2e} < {thr:.2e}; best PMP '{best}' violates at t={viol} (< 150)")
    assert report(6, "active-sensing ordering and safety (< 15 min)", ok, detail, dt)


def test_07_cutting_loop():
    t0 = time.perf_counter()
    res = run_experiment(config_from_dict({"scenario": "Large-attach", "snapshot_every": 0,
                                           "schedule": {"kind": "cut_loop"}}))
    dt = time.perf_counter() - t0
    ok = res.error is None and res.detached is True and res.cycles <= 10 and dt < 900
    detail = f"detached={res.detached} after {res.cycles} cycles (<= 10), truth b* all zero: {not res.truth_b.any()}"
    assert report(7, "iterative sense-and-cut on Large-attach (< 15 min)", ok, detail, dt)


def test_08_suture_re_estimation():
    t0 = time.perf_counter()
    cfg = config_from_dict({"scenario": "Line", "snapshot_every": 0, "controller": {"kind": "lgd"},
                            "schedule": {"kind": "suture"}, "estimator": {"noise": {"suture_stiffness": 0.03}}})
    res = run_experiment(cfg)
    dt = time.perf_counter() - t0
    (_, _, _, pug_before), = res.post_event
    pcd, pug_after = res.final.pcd, res.final.pug
    gain = pug_after - pug_before
    ok = res.error is None and gain >= 30 and pcd == 100.0
    detail = f"PUG {pug_before:.1f} -> {pug_after:.1f} (+{gain:.1f} >= 30), PCD {pcd} (= 100)"
    assert report(8, "suture then one active-sensing phase", ok, detail, dt)


def test_09_point_cloud_joint_estimation():
    t0 = time.perf_counter()
    cfg = config_from_dict({"scenario": "Line", "mode": "pointcloud", "snapshot_every": 0})
    res = run_experiment(cfg)
    dt = time.perf_counter() - t0
    sigma = cfg.pointcloud.noise_fraction * res.mesh.width
    rmse = res.registration_rmse[-1] if res.registration_rmse else np.inf
    pcd = res.final.pcd
    ok = res.error is None and pcd is not None and pcd >= 80 and rmse <= 2 * sigma and dt < 600
    detail = f"PCD {pcd} (>= 80), PUG {res.final.pug}; registered RMSE {rmse:.4f} (<= 2 sigma = {2 * sigma:.4f})"
    assert report(9, "point-cloud joint estimation after four lifts (< 10 min)", ok, detail, dt)


def test_10_verify_command(capsys):
    t0 = time.perf_counter()
    code = main(["verify", "--seed", "0"])
    dt = time.perf_counter() - t0
    out = capsys.readouterr().out
    failed = [ln for ln in out.splitlines() if ln.startswith("FAIL")]
    ok = code == 0 and not failed and dt < 300
    detail = f"exit {code}, {out.count('PASS')} checks passed, {len(failed)} failed"
    assert report(10, "bsense verify invariant suite (< 5 min)", ok, detail, dt)
