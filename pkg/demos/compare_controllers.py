"""Entropy and ground-truth boundary energy of LG-D, SL-D and the best motion primitive.

Usage: python demos/compare_controllers.py [--horizon 150] [--out demos/out/compare]
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from bsense.harness.config import config_from_dict
from bsense.harness.experiment import first_violation, run_experiment, run_pmp_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizon", type=int, default=150)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path(__file__).parent / "out" / "compare")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    base = config_from_dict({"scenario": "Line", "horizon": args.horizon, "seed": args.seed,
                             "snapshot_every": 0, "schedule": {"kind": "active"}})
    runs = {
        "lgd": run_experiment(replace(base, controller=replace(base.controller, kind="lgd")), args.out / "lgd"),
        "sld": run_experiment(replace(base, controller=replace(base.controller, kind="sld", sample_count=20,
                                                               sl_iterations=3)), args.out / "sld"),
    }
    best, pmp = run_pmp_comparison(base, args.out / "pmp")
    runs[f"pmp:{best}"] = pmp[best]

    thr = runs["lgd"].energy_max_scaled
    print(f"energy threshold (scaled): {thr:.3e}")
    print(f"{'controller':<14}{'final entropy':>15}{'max E_b':>12}{'first violation':>17}")
    for name, res in runs.items():
        viol = first_violation(res)
        print(f"{name:<14}{res.final.entropy:>15.2f}{res.max_boundary_energy():>12.2e}{str(viol):>17}")


if __name__ == "__main__":
    main()
