"""Print a run's final belief mean as a grid next to the hidden attachment layout.

Usage: python demos/plot_belief.py demos/out/corner_lifts_line
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from bsense.estimator import load_belief_csv
from bsense.harness.config import load_config
from bsense.harness.experiment import build_mesh, initial_truth


def main(run_dir: str):
    run = Path(run_dir)
    cfg = load_config(run / "config_resolved.yaml")
    mesh = build_mesh(cfg)
    mean, var = load_belief_csv(run / "belief_final.csv")
    truth = initial_truth(cfg, mesh) > 0
    rows, cols = cfg.mesh.rows, cfg.mesh.cols
    thr = cfg.metrics.b_thresh
    print(f"belief mean (x = above {thr}), top row printed first; right: hidden attachments")
    for r in range(rows - 1, -1, -1):
        sl = slice(r * cols, (r + 1) * cols)
        est = " ".join("x" if m > thr else "." for m in mean[sl])
        tru = " ".join("#" if t else "." for t in truth[sl])
        print(f"{est}    {tru}")
    print(f"mean variance {np.mean(var):.3g}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).parent / "out" / "corner_lifts_line"))
