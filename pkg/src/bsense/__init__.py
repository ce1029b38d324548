"""Boundary stiffness estimation for simulated thin sheets, with active sensing."""

from bsense.estimator import BoundaryBelief, NoiseConfig, ekf_predict, ekf_update
from bsense.mesh import Mesh, build_grid_mesh
from bsense.simulator import SimState, Simulator, SolverConfig

__version__ = "0.1.0"

__all__ = ["BoundaryBelief", "Mesh", "NoiseConfig", "SimState", "Simulator", "SolverConfig", "build_grid_mesh",
           "ekf_predict", "ekf_update"]
