"""Differentiable soft-body simulation with projective dynamics, embedded
skeletons and frictional contact."""

from .contact import Plane, Sphere, stability_bound
from .diff import LossSpec, ParamSet, finite_difference_gradient, gradient
from .mesh import SimState, TetMesh, box_mesh
from .optim import OptimConfig, run_control, run_gradient_free_baseline, run_sysid
from .scene_io import export_trajectory, parse_scene, serialize_scene
from .sim import Scene, Simulator, Trajectory
from .skeleton import Joint, KinematicTree, Link

__version__ = "0.1.0"

__all__ = [
    "Joint", "KinematicTree", "Link", "LossSpec", "OptimConfig", "ParamSet", "Plane", "Scene", "SimState",
    "Simulator", "Sphere", "TetMesh", "Trajectory", "box_mesh", "export_trajectory", "finite_difference_gradient",
    "gradient", "parse_scene", "run_control", "run_gradient_free_baseline", "run_sysid", "serialize_scene",
    "stability_bound",
]
