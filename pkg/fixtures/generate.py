"""Regenerate the bundled scene files from :mod:`softsim.fixtures`.

Run from anywhere: ``python3 fixtures/generate.py``. Targets that come from a
ground-truth run (sys-id, gripper) are computed here and frozen into the files.
"""

import os

import numpy as np

from softsim import fixtures as fx
from softsim.contact import Plane
from softsim.diff import LossSpec, precise_scene
from softsim.mesh import unit_tet
from softsim.scene_io import write_scene
from softsim.sim import Scene, Simulator, barycenter

HERE = os.path.dirname(os.path.abspath(__file__))


def save(scene, name):
    write_scene(scene, os.path.join(HERE, name))
    print("wrote", name)


def main():
    minimal = Scene(unit_tet(density=1000.0, youngs=1e5), h=0.01, frames=10,
                    colliders=[Plane([0, 0, -0.01], [0, 0, 1], 0.5)], name="minimal")
    save(minimal, "minimal.scene")

    bound = Scene(fx.bound_mesh(), frames=1, name="bound")
    save(bound, "bound.scene")

    save(fx.cube_on_ground(), "cube_on_ground.scene")

    ff = fx.free_fall()
    ff.loss = LossSpec("barycenter", [0.0, 0.0, 0.0])
    save(ff, "free_fall.scene")

    truth = fx.two_tet_bar()
    final = Simulator(precise_scene(truth)).run().final
    tip = fx.bar_tip()
    bar = fx.two_tet_bar(youngs=(1e4, 1e4))
    bar.loss = LossSpec("vertices", final.positions[tip].reshape(-1), vertices=tip)
    bar.optimization = {"episodes": 10, "lr": 0.5, "baseline_budget": 200, "seed": 0}
    save(bar, "bar_sysid.scene")

    pend = fx.pendulum()
    pend.loss = LossSpec("joints", [0.0], links=[1])
    pend.optimization = {"episodes": 100, "tol": 1e-3}
    save(pend, "pendulum.scene")

    grip = fx.gripper()
    sim = Simulator(grip)
    c = barycenter(sim.mass, sim.run().final.positions)
    grip.loss = LossSpec("barycenter", c + np.array([0.0, 0.0, -0.05]))
    grip.optimization = {"episodes": 30, "tol": 0.005}
    save(grip, "gripper.scene")

    save(fx.arm_with_flesh(), "arm.scene")


if __name__ == "__main__":
    main()
