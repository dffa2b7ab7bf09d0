"""Randomized contact scenes shared by the contact and acceptance tests."""

import numpy as np

from softsim.contact import Plane, coulomb_violations
from softsim.mesh import box_mesh
from softsim.sim import Scene, Simulator


def random_drop_scene(rng, frames=8):
    """A small soft block dropped or slid onto a (possibly tilted) plane."""
    size = rng.uniform(0.05, 0.2)
    shape = (int(rng.integers(1, 3)), 1, 1)
    tilt = rng.uniform(-0.3, 0.3, size=2)
    normal = np.array([tilt[0], tilt[1], 1.0])
    normal /= np.linalg.norm(normal)
    mesh = box_mesh(shape, (size * shape[0], size, size), origin=(-size, -size / 2, rng.uniform(-0.002, 0.02)),
                    density=1000.0, youngs=rng.uniform(1e4, 1e5), poisson=0.3)
    v = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-2, 0)])
    return Scene(mesh, h=0.005, frames=frames, colliders=[Plane([0, 0, 0], normal, rng.uniform(0.1, 1.0))],
                 initial_velocity=v, contact_mode="split", contact_cap=2000)


def worst_violations(scene):
    """Largest Coulomb-law violations over every converged contact solve of a run."""
    worst = {"xi_n": 0.0, "penetration_velocity": 0.0, "cone": 0.0, "stick_slip": 0.0}
    counts = {"solves": 0, "contacts": 0}

    def cb(n, state, new, rec):
        if rec.contact is not None and rec.contact.converged:
            counts["solves"] += 1
            counts["contacts"] += len(rec.contact.contacts)
            for k, val in coulomb_violations(rec.contact.v, rec.contact.contacts).items():
                worst[k] = max(worst[k], val)

    Simulator(scene).run(callback=cb)
    return worst, counts
