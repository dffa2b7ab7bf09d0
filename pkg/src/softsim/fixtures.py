"""Small reference scenes used by the tests, the demos and the bundled scene files."""

from __future__ import annotations

import numpy as np

from .contact import Plane
from .mesh import TetMesh, box_mesh
from .sim import Scene
from .skeleton import FREE, ROTATIONAL, Joint, KinematicTree, Link


def bound_mesh(n_tets=1000, edge=1e-2, shear=3e5, density=1.0) -> TetMesh:
    """Disjoint right-corner tets with three orthogonal edges of length ``edge``."""
    corner = np.vstack([np.zeros(3), edge * np.eye(3)])
    side = int(np.ceil(n_tets ** (1.0 / 3.0)))
    pos, tets = [], []
    for k in range(n_tets):
        i, j, l = k % side, (k // side) % side, k // side**2
        pos.append(corner + 2.0 * edge * np.array([i, j, l]))
        tets.append(4 * k + np.arange(4))
    return TetMesh.create(np.vstack(pos), tets, density=density, stiffness=shear, poisson=0.3)


def cube_on_ground(size=0.5, shear=3e5, density=1000.0, h=0.01, velocity=(0.3, 0.0, -0.5), friction=0.5) -> Scene:
    """One Kuhn-split cube resting on the plane z = 0, moving down and sideways."""
    mesh = box_mesh((1, 1, 1), (size,) * 3, density=density, stiffness=shear, poisson=0.3)
    return Scene(mesh, h=h, frames=20, colliders=[Plane([0, 0, 0], [0, 0, 1], friction)],
                 initial_velocity=np.array(velocity, dtype=float), name="cube_on_ground")


def free_fall(h=0.01, frames=100, velocity=(0.2, -0.1, 0.5), youngs=5e4) -> Scene:
    """Unconstrained soft block thrown upward; no colliders."""
    mesh = box_mesh((2, 1, 1), (0.2, 0.1, 0.1), origin=(0, 0, 1.0), density=1000.0, youngs=youngs, poisson=0.3)
    return Scene(mesh, h=h, frames=frames, initial_velocity=np.array(velocity, dtype=float), name="free_fall")


def two_tet_bar(youngs=(2e4, 5e4), h=0.01, frames=15, poisson=0.3) -> Scene:
    """Two tets sharing a face; vertices 0-2 pinned, the tip (3, 4) hangs under gravity."""
    pos = np.array([
        [0.0, 0.0, 0.0],
        [0.0, 0.06, 0.0],
        [0.0, 0.0, 0.06],
        [0.12, 0.02, 0.01],
        [0.13, 0.05, 0.05],
    ])
    tets = [[0, 1, 2, 3], [1, 2, 3, 4]]
    mesh = TetMesh.create(pos, tets, density=1000.0, youngs=np.asarray(youngs, dtype=float), poisson=poisson)
    pins = np.array([0, 1, 2])
    return Scene(mesh, h=h, frames=frames, attachment_vertices=pins, attachment_targets=pos[pins],
                 attachment_weights=1e4, name="two_tet_bar")


def bar_tip() -> np.ndarray:
    return np.array([3, 4])


def pendulum(length=0.5, angle=0.3, h=0.01, frames=20) -> Scene:
    """A rigid bob on a hinge about the y axis at the origin, root pinned to the world.

    The bob is one Kuhn-split cube centered ``length`` below the hinge.
    ``angle`` is the initial hinge angle (rad).
    """
    s = 0.05
    mesh = box_mesh((1, 1, 1), (s, s, s), origin=(-s / 2, -s / 2, -length - s / 2), density=1000.0, youngs=1e5)
    links = [
        Link("base", -1, Joint(FREE, fixed=True), np.zeros(0, dtype=np.int64)),
        Link("arm", 0, Joint(ROTATIONAL, axis=[0, 1, 0], anchor=[0, 0, 0], value=angle), np.arange(mesh.n_vertices)),
    ]
    tree = KinematicTree.create(links, mesh.rest_positions)
    return Scene(mesh, h=h, frames=frames, skeleton=tree, torque_links=[1], name="pendulum")


def arm_with_flesh(h=0.01, frames=10) -> Scene:
    """Two-link arm whose links hold the ends of a soft block (mixed rigid/deformable)."""
    mesh = box_mesh((3, 1, 1), (0.3, 0.1, 0.1), origin=(0, -0.05, -0.05), density=1000.0, youngs=2e4)
    x = mesh.rest_positions[:, 0]
    root_v = np.flatnonzero(x < 1e-9)
    tip_v = np.flatnonzero(x > 0.3 - 1e-9)
    links = [
        Link("root", -1, Joint(FREE, fixed=True), root_v),
        Link("elbow", 0, Joint(ROTATIONAL, axis=[0, 1, 0], anchor=[0.15, 0, 0], value=0.1), np.zeros(0, dtype=np.int64)),
        Link("hand", 1, Joint(ROTATIONAL, axis=[0, 0, 1], anchor=[0.3, 0, 0], value=-0.05), tip_v),
    ]
    tree = KinematicTree.create(links, mesh.rest_positions)
    return Scene(mesh, h=h, frames=frames, skeleton=tree, torque_links=[1, 2], name="arm_with_flesh")


def gripper(h=0.01, frames=20) -> Scene:
    """Cantilever of four cubes along x stacked on a passive layer.

    Each upper cube is one pneumatic cell: its six tets share one activation.
    Inflating the cells bends the free end down. Vertices at x = 0 are pinned.
    """
    c = 0.05
    mesh = box_mesh((4, 1, 2), (4 * c, c, 2 * c), density=1000.0, youngs=3e4, poisson=0.3)
    cent = mesh.rest_positions[mesh.tets].mean(axis=1)
    upper = np.flatnonzero(cent[:, 2] > c)
    cells = np.floor(cent[upper, 0] / c).astype(np.int64)
    pins = np.flatnonzero(mesh.rest_positions[:, 0] < 1e-9)
    return Scene(mesh, h=h, frames=frames, attachment_vertices=pins, attachment_targets=mesh.rest_positions[pins],
                 attachment_weights=1e4, pneumatic_tets=upper, pneumatic_stiffness=3e4, pneumatic_groups=cells,
                 gravity=[0, 0, 0], name="gripper")


def muscle_strip(h=0.01, frames=10) -> Scene:
    """Block with a muscle fiber along x in every tet, pinned at x = 0."""
    mesh = box_mesh((2, 1, 1), (0.2, 0.1, 0.1), density=1000.0, youngs=2e4)
    pins = np.flatnonzero(mesh.rest_positions[:, 0] < 1e-9)
    return Scene(mesh, h=h, frames=frames, attachment_vertices=pins, attachment_targets=mesh.rest_positions[pins],
                 attachment_weights=1e4, muscle_tets=np.arange(mesh.n_tets),
                 muscle_fibers=np.tile([1.0, 0.0, 0.0], (mesh.n_tets, 1)), muscle_stiffness=2e4,
                 gravity=[0, 0, 0], name="muscle_strip")
