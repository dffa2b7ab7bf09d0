"""Tetrahedral meshes, per-element materials and lumped masses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh input (degenerate or out-of-range elements)."""


def lame_parameters(youngs, poisson):
    """Convert Young's modulus and Poisson's ratio to the Lame pair (mu, lambda)."""
    youngs = np.asarray(youngs, dtype=float)
    poisson = np.asarray(poisson, dtype=float)
    mu = youngs / (2.0 * (1.0 + poisson))
    lam = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return mu, lam


def youngs_from_shear(mu, poisson):
    """Inverse of the mu part of :func:`lame_parameters`."""
    return 2.0 * np.asarray(mu, dtype=float) * (1.0 + np.asarray(poisson, dtype=float))


def _signed_volumes(x, tets):
    d = x[tets[:, 1:]] - x[tets[:, :1]]  # (T, 3 edges, 3 coords)
    return np.linalg.det(np.transpose(d, (0, 2, 1))) / 6.0


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Rest geometry and per-element material of a tetrahedral mesh.

    ``rest_positions`` is (N, 3) in meters and ``tets`` is (T, 4). Materials are
    stored per element as density (kg/m^3), Young's modulus (Pa) and Poisson's
    ratio; the shear stiffness ``mu`` used by the corotational energy is derived.
    Construct through :meth:`create`, which validates and canonicalizes.
    """

    rest_positions: np.ndarray
    tets: np.ndarray
    density: np.ndarray
    youngs: np.ndarray
    poisson: np.ndarray
    attachment_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @classmethod
    def create(
        cls,
        positions,
        tets,
        density=1000.0,
        youngs=1e5,
        poisson=0.3,
        attachment_set=(),
        *,
        stiffness=None,
    ) -> "TetMesh":
        """Validate input and enforce positive orientation of every tet.

        If ``stiffness`` (shear modulus mu) is given it overrides ``youngs``
        through the standard conversion with the given Poisson's ratio.
        """
        x = np.array(positions, dtype=float).reshape(-1, 3)
        t = np.array(tets, dtype=np.int64).reshape(-1, 4)
        n, n_tets = len(x), len(t)
        if not np.all(np.isfinite(x)):
            raise MeshError("non-finite vertex coordinates")
        for e, tet in enumerate(t):
            if tet.min() < 0 or tet.max() >= n:
                raise MeshError(f"tet {e}: vertex index out of range (mesh has {n} vertices)")
            if len(set(tet.tolist())) < 4:
                raise MeshError(f"tet {e}: repeated vertex index {tet.tolist()}")

        rho = np.broadcast_to(np.asarray(density, dtype=float), (n_tets,)).copy()
        nu = np.broadcast_to(np.asarray(poisson, dtype=float), (n_tets,)).copy()
        if stiffness is not None:
            mu = np.broadcast_to(np.asarray(stiffness, dtype=float), (n_tets,))
            E = youngs_from_shear(mu, nu)
        else:
            E = np.broadcast_to(np.asarray(youngs, dtype=float), (n_tets,)).copy()
        for name, arr in (("density", rho), ("youngs modulus", E)):
            bad = np.flatnonzero(~(arr > 0))
            if bad.size:
                raise MeshError(f"tet {bad[0]}: {name} must be positive, got {arr[bad[0]]}")
        bad = np.flatnonzero(~((nu > -1.0) & (nu < 0.5)))
        if bad.size:
            raise MeshError(f"tet {bad[0]}: Poisson's ratio must lie in (-1, 0.5)")

        if n_tets:
            vol = _signed_volumes(x, t)
            edge = np.linalg.norm(x[t[:, 1:]] - x[t[:, :1]], axis=2).max(axis=1)
            degenerate = np.abs(vol) <= 1e-12 * edge**3
            if degenerate.any():
                e = int(np.flatnonzero(degenerate)[0])
                raise MeshError(f"tet {e}: degenerate (zero volume)")
            flip = vol < 0
            t[flip, 1], t[flip, 2] = t[flip, 2].copy(), t[flip, 1].copy()

        att = np.unique(np.asarray(attachment_set, dtype=np.int64))
        if att.size and (att.min() < 0 or att.max() >= n):
            raise MeshError("attachment vertex index out of range")
        for arr in (x, t, rho, E, nu, att):
            arr.setflags(write=False)
        return cls(x, t, rho, E, nu, att)

    @property
    def n_vertices(self) -> int:
        return len(self.rest_positions)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def mu(self) -> np.ndarray:
        return lame_parameters(self.youngs, self.poisson)[0]

    @property
    def lam(self) -> np.ndarray:
        return lame_parameters(self.youngs, self.poisson)[1]

    def volumes(self) -> np.ndarray:
        return _signed_volumes(self.rest_positions, self.tets)

    def with_materials(self, youngs=None, poisson=None, density=None) -> "TetMesh":
        """Copy of the mesh with replaced per-element material values."""
        return TetMesh.create(
            self.rest_positions,
            self.tets,
            density=self.density if density is None else density,
            youngs=self.youngs if youngs is None else youngs,
            poisson=self.poisson if poisson is None else poisson,
            attachment_set=self.attachment_set,
        )

    def __eq__(self, other):
        if not isinstance(other, TetMesh):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("rest_positions", "tets", "density", "youngs", "poisson", "attachment_set")
        )

    __hash__ = None


@dataclass
class SimState:
    """Positions ``q`` and velocities ``v`` (flat, length 3N) at one frame.

    ``joints`` carries reduced skeleton coordinates (root transform and joint
    values) when the scene has a skeleton, otherwise it is ``None``.
    """

    q: np.ndarray
    v: np.ndarray
    frame_index: int = 0
    joints: "object | None" = None
    converged: bool = True

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.v = np.asarray(self.v, dtype=float).reshape(-1)
        if self.q.shape != self.v.shape or self.q.size % 3:
            raise ValueError(f"q and v must have equal length 3N, got {self.q.size} and {self.v.size}")

    @property
    def n_vertices(self) -> int:
        return self.q.size // 3

    @property
    def positions(self) -> np.ndarray:
        return self.q.reshape(-1, 3)

    @property
    def velocities(self) -> np.ndarray:
        return self.v.reshape(-1, 3)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v)))

    def copy(self) -> "SimState":
        joints = None if self.joints is None else self.joints.copy()
        return SimState(self.q.copy(), self.v.copy(), self.frame_index, joints, self.converged)

    @classmethod
    def at_rest(cls, mesh: TetMesh, velocity=(0.0, 0.0, 0.0)) -> "SimState":
        v = np.tile(np.asarray(velocity, dtype=float), (mesh.n_vertices, 1))
        return cls(mesh.rest_positions.copy(), v)


def displacement_matrix(mesh: TetMesh, tet: int, q) -> np.ndarray:
    """3x3 matrix with columns q1-q0, q2-q0, q3-q0 of element ``tet``."""
    if not 0 <= tet < mesh.n_tets:
        raise IndexError(f"tet index {tet} out of range")
    x = np.asarray(q, dtype=float).reshape(-1, 3)
    i = mesh.tets[tet]
    return (x[i[1:]] - x[i[0]]).T


def displacement_matrices(tets, q) -> np.ndarray:
    """Batched :func:`displacement_matrix` for an index array of shape (T, 4)."""
    x = np.asarray(q, dtype=float).reshape(-1, 3)
    return np.transpose(x[tets[:, 1:]] - x[tets[:, :1]], (0, 2, 1))


@dataclass(frozen=True)
class MassMatrix:
    """Lumped mass, one value per vertex; ``diagonal`` expands it per DoF."""

    vertex_mass: np.ndarray

    @property
    def diagonal(self) -> np.ndarray:
        return np.repeat(self.vertex_mass, 3)

    @property
    def total(self) -> float:
        return float(self.vertex_mass.sum())


def lumped_mass(mesh: TetMesh) -> MassMatrix:
    """Each tet contributes rho*V/4 to each of its four vertices."""
    share = mesh.density * mesh.volumes() / 4.0
    m = np.zeros(mesh.n_vertices)
    for k in range(4):
        np.add.at(m, mesh.tets[:, k], share)
    return MassMatrix(m)


def load_mesh(path) -> TetMesh:
    """Read a mesh file (format documented in :mod:`softsim.scene_io`)."""
    from .scene_io import read_mesh

    return read_mesh(path)


# --- simple generators used by fixtures and demos ---------------------------------

_KUHN = np.array(
    [
        [0, 1, 3, 7],
        [0, 1, 5, 7],
        [0, 2, 3, 7],
        [0, 2, 6, 7],
        [0, 4, 5, 7],
        [0, 4, 6, 7],
    ]
)


def box_mesh(shape=(1, 1, 1), size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), **material) -> TetMesh:
    """Regular grid of cubes, each split into the six Kuhn tets.

    Kuhn tets are non-obtuse, which keeps the assembled stiffness an M-matrix
    (all off-diagonals non-positive).
    """
    nx, ny, nz = shape
    gx, gy, gz = (np.linspace(o, o + s, n + 1) for o, s, n in zip(origin, size, shape))
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    pos = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corner = [vid(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) for c in range(8)]
                tets.extend([[corner[c] for c in t] for t in _KUHN])
    return TetMesh.create(pos, tets, **material)


def unit_tet(**material) -> TetMesh:
    return TetMesh.create(np.vstack([np.zeros(3), np.eye(3)]), [[0, 1, 2, 3]], **material)
