"""Dry frictional contact against static colliders, solved at velocity level.

After the PD position solve of a frame, the velocity satisfies
``(M + h^2 L) v = b`` with ``b = (M s + h^2 J p - (M + h^2 L) q_n) / h``.
Contact impulses ``xi`` are added to the right-hand side and found by a
Jacobi fixed-point iteration, either in the original form
``M v' = b - h^2 L v + xi`` or in the split form
``(M + h^2 D) v' = b - h^2 (L - D) v + xi`` where ``D = diag(L)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import TetMesh

log = logging.getLogger(__name__)

ORIGINAL = "original"
SPLIT = "split"
DEFAULT_FRICTION = 0.5
CONTACT_MARGIN = 1e-4


@dataclass(frozen=True)
class Plane:
    """Half-space ``{x : n . (x - point) >= 0}`` is free space."""

    point: np.ndarray
    normal: np.ndarray
    friction: float = DEFAULT_FRICTION

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        if not np.linalg.norm(n) > 0:
            raise ValueError("plane normal must be non-zero")
        norm = np.linalg.norm(n)
        # leave already-unit normals untouched so files round-trip exactly
        object.__setattr__(self, "normal", n if abs(norm - 1.0) <= 1e-15 else n / norm)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(3))
        if self.friction < 0:
            raise ValueError("friction coefficient must be non-negative")

    def distance(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, 3)
        return (X - self.point) @ self.normal, np.broadcast_to(self.normal, X.shape)


@dataclass(frozen=True)
class Sphere:
    """Solid static sphere; its outside is free space."""

    center: np.ndarray
    radius: float
    friction: float = DEFAULT_FRICTION

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        if self.friction < 0:
            raise ValueError("friction coefficient must be non-negative")

    def distance(self, X):
        d = np.asarray(X, dtype=float).reshape(-1, 3) - self.center
        r = np.linalg.norm(d, axis=1)
        n = np.where(r[:, None] > 0, d / np.where(r > 0, r, 1.0)[:, None], np.array([0.0, 0.0, 1.0]))
        return r - self.radius, n


@dataclass
class Contact:
    vertex: int
    normal: np.ndarray
    gap: float
    friction: float


@dataclass
class ContactSet:
    """Active contacts (at most one per vertex) and their impulses ``xi`` (K, 3)."""

    contacts: list = field(default_factory=list)
    xi: np.ndarray | None = None

    def __post_init__(self):
        if self.xi is None:
            self.xi = np.zeros((len(self.contacts), 3))

    def __len__(self):
        return len(self.contacts)

    @property
    def vertices(self) -> np.ndarray:
        return np.array([c.vertex for c in self.contacts], dtype=np.int64)

    @property
    def normals(self) -> np.ndarray:
        return np.array([c.normal for c in self.contacts]).reshape(-1, 3)

    @property
    def frictions(self) -> np.ndarray:
        return np.array([c.friction for c in self.contacts], dtype=float)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([c.gap for c in self.contacts], dtype=float)


def detect_contacts(X, colliders, margin=CONTACT_MARGIN, exclude=None) -> ContactSet:
    """Vertices within ``margin`` of (or inside) a collider; the deepest collider wins."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    best_gap = np.full(len(X), np.inf)
    best = {}
    for col in colliders:
        gap, normal = col.distance(X)
        hit = np.flatnonzero((gap <= margin) & (gap < best_gap))
        for i in hit:
            best_gap[i] = gap[i]
            best[int(i)] = Contact(int(i), np.array(normal[i]), float(gap[i]), float(col.friction))
    skip = set() if exclude is None else set(np.asarray(exclude).reshape(-1).tolist())
    return ContactSet([best[i] for i in sorted(best) if i not in skip])


def coulomb_force(r, normal, mu_f) -> np.ndarray:
    """Impulse that makes momentum ``r`` admissible for one contact.

    ``r`` is the vertex momentum the unconstrained update would produce. A
    separating ``r`` gets no impulse; otherwise the normal part is cancelled
    and the tangential part is cancelled inside the friction cone (stick) or
    opposed with magnitude ``mu_f * xi_n`` (slide). The vertex's diagonal
    mass scales ``r`` and ``xi`` alike, so it does not enter.
    """
    return coulomb_forces(np.asarray(r, dtype=float)[None], np.asarray(normal, dtype=float)[None],
                          np.atleast_1d(float(mu_f)))[0]


def coulomb_forces(R, N, mu) -> np.ndarray:
    """Vectorized :func:`coulomb_force` over K contacts."""
    R = np.asarray(R, dtype=float).reshape(-1, 3)
    N = np.asarray(N, dtype=float).reshape(-1, 3)
    rn = np.einsum("kc,kc->k", R, N)
    xin = np.maximum(0.0, -rn)
    rt = R - rn[:, None] * N
    rt_norm = np.linalg.norm(rt, axis=1)
    limit = mu * xin
    stick = rt_norm <= limit
    scale = np.where(stick, 1.0, limit / np.where(rt_norm > 0, rt_norm, 1.0))
    xit = -scale[:, None] * rt
    xi = xin[:, None] * N + xit
    xi[xin <= 0] = 0.0
    return xi


@dataclass
class SplitSystem:
    """Pieces of the split iteration: ``D = diag(L)``, ``lhs = m + h^2 D`` and ``L - D``."""

    D: np.ndarray
    lhs: np.ndarray
    offdiag: sp.csr_matrix
    h: float

    @classmethod
    def build(cls, sys) -> "SplitSystem":
        L = sys.L.tocsr()
        D = L.diagonal()
        return cls(D, sys.mass + sys.h**2 * D, (L - sp.diags(D)).tocsr(), sys.h)

    def rhs(self, b, v) -> np.ndarray:
        return b - self.h**2 * (self.offdiag @ v)


def contact_rhs(sys, s, q_n, ps) -> np.ndarray:
    """``b = (M s + h^2 J p - (M + h^2 L) q_n) / h``, per vertex (N, 3)."""
    h = sys.h
    m = sys.mass[:, None]
    q_n = np.asarray(q_n, dtype=float).reshape(-1, 3)
    return (m * np.asarray(s).reshape(-1, 3) + h**2 * sys.Jp(ps) - m * q_n - h**2 * (sys.L @ q_n)) / h


@dataclass
class ContactResult:
    v: np.ndarray
    contacts: ContactSet
    converged: bool
    diverged: bool
    iterations: int
    residuals: list


def solve_contact_velocities(
    sys,
    b,
    contacts: ContactSet,
    mode: str = SPLIT,
    cap: int = 10_000,
    v0=None,
    fixed=None,
    tol: float = 1e-8,
    divergence_factor: float = 1e6,
) -> ContactResult:
    """Jacobi fixed-point iteration for velocities and contact impulses.

    ``fixed`` lists vertices whose velocity is held at ``v0`` (skeleton-driven
    rigid vertices). Convergence: ``max|dv| < tol (1 + max|v|)``. Divergence
    (``max|v|`` above ``divergence_factor`` times its initial size) stops the
    iteration and is reported, not raised.
    """
    if mode not in (ORIGINAL, SPLIT):
        raise ValueError(f"unknown contact mode {mode!r}")
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    n = len(b)
    L = sys.L.tocsr()
    h2 = sys.h**2
    if mode == SPLIT:
        split = SplitSystem.build(sys)
        diag, off = split.lhs, split.offdiag
    else:
        diag, off = sys.mass, L
    v = b / (sys.mass + h2 * L.diagonal())[:, None] if v0 is None else np.array(v0, dtype=float).reshape(n, 3)
    free = np.ones(n, dtype=bool)
    if fixed is not None and len(fixed):
        free[np.asarray(fixed, dtype=np.int64)] = False
    v_fixed = v.copy()
    idx = contacts.vertices
    normals = contacts.normals
    mu = contacts.frictions
    xi = np.zeros((len(idx), 3))
    scale0 = max(np.abs(v).max(initial=0.0), np.abs(b / sys.mass[:, None]).max(initial=0.0), 1e-12)
    residuals = []
    converged = diverged = False
    it = 0
    for it in range(1, cap + 1):
        R = b - h2 * (off @ v)
        if len(idx):
            xi = coulomb_forces(R[idx], normals, mu)
            R[idx] += xi
        v_new = R / diag[:, None]
        v_new[~free] = v_fixed[~free]
        dv = np.abs(v_new - v).max(initial=0.0)
        v = v_new
        residuals.append(dv)
        vmax = np.abs(v).max(initial=0.0)
        if not np.isfinite(vmax) or vmax > divergence_factor * scale0:
            diverged = True
            break
        if dv < tol * (1.0 + vmax):
            converged = True
            break
    out = ContactSet(contacts.contacts, xi)
    return ContactResult(v, out, converged, diverged, it, residuals)


def coulomb_violations(v, contacts: ContactSet) -> dict:
    """Worst violation of each contact law at a solution (all should be ~0 or below)."""
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    if not len(contacts):
        return {"xi_n": 0.0, "penetration_velocity": 0.0, "cone": 0.0, "stick_slip": 0.0}
    N = contacts.normals
    vi = v[contacts.vertices]
    xi = contacts.xi
    xin = np.einsum("kc,kc->k", xi, N)
    xit = np.linalg.norm(xi - xin[:, None] * N, axis=1)
    vn = np.einsum("kc,kc->k", vi, N)
    vt = np.linalg.norm(vi - vn[:, None] * N, axis=1)
    mu = contacts.frictions
    interior = xit < mu * xin - 1e-6
    return {
        "xi_n": float(max(0.0, -xin.min())),
        "penetration_velocity": float(max(0.0, -vn.min())),
        "cone": float(max(0.0, (xit - mu * xin).max())),
        "stick_slip": float(vt[interior].max(initial=0.0)),
    }


# --- stability analysis --------------------------------------------------------------


@dataclass(frozen=True)
class StabilityBound:
    """Sufficient time-step bounds for the original Jacobi contact iteration.

    ``h_max`` uses the sum over all tets; ``h_single`` is the bound of the
    most restrictive tet considered on its own.
    """

    h_max: float
    h_single: float
    n_tets: int


def stability_bound(mesh: TetMesh) -> StabilityBound:
    """``h^2 < rho / (24 sqrt(3) sum_i mu_i sum_k |q_ik - q_i0|^2)`` at the rest pose."""
    x = mesh.rest_positions
    e = x[mesh.tets[:, 1:]] - x[mesh.tets[:, :1]]
    edge2 = np.einsum("tkc,tkc->t", e, e)
    rho = float(mesh.density.min())
    c = 24.0 * np.sqrt(3.0)
    per_tet = mesh.mu * edge2
    h_max = np.sqrt(rho / (c * per_tet.sum()))
    h_single = float(np.sqrt(np.min(mesh.density / (c * per_tet))))
    return StabilityBound(float(h_max), h_single, mesh.n_tets)


def stability_bound_from_params(n_tets, mu, edge_norm, density) -> float:
    """Bound for ``n_tets`` identical tets with three edges of length ``edge_norm``."""
    return float(np.sqrt(density / (24.0 * np.sqrt(3.0) * n_tets * mu * 3.0 * edge_norm**2)))


@dataclass(frozen=True)
class DominanceReport:
    """Row diagonal dominance of ``M + h^2 D`` over ``h^2 (L - D)``.

    ``all_h`` is True when ``D_ii >= sum_j |L_ij|`` on every row, which with
    positive masses gives strict dominance for every h. Otherwise
    ``h_limit`` is the largest h keeping strict dominance.
    """

    all_h: bool
    worst_row: int
    deficit: float
    h_limit: float


def split_dominance(sys) -> DominanceReport:
    L = sys.L.tocsr()
    D = L.diagonal()
    off = np.asarray(abs(L - sp.diags(D)).sum(axis=1)).reshape(-1)
    deficit = off - D
    worst = int(np.argmax(deficit)) if len(D) else -1
    bad = deficit > 1e-12 * np.maximum(np.abs(D), 1e-300)
    if not bad.any():
        return DominanceReport(True, worst, float(deficit[worst]) if len(D) else 0.0, float("inf"))
    h_limit = float(np.sqrt(np.min(sys.mass[bad] / deficit[bad])))
    return DominanceReport(False, worst, float(deficit[worst]), h_limit)


def jacobi_spectral_radius(sys, mode: str = ORIGINAL) -> float:
    """Spectral radius of the contact-free iteration matrix (dense; small systems only)."""
    L = sys.L.toarray()
    h2 = sys.h**2
    if mode == ORIGINAL:
        Mi = h2 * L / sys.mass[:, None]
    else:
        D = np.diag(L)
        Mi = h2 * (L - np.diag(D)) / (sys.mass + h2 * D)[:, None]
    return float(np.abs(np.linalg.eigvals(Mi)).max(initial=0.0))


def row_sum_bound(sys) -> float:
    """Largest h with ``m_i > h^2 sum_j |L_ij|`` on every row.

    This is the row-dominance premise the tet-based bound starts from, applied
    to the assembled matrices; unlike the edge-length form it is sufficient
    for the contact-free original iteration at any mesh scale.
    """
    L = sys.L.tocsr()
    rows = np.asarray(abs(L).sum(axis=1)).reshape(-1)
    pos = rows > 0
    if not pos.any():
        return float("inf")
    return float(np.sqrt(np.min(sys.mass[pos] / rows[pos])))
