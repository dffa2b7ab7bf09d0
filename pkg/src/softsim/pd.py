"""Projective Dynamics time stepping: prediction, global solve, local/global loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .energy import TermBlock
from .mesh import SimState

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """The global system is not positive definite (e.g. a massless free vertex)."""


@dataclass
class SolverConfig:
    """Local/global iteration controls.

    Convergence is declared when ``max|q_new - q| / (max|q| + 1) < tol``.
    """

    h: float = 0.01
    max_local_global_iters: int = 50
    convergence_tol: float = 1e-6

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("time step h must be positive")
        if not self.convergence_tol > 0:
            raise ValueError("convergence tolerance must be positive")
        if self.max_local_global_iters < 1:
            raise ValueError("need at least one local/global iteration")


@dataclass
class GlobalSystem:
    """Prefactorized ``M/h^2 + L`` together with the terms that built it.

    ``L`` is assembled in vertex-index space (N x N); the same matrix acts on
    the x, y and z columns of the (N, 3) position array.  Build with
    :meth:`build`; any change of weights, masses or h requires a new system.
    """

    mass: np.ndarray
    blocks: list[TermBlock]
    h: float
    f_ext: np.ndarray
    L: sp.csc_matrix
    system_matrix: sp.csc_matrix
    _lu: object = field(repr=False, default=None)

    @classmethod
    def build(cls, mass, blocks, h, f_ext=None) -> "GlobalSystem":
        mass = np.asarray(mass, dtype=float)
        n = len(mass)
        if not h > 0:
            raise ValueError("time step h must be positive")
        f_ext = np.zeros((n, 3)) if f_ext is None else np.asarray(f_ext, dtype=float).reshape(n, 3)
        L = assemble_laplacian(blocks, n)
        A = (sp.diags(mass / h**2) + L).tocsc()
        if np.any(mass <= 0):
            bad = np.flatnonzero(mass <= 0)
            raise ConfigurationError(f"vertices without positive mass: {bad[:10].tolist()}")
        try:
            lu = spla.splu(A)
        except RuntimeError as exc:
            raise ConfigurationError(f"system matrix is singular: {exc}") from None
        return cls(mass, list(blocks), float(h), f_ext, L, A, lu)

    @property
    def n_vertices(self) -> int:
        return len(self.mass)

    def solve(self, rhs) -> np.ndarray:
        """Solve ``(M/h^2 + L) X = rhs`` column-wise, with one refinement step."""
        rhs = np.asarray(rhs, dtype=float)
        X = self._lu.solve(rhs)
        r = rhs - self.system_matrix @ X
        if np.abs(r).max(initial=0.0) > 1e-12 * max(np.abs(rhs).max(initial=0.0), 1e-300):
            X = X + self._lu.solve(r)
        return X

    @cached_property
    def system_matrix3(self) -> sp.csc_matrix:
        """``M/h^2 + L`` acting on flat (3N,) vectors laid out as x0 y0 z0 x1 ..."""
        return sp.kron(self.system_matrix, sp.identity(3), format="csc")

    def Jp(self, ps) -> np.ndarray:
        out = np.zeros((self.n_vertices, 3))
        for block, p in zip(self.blocks, ps):
            out += block.Jp(self.n_vertices, p)
        return out

    def rhs(self, s, ps) -> np.ndarray:
        return (self.mass / self.h**2)[:, None] * s + self.Jp(ps)


def assemble_laplacian(blocks, n_vertices: int) -> sp.csc_matrix:
    """L = sum_i w_i G_i^T G_i in vertex index space."""
    rows, cols, vals = [np.zeros(0, dtype=np.int64)] * 2 + [np.zeros(0)]
    parts = [b.laplacian_triplets() for b in blocks if len(b)]
    if parts:
        rows = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
        vals = np.concatenate([p[2] for p in parts])
    return sp.csc_matrix((vals, (rows, cols)), shape=(n_vertices, n_vertices))


def predict(state: SimState, sys: GlobalSystem) -> np.ndarray:
    """Inertial target ``s_n = q_n + h v_n + h^2 M^-1 f_ext`` as an (N, 3) array."""
    h = sys.h
    return state.positions + h * state.velocities + h**2 * sys.f_ext / sys.mass[:, None]


def local_step(blocks, X) -> list:
    return [b.project(X) for b in blocks]


def global_solve(sys: GlobalSystem, s, ps) -> np.ndarray:
    """Minimizer of the quadratic PD objective for fixed projections ``ps``."""
    return sys.solve(sys.rhs(np.asarray(s, dtype=float).reshape(-1, 3), ps))


def elastic_energy(blocks, X, ps=None) -> float:
    """Sum of term energies; with ``ps=None`` each term is projected first."""
    ps = local_step(blocks, X) if ps is None else ps
    return float(sum(b.energies(X, p).sum() for b, p in zip(blocks, ps)))


def objective(sys: GlobalSystem, s, X, ps) -> float:
    """Quadratic-form value of the PD objective, including the constant terms.

    ``1/2 q^T (M/h^2 + L) q - q^T (M/h^2 s + J p) + 1/2 s^T M s / h^2 + sum w/2 |p|^2``
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    s = np.asarray(s, dtype=float).reshape(-1, 3)
    quad = 0.5 * np.sum(X * (sys.system_matrix @ X))
    lin = np.sum(X * sys.rhs(s, ps))
    const = 0.5 * np.sum(sys.mass[:, None] * s * s) / sys.h**2
    const += sum(0.5 * np.sum(b.weight[:, None, None] * p * p) for b, p in zip(sys.blocks, ps))
    return float(quad - lin + const)


def incremental_potential(sys: GlobalSystem, s, X) -> float:
    """``1/(2h^2) |q - s|_M^2 + E(q)`` with freshly projected terms."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    d = X - np.asarray(s, dtype=float).reshape(-1, 3)
    return 0.5 * float(np.sum(sys.mass[:, None] * d * d)) / sys.h**2 + elastic_energy(sys.blocks, X)


def relative_change(X_new, X) -> float:
    return float(np.abs(X_new - X).max(initial=0.0) / (np.abs(X).max(initial=0.0) + 1.0))


@dataclass
class SolveInfo:
    iterations: int
    converged: bool
    projections: list
    history: list = field(default_factory=list)


def solve_positions(sys: GlobalSystem, s, cfg: SolverConfig, X0=None, record=False):
    """Alternate local and global steps from ``X0`` (default ``s``) until converged.

    Returns ``(X, SolveInfo)``; ``SolveInfo.projections`` are the projections of
    the last local step, i.e. those the returned positions were solved with.
    """
    X = np.array(s if X0 is None else X0, dtype=float).reshape(-1, 3)
    history = []
    converged = False
    ps = None
    it = 0
    for it in range(1, cfg.max_local_global_iters + 1):
        ps = local_step(sys.blocks, X)
        if record:
            history.append(objective(sys, s, X, ps))
        X_new = global_solve(sys, s, ps)
        change = relative_change(X_new, X)
        X = X_new
        if change < cfg.convergence_tol:
            converged = True
            break
    if record:
        history.append(incremental_potential(sys, s, X))
    if not converged:
        log.info("local/global loop hit the cap of %d iterations", cfg.max_local_global_iters)
    return X, SolveInfo(it, converged, ps, history)


def step(state: SimState, sys: GlobalSystem, cfg: SolverConfig) -> SimState:
    """One implicit-Euler frame of plain Projective Dynamics (no skeleton, no contact)."""
    s = predict(state, sys)
    X, info = solve_positions(sys, s, cfg)
    v = (X - state.positions) / sys.h
    return SimState(X.reshape(-1), v.reshape(-1), state.frame_index + 1, None, info.converged)
