"""Projective energy terms: weights, linear maps G, and local-step projections.

Every term has the form ``w/2 * ||G X_sel - p||^2`` where ``X_sel`` holds the
positions (rows) of the selected vertices and ``G`` acts on the vertex index
only, so the same scalar operator is applied to the x, y and z coordinates.
For tet-based terms ``G X_sel`` equals the transposed deformation gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import TetMesh, displacement_matrix

log = logging.getLogger(__name__)

COROTATIONAL = "corotational"
MUSCLE = "muscle"
PNEUMATIC = "pneumatic"
ATTACHMENT = "attachment"
KINDS = (COROTATIONAL, MUSCLE, PNEUMATIC, ATTACHMENT)

_FIBER_EPS = 1e-12
# permutation of a row-major flattened 3x3 matrix into its transpose
_T9 = np.array([0, 3, 6, 1, 4, 7, 2, 5, 8])


class PneumaticInfeasible(ValueError):
    """No positive singular values satisfy the pneumatic volume constraint."""


# --- geometry -----------------------------------------------------------------------


def shape_operator(mesh: TetMesh, tet: int) -> np.ndarray:
    """The 3x4 spatial differential operator ``[-P^-T s, P^-T]`` of one tet."""
    Pinv_T = np.linalg.inv(displacement_matrix(mesh, tet, mesh.rest_positions)).T
    return np.hstack([-Pinv_T.sum(axis=1, keepdims=True), Pinv_T])


def shape_operators(mesh: TetMesh) -> np.ndarray:
    """Batched :func:`shape_operator`, shape (T, 3, 4)."""
    x = mesh.rest_positions
    P = np.transpose(x[mesh.tets[:, 1:]] - x[mesh.tets[:, :1]], (0, 2, 1))
    Pinv_T = np.transpose(np.linalg.inv(P), (0, 2, 1))
    return np.concatenate([-Pinv_T.sum(axis=2, keepdims=True), Pinv_T], axis=2)


def deformation_gradient(mesh: TetMesh, tet: int, q) -> np.ndarray:
    """F = P(q) P(rest)^-1 for element ``tet``."""
    Dm = displacement_matrix(mesh, tet, mesh.rest_positions)
    return displacement_matrix(mesh, tet, q) @ np.linalg.inv(Dm)


def signed_svd(F):
    """SVD with U, V proper rotations; the smallest singular value may turn negative.

    Works on a single 3x3 matrix or a stack (..., 3, 3).
    """
    U, s, Vt = np.linalg.svd(F)
    V = np.swapaxes(Vt, -1, -2).copy()
    U = U.copy()
    s = s.copy()
    for M in (U, V):
        neg = np.linalg.det(M) < 0
        M[..., :, 2] = np.where(neg[..., None], -M[..., :, 2], M[..., :, 2])
        s[..., 2] = np.where(neg, -s[..., 2], s[..., 2])
    return U, s, V


# --- local-step projections --------------------------------------------------------


def project_corotational(F) -> np.ndarray:
    """Closest rotation to F (polar factor with determinant +1)."""
    U, _, V = signed_svd(np.asarray(F, dtype=float))
    return U @ np.swapaxes(V, -1, -2)


def _pneumatic_branch_values(sigma, c, minus_index):
    root = np.sqrt(np.maximum(sigma**2 + 4.0 * c, 0.0))
    x = 0.5 * (sigma + root)
    if minus_index is not None:
        x[minus_index] = 0.5 * (sigma[minus_index] - root[minus_index])
    return x, root


def pneumatic_singular_values(sigma, a, *, max_iter=50, tol=1e-10):
    """Solve ``argmin ||d||^2  s.t.  prod(sigma + d) = a`` for the shifted values.

    Stationarity gives ``x_i (x_i - sigma_i) = c`` for one multiplier ``c``,
    hence ``x_i = (sigma_i + sqrt(sigma_i^2 + 4c)) / 2``.  A safeguarded Newton
    iteration on ``sum(log x_i) = log a`` finds ``c``.  Strong compression below
    the reach of that branch continues on the other root for the smallest
    singular value.  Returns ``(x, c, minus_index)``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if not (a > 0 and np.isfinite(a)) or not np.all(np.isfinite(sigma)):
        raise PneumaticInfeasible(f"activation must be positive and finite, got {a}")
    log_a = np.log(a)
    # lower end of the admissible multiplier range on the plus branch
    c_lo = max(0.0 if s < 0 else -0.25 * s * s for s in sigma)
    x_lo, _ = _pneumatic_branch_values(sigma, c_lo, None)
    minus_index = None
    if np.all(x_lo > 0) and np.sum(np.log(x_lo)) > log_a:
        # branch switch: the smallest non-negative singular value takes the minus root
        minus_index = int(np.argmin(np.where(sigma >= 0, sigma, np.inf)))
        lo, hi = c_lo, 0.0
        sign = -1.0  # objective decreases with c on this branch
    else:
        lo, hi = c_lo, max(1.0, abs(c_lo))
        while np.sum(np.log(_pneumatic_branch_values(sigma, hi, None)[0])) < log_a:
            hi *= 4.0
        sign = 1.0

    c = 0.5 * (lo + hi)
    for _ in range(max_iter):
        x, root = _pneumatic_branch_values(sigma, c, minus_index)
        if np.any(x <= 0):
            resid = -np.inf * sign
        else:
            resid = np.sum(np.log(x)) - log_a
        # keep the bracket: sign*resid increases with c
        if sign * resid > 0:
            hi = c
        else:
            lo = c
        step = None
        if np.isfinite(resid) and np.all(root > 0):
            dx = 1.0 / root
            if minus_index is not None:
                dx[minus_index] = -dx[minus_index]
            slope = np.sum(dx / x)
            if slope != 0:
                step = c - resid / slope
        if np.isfinite(resid) and abs(resid) < tol:
            # one extra Newton step brings the residual to round-off
            if step is not None and np.isfinite(step):
                x2, _ = _pneumatic_branch_values(sigma, step, minus_index)
                if np.all(x2 > 0) and abs(np.sum(np.log(x2)) - log_a) <= abs(resid):
                    return x2, step, minus_index
            return x, c, minus_index
        c = step if step is not None and lo < step < hi else 0.5 * (lo + hi)
    raise PneumaticInfeasible(f"volume constraint not met within {max_iter} iterations (sigma={sigma}, a={a})")


def pneumatic_singular_values_batch(sigma, a, *, max_iter=50, tol=1e-10) -> np.ndarray:
    """Row-wise :func:`pneumatic_singular_values` for (K, 3) ``sigma`` and (K,) ``a``.

    Rows on the ordinary branch run the same safeguarded Newton iteration in
    lockstep; rows needing the branch switch, or failing to settle, fall back
    to the scalar routine.
    """
    sigma = np.asarray(sigma, dtype=float).reshape(-1, 3)
    a = np.broadcast_to(np.asarray(a, dtype=float), sigma.shape[:1])
    out = np.empty_like(sigma)
    ok = (a > 0) & np.isfinite(a) & np.all(np.isfinite(sigma), axis=1)
    log_a = np.log(np.where(ok, a, 1.0))
    c_lo = np.max(np.where(sigma < 0, 0.0, -0.25 * sigma * sigma), axis=1)
    x_lo = 0.5 * (sigma + np.sqrt(np.maximum(sigma**2 + 4.0 * c_lo[:, None], 0.0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        switch = np.all(x_lo > 0, axis=1) & (np.sum(np.log(x_lo), axis=1) > log_a)
    fast = ok & ~switch
    idx = np.flatnonzero(fast)
    if idx.size:
        sg, la = sigma[idx], log_a[idx]
        lo = c_lo[idx].copy()
        hi = np.maximum(1.0, np.abs(lo))

        def values(c):
            root = np.sqrt(np.maximum(sg**2 + 4.0 * c[:, None], 0.0))
            return 0.5 * (sg + root), root

        while True:
            short = np.sum(np.log(values(hi)[0]), axis=1) < la
            if not short.any():
                break
            hi = np.where(short, hi * 4.0, hi)
        c = 0.5 * (lo + hi)
        live = np.ones(idx.size, dtype=bool)
        res = np.full_like(sg, np.nan)
        for _ in range(max_iter):
            x, root = values(c)
            with np.errstate(divide="ignore", invalid="ignore"):
                pos = np.all(x > 0, axis=1)
                resid = np.where(pos, np.sum(np.log(np.where(x > 0, x, 1.0)), axis=1) - la, -np.inf)
                hi = np.where(live & (resid > 0), c, hi)
                lo = np.where(live & ~(resid > 0), c, lo)
                good = np.isfinite(resid) & np.all(root > 0, axis=1)
                slope = np.sum(1.0 / np.where(root > 0, root, 1.0) / np.where(x != 0, x, 1.0), axis=1)
                has_step = good & (slope != 0)
                step = np.where(has_step, c - resid / np.where(slope != 0, slope, 1.0), np.nan)
            done = live & np.isfinite(resid) & (np.abs(resid) < tol)
            if done.any():
                # the extra Newton step of the scalar routine
                x2, _ = values(np.where(np.isfinite(step), step, c))
                with np.errstate(divide="ignore", invalid="ignore"):
                    better = (has_step & np.isfinite(step) & np.all(x2 > 0, axis=1)
                              & (np.abs(np.sum(np.log(np.where(x2 > 0, x2, 1.0)), axis=1) - la) <= np.abs(resid)))
                pick = np.where(better[:, None], x2, x)
                res[done] = pick[done]
                live &= ~done
                if not live.any():
                    break
            inside = has_step & (lo < step) & (step < hi)
            c = np.where(inside, step, 0.5 * (lo + hi))
        out[idx] = res
        fast[idx[live]] = False
    for k in np.flatnonzero(~fast):
        out[k] = pneumatic_singular_values(sigma[k], a[k], max_iter=max_iter, tol=tol)[0]
    return out


def project_pneumatic(F, a) -> np.ndarray:
    """``U diag(sigma + d) V^T`` with the minimum-norm shift d reaching volume ratio ``a``."""
    U, s, V = signed_svd(np.asarray(F, dtype=float))
    x, _, _ = pneumatic_singular_values(s, a)
    return U @ np.diag(x) @ V.T


def project_muscle(F, a, m) -> np.ndarray:
    """Target fiber vector ``r F m`` with ``r = (1 - a) / ||F m||``."""
    Fm = np.asarray(F, dtype=float) @ np.asarray(m, dtype=float)
    length = np.linalg.norm(Fm)
    if length <= _FIBER_EPS:
        log.warning("muscle fiber collapsed (|Fm|=%g); projecting to zero", length)
        return np.zeros(3)
    return (1.0 - a) / length * Fm


def muscle_energy(F, a, m, k_m) -> float:
    """Energy density ``k_m/2 * ||(1 - r) F m||^2`` (squared norm)."""
    Fm = np.asarray(F, dtype=float) @ np.asarray(m, dtype=float)
    return 0.5 * k_m * float(np.sum((Fm - project_muscle(F, a, m)) ** 2))


# --- derivatives of the projections --------------------------------------------------


def _spectral_derivative(U, s, V, f, Jf, eps=1e-9):
    """d vec(U diag(f(s)) V^T) / d vec(F) for isotropic maps, shape (..., 9, 9).

    ``f`` are the mapped singular values and ``Jf`` their Jacobian w.r.t. ``s``.
    Row-major vectorization on both sides.
    """
    si, sj = s[..., :, None], s[..., None, :]
    fi, fj = f[..., :, None], f[..., None, :]
    diff = si - sj
    summ = si + sj
    Jdiag = np.diagonal(Jf, axis1=-2, axis2=-1)
    limit = Jdiag[..., :, None] - Jf
    alpha = np.where(np.abs(diff) > eps, (fi - fj) / np.where(np.abs(diff) > eps, diff, 1.0), limit)
    safe_sum = np.where(np.abs(summ) > eps, summ, np.copysign(eps, summ + 0.0))
    beta = (fi + fj) / safe_sum
    # K = U^T dF V for the nine unit perturbations dF = e_a e_b^T
    K = np.einsum("...ai,...bj->...abij", U, V)
    Ksym = 0.5 * (K + np.swapaxes(K, -1, -2))
    Kskw = 0.5 * (K - np.swapaxes(K, -1, -2))
    off = alpha[..., None, None, :, :] * Ksym + beta[..., None, None, :, :] * Kskw
    eye = np.eye(3, dtype=bool)
    dsig = np.diagonal(K, axis1=-2, axis2=-1)  # (..., a, b, i)
    dfd = np.einsum("...ij,...abj->...abi", Jf, dsig)
    Omega = np.where(eye, 0.0, off)
    Omega = Omega + dfd[..., :, None] * np.eye(3)
    dP = np.einsum("...ci,...abij,...dj->...abcd", U, Omega, V)
    shape = dP.shape[:-4]
    # rows: output (c,d), columns: input (a,b)
    return np.swapaxes(dP.reshape(shape + (9, 9)), -1, -2)


def corotational_derivative(F):
    """Jacobian of :func:`project_corotational`, (..., 9, 9) row-major."""
    U, s, V = signed_svd(np.asarray(F, dtype=float))
    f = np.ones_like(s)
    Jf = np.zeros(s.shape + (3,))
    return _spectral_derivative(U, s, V, f, Jf)


def pneumatic_derivative(F, a):
    """Jacobians of :func:`project_pneumatic` w.r.t. F (9x9) and a (9,).

    Also accepts a stack (K, 3, 3) with activations (K,), returning
    (K, 9, 9) and (K, 9).
    """
    F = np.asarray(F, dtype=float)
    single = F.ndim == 2
    F = F.reshape(-1, 3, 3)
    a = np.broadcast_to(np.asarray(a, dtype=float), F.shape[:1])
    U, s, V = signed_svd(F)
    x = pneumatic_singular_values_batch(s, a)
    w = 1.0 / (2.0 * x - s)
    S = np.sum(w / x, axis=1)
    Jf = w[:, :, None] * x[:, :, None] * np.eye(3) - np.einsum("ki,kj->kij", w, w) / S[:, None, None]
    dF = _spectral_derivative(U, s, V, x, Jf)
    dxa = w / (a * S)[:, None]
    da = np.einsum("kij,kj,klj->kil", U, dxa, V).reshape(-1, 9)
    return (dF[0], da[0]) if single else (dF, da)


# --- single terms (public, unvectorized) ----------------------------------------------


@dataclass
class EnergyTerm:
    """One projective term ``weight/2 * ||G X[selector] - p||^2``.

    ``G`` has shape (rows, len(selector)) and ``p`` shape (rows, 3).
    """

    kind: str
    weight: float
    selector: np.ndarray
    G: np.ndarray
    p: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}")
        if not self.weight >= 0:
            raise ValueError("term weight must be non-negative")
        self.selector = np.asarray(self.selector, dtype=np.int64).reshape(-1)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, self.selector.size)
        self.p = np.asarray(self.p, dtype=float).reshape(self.G.shape[0], 3)

    def apply_G(self, q) -> np.ndarray:
        return self.G @ np.asarray(q, dtype=float).reshape(-1, 3)[self.selector]

    def project(self, q) -> np.ndarray:
        """Local step: update and return ``p`` for positions ``q``."""
        block = TermBlock.from_terms([self])
        self.p = block.project(np.asarray(q, dtype=float).reshape(-1, 3))[0]
        return self.p

    def energy(self, q) -> float:
        return 0.5 * self.weight * float(np.sum((self.apply_G(q) - self.p) ** 2))

    def dense_G(self, n_vertices: int) -> np.ndarray:
        """G expanded to all DoFs: (3*rows, 3N) acting on flat q, row-major output."""
        Gs = np.zeros((self.G.shape[0], n_vertices))
        Gs[:, self.selector] = self.G
        return np.kron(Gs, np.eye(3))


def corotational_G(mesh: TetMesh, tet: int):
    """Sparse map from flat q (3N) to the row-major entries of F, and its weight mu*V."""
    A = shape_operator(mesh, tet)  # (3, 4): A @ X_tet = F^T
    Gt = np.zeros((3, mesh.n_vertices))
    Gt[:, mesh.tets[tet]] = A
    # F^T = Gt X  =>  F[r, c] = (Gt X)[c, r]
    G = sp.kron(sp.csr_matrix(Gt), sp.identity(3), format="csr")[_T9]
    weight = float(mesh.mu[tet] * mesh.volumes()[tet])
    return G, weight


def corotational_term(mesh: TetMesh, tet: int) -> EnergyTerm:
    A = shape_operator(mesh, tet)
    w = float(mesh.mu[tet] * mesh.volumes()[tet])
    return EnergyTerm(COROTATIONAL, w, mesh.tets[tet], A, np.eye(3), {"tet": tet})


def attachment_term(vertex: int, target, weight: float) -> EnergyTerm:
    if not weight > 0:
        raise ValueError("attachment weight must be positive")
    return EnergyTerm(ATTACHMENT, weight, [vertex], [[1.0]], np.asarray(target, dtype=float).reshape(1, 3))


def muscle_term(mesh: TetMesh, tet: int, fiber, stiffness: float) -> EnergyTerm:
    m = np.asarray(fiber, dtype=float)
    m = m / np.linalg.norm(m)
    A = shape_operator(mesh, tet)
    w = float(stiffness * mesh.volumes()[tet])
    return EnergyTerm(MUSCLE, w, mesh.tets[tet], (m @ A)[None, :], m[None, :], {"fiber": m, "activation": 0.0})


def pneumatic_term(mesh: TetMesh, tet: int, stiffness: float) -> EnergyTerm:
    A = shape_operator(mesh, tet)
    w = float(stiffness * mesh.volumes()[tet])
    return EnergyTerm(PNEUMATIC, w, mesh.tets[tet], A, np.eye(3), {"activation": 1.0})


# --- vectorized blocks of same-kind terms ---------------------------------------------


@dataclass
class TermBlock:
    """Stack of K terms of one kind, evaluated in vectorized form.

    ``G`` is (K, rows, nv), ``selector`` (K, nv), ``p`` (K, rows, 3).  Muscle and
    pneumatic blocks keep per-term ``activation``; muscles also keep ``fiber``.
    ``stiffness`` holds the per-term material factor such that
    ``weight = stiffness * volume`` (``volume`` is 1 for attachments).
    """

    kind: str
    weight: np.ndarray
    selector: np.ndarray
    G: np.ndarray
    p: np.ndarray
    activation: np.ndarray | None = None
    fiber: np.ndarray | None = None
    tet: np.ndarray | None = None
    volume: np.ndarray | None = None

    @classmethod
    def from_terms(cls, terms) -> "TermBlock":
        kinds = {t.kind for t in terms}
        if len(kinds) != 1:
            raise ValueError("a block holds terms of a single kind")
        kind = kinds.pop()
        act = None
        if kind in (MUSCLE, PNEUMATIC):
            act = np.array([t.params.get("activation", 0.0 if kind == MUSCLE else 1.0) for t in terms])
        fib = np.array([t.params["fiber"] for t in terms]) if kind == MUSCLE else None
        return cls(
            kind,
            np.array([t.weight for t in terms], dtype=float),
            np.stack([t.selector for t in terms]),
            np.stack([t.G for t in terms]),
            np.stack([t.p for t in terms]),
            act,
            fib,
        )

    def __len__(self):
        return len(self.weight)

    def copy(self) -> "TermBlock":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return TermBlock(
            self.kind, self.weight.copy(), self.selector, self.G, self.p.copy(),
            cp(self.activation), self.fiber, self.tet, self.volume,
        )

    def apply_G(self, X) -> np.ndarray:
        return np.einsum("krv,kvc->krc", self.G, X[self.selector])

    def project(self, X) -> np.ndarray:
        """Vectorized local step for positions ``X`` (N, 3); returns new p."""
        GX = self.apply_G(X)
        if self.kind == COROTATIONAL:
            R = project_corotational(np.swapaxes(GX, 1, 2))
            return np.swapaxes(R, 1, 2)
        if self.kind == ATTACHMENT:
            return self.p.copy()
        if self.kind == MUSCLE:
            u = GX[:, 0, :]
            length = np.linalg.norm(u, axis=1)
            collapsed = length <= _FIBER_EPS
            if collapsed.any():
                log.warning("%d muscle fibers collapsed; projecting to zero", int(collapsed.sum()))
            scale = np.where(collapsed, 0.0, (1.0 - self.activation) / np.where(collapsed, 1.0, length))
            return (scale[:, None] * u)[:, None, :]
        # pneumatic
        F = np.swapaxes(GX, 1, 2)
        U, s, V = signed_svd(F)
        try:
            x = pneumatic_singular_values_batch(s, self.activation)
        except PneumaticInfeasible as exc:
            bad = [k for k in range(len(s)) if not self.activation[k] > 0]
            k = bad[0] if bad else None
            raise PneumaticInfeasible(f"pneumatic term {k} (tet {None if k is None else self._tet(k)}): {exc}") from None
        out = np.einsum("kij,kj,klj->kil", U, x, V)
        return np.swapaxes(out, 1, 2)

    def _tet(self, k):
        return None if self.tet is None else int(self.tet[k])

    def energies(self, X, p=None) -> np.ndarray:
        p = self.p if p is None else p
        r = self.apply_G(X) - p
        return 0.5 * self.weight * np.einsum("krc,krc->k", r, r)

    # -- assembly helpers --

    def laplacian_triplets(self):
        """(rows, cols, vals) of sum_k w_k G_k^T G_k in vertex index space."""
        GtG = self.weight[:, None, None] * np.einsum("krv,kru->kvu", self.G, self.G)
        nv = self.selector.shape[1]
        rows = np.repeat(self.selector, nv, axis=1).reshape(-1)
        cols = np.tile(self.selector, (1, nv)).reshape(-1)
        return rows, cols, GtG.reshape(-1)

    def Jp(self, n_vertices: int, p=None) -> np.ndarray:
        """sum_k w_k G_k^T p_k as an (N, 3) array."""
        p = self.p if p is None else p
        contrib = self.weight[:, None, None] * np.einsum("krv,krc->kvc", self.G, p)
        out = np.zeros((n_vertices, 3))
        np.add.at(out, self.selector.reshape(-1), contrib.reshape(-1, 3))
        return out

    def projection_jacobian(self, X) -> np.ndarray:
        """d vec(p_k) / d vec(G_k X), shape (K, 3r, 3r), row-major (r, xyz)."""
        GX = self.apply_G(X)
        K, r = GX.shape[:2]
        if self.kind == ATTACHMENT:
            return np.zeros((K, 3, 3))
        if self.kind == MUSCLE:
            u = GX[:, 0, :]
            length = np.linalg.norm(u, axis=1)
            safe = np.where(length > _FIBER_EPS, length, 1.0)
            uhat = u / safe[:, None]
            J = (np.eye(3) - np.einsum("ki,kj->kij", uhat, uhat)) * ((1.0 - self.activation) / safe)[:, None, None]
            return np.where((length > _FIBER_EPS)[:, None, None], J, 0.0)
        F = np.swapaxes(GX, 1, 2)
        if self.kind == COROTATIONAL:
            D = corotational_derivative(F)
        else:
            D = pneumatic_derivative(F, self.activation)[0]
        # p^T = P(F), GX = F^T: conjugate by the transpose permutation
        return D[:, _T9][:, :, _T9]

    def activation_jacobian(self, X) -> np.ndarray:
        """d p_k / d a_k, shape (K, r, 3)."""
        GX = self.apply_G(X)
        if self.kind == MUSCLE:
            u = GX[:, 0, :]
            length = np.linalg.norm(u, axis=1)
            safe = np.where(length > _FIBER_EPS, length, 1.0)
            return (-(u / safe[:, None]) * (length > _FIBER_EPS)[:, None])[:, None, :]
        if self.kind == PNEUMATIC:
            F = np.swapaxes(GX, 1, 2)
            out = pneumatic_derivative(F, self.activation)[1].reshape(-1, 3, 3)
            return np.swapaxes(out, 1, 2)
        raise ValueError(f"{self.kind} terms have no activation")

    def hessian_triplets(self, X):
        """Triplets of sum_k w_k G3^T (I - dp/dGX) G3 on flat 3N DoFs."""
        K, r, nv = self.G.shape
        D = self.projection_jacobian(X)
        G3 = np.einsum("krv,ij->krivj", self.G, np.eye(3)).reshape(K, 3 * r, 3 * nv)
        inner = np.eye(3 * r) - D
        H = self.weight[:, None, None] * np.einsum("kab,kbc,kcd->kad", np.swapaxes(G3, 1, 2), inner, G3)
        dof = (3 * self.selector[:, :, None] + np.arange(3)).reshape(K, 3 * nv)
        rows = np.repeat(dof, 3 * nv, axis=1).reshape(-1)
        cols = np.tile(dof, (1, 3 * nv)).reshape(-1)
        return rows, cols, H.reshape(-1)


def corotational_block(mesh: TetMesh) -> TermBlock:
    A = shape_operators(mesh)
    vol = mesh.volumes()
    p = np.broadcast_to(np.eye(3), (mesh.n_tets, 3, 3)).copy()
    return TermBlock(COROTATIONAL, mesh.mu * vol, mesh.tets.copy(), A, p,
                     tet=np.arange(mesh.n_tets), volume=vol)


def muscle_block(mesh: TetMesh, tets, fibers, stiffness) -> TermBlock:
    tets = np.asarray(tets, dtype=np.int64).reshape(-1)
    m = np.asarray(fibers, dtype=float).reshape(-1, 3)
    m = m / np.linalg.norm(m, axis=1, keepdims=True)
    A = shape_operators(mesh)[tets]
    vol = mesh.volumes()[tets]
    k = np.broadcast_to(np.asarray(stiffness, dtype=float), tets.shape)
    G = np.einsum("ki,kiv->kv", m, A)[:, None, :]
    return TermBlock(MUSCLE, k * vol, mesh.tets[tets], G, m[:, None, :].copy(),
                     activation=np.zeros(len(tets)), fiber=m, tet=tets, volume=vol)


def pneumatic_block(mesh: TetMesh, tets, stiffness) -> TermBlock:
    tets = np.asarray(tets, dtype=np.int64).reshape(-1)
    vol = mesh.volumes()[tets]
    k = np.broadcast_to(np.asarray(stiffness, dtype=float), tets.shape)
    p = np.broadcast_to(np.eye(3), (len(tets), 3, 3)).copy()
    return TermBlock(PNEUMATIC, k * vol, mesh.tets[tets], shape_operators(mesh)[tets], p,
                     activation=np.ones(len(tets)), tet=tets, volume=vol)


def attachment_block(vertices, targets, weights) -> TermBlock:
    v = np.asarray(vertices, dtype=np.int64).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1, 3)
    w = np.broadcast_to(np.asarray(weights, dtype=float), v.shape).copy()
    if np.any(w <= 0):
        raise ValueError("attachment weights must be positive")
    return TermBlock(ATTACHMENT, w, v[:, None], np.ones((len(v), 1, 1)), t[:, None, :].copy(),
                     volume=np.ones(len(v)))
