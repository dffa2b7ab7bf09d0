"""Articulated rigid skeletons embedded in the PD solve, in reduced coordinates.

Each link carries a set of mesh vertices that move rigidly. A link's world
transform is the ordered product of its ancestors' joint transforms,
``T_k = T_root A_1 ... A_k``. Joint transforms are written in rest world
coordinates, so a rotational joint turns about ``anchor`` along ``axis`` as
seen in the rest pose.

The reduced unknown is laid out as::

    z = [deformable xyz (vertex order) | root omega, root l (if free) | one value per joint link]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .pd import GlobalSystem, SolveInfo, SolverConfig, local_step, relative_change

log = logging.getLogger(__name__)

ROTATIONAL = "rotational"
PRISMATIC = "prismatic"
FREE = "free"


class SkeletonError(ValueError):
    """Invalid kinematic tree description."""


class ReducedSolveError(RuntimeError):
    """The reduced system stayed singular after regularization."""


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(axis, theta) -> np.ndarray:
    n = np.asarray(axis, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return c * np.eye(3) + s * skew(n) + (1.0 - c) * np.outer(n, n)


def _homogeneous(R, t) -> np.ndarray:
    A = np.eye(4)
    A[:3, :3] = R
    A[:3, 3] = t
    return A


@dataclass(frozen=True)
class Joint:
    """A 1-DoF joint (rotational or prismatic) or the free root.

    ``value`` is the angle (rad) or the slide (m). The root keeps its rigid
    transform in ``transform``; ``fixed=True`` pins the root to the world.
    """

    kind: str
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    value: float = 0.0
    transform: np.ndarray | None = None
    fixed: bool = False

    def __post_init__(self):
        if self.kind not in (ROTATIONAL, PRISMATIC, FREE):
            raise SkeletonError(f"unknown joint kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        norm = np.linalg.norm(axis)
        if self.kind != FREE and not norm > 0:
            raise SkeletonError("joint axis must be non-zero")
        if norm > 0 and abs(norm - 1.0) > 1e-15:
            axis = axis / norm
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float).reshape(3))
        object.__setattr__(self, "value", float(self.value))
        if self.kind == FREE:
            T = np.eye(4) if self.transform is None else np.asarray(self.transform, dtype=float).reshape(4, 4)
            object.__setattr__(self, "transform", T)

    @property
    def n_dofs(self) -> int:
        if self.kind == FREE:
            return 0 if self.fixed else 6
        return 1


def joint_transform(j: Joint):
    """Homogeneous joint transform ``A`` and its derivatives ``[dA/dz]``.

    The free root returns its current transform and no derivative; its
    increments enter through the rigid formulation instead.
    """
    if j.kind == ROTATIONAL:
        n, c, th = j.axis, j.anchor, j.value
        R = rodrigues(n, th)
        dR = -np.sin(th) * np.eye(3) + np.cos(th) * skew(n) + np.sin(th) * np.outer(n, n)
        dA = np.zeros((4, 4))
        dA[:3, :3] = dR
        dA[:3, 3] = -dR @ c
        return _homogeneous(R, c - R @ c), [dA]
    if j.kind == PRISMATIC:
        dA = np.zeros((4, 4))
        dA[:3, 3] = j.axis
        return _homogeneous(np.eye(3), j.value * j.axis), [dA]
    return j.transform.copy(), []


def joint_second_derivative(j: Joint) -> np.ndarray:
    """d^2 A / dz^2 for a 1-DoF joint (zero for prismatic)."""
    d2 = np.zeros((4, 4))
    if j.kind == ROTATIONAL:
        n, th = j.axis, j.value
        d2R = -np.cos(th) * np.eye(3) - np.sin(th) * skew(n) + np.cos(th) * np.outer(n, n)
        d2[:3, :3] = d2R
        d2[:3, 3] = -d2R @ j.anchor
    return d2


def joint_local_update(j: Joint, dz) -> Joint:
    """Apply an increment to a 1-DoF joint.

    Angles use ``atan2(sin t + cos t dt, cos t - sin t dt)``, which keeps the
    result in (-pi, pi]; slides are additive.
    """
    dz = float(dz)
    if j.kind == ROTATIONAL:
        s, c = np.sin(j.value), np.cos(j.value)
        return replace(j, value=float(np.arctan2(s + c * dz, c - s * dz)))
    if j.kind == PRISMATIC:
        return replace(j, value=j.value + dz)
    raise SkeletonError("the root is updated with rigid_local_step")


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] *= -1.0
    return U @ Vt


def rigid_local_step(T, dz) -> np.ndarray:
    """Update a rigid transform by ``dz = (omega, l)`` and restore a proper rotation.

    ``T' = [(I + [omega]x) R, (I + [omega]x) t + l]`` with the rotation block
    replaced by the closest rotation ``U V^T``.
    """
    dz = np.asarray(dz, dtype=float).reshape(6)
    W = np.eye(3) + skew(dz[:3])
    T = np.asarray(T, dtype=float)
    out = np.eye(4)
    out[:3, :3] = nearest_rotation(W @ T[:3, :3])
    out[:3, 3] = W @ T[:3, 3] + dz[3:]
    return out


@dataclass(frozen=True)
class Link:
    name: str
    parent: int  # -1 for the root
    joint: Joint
    vertices: np.ndarray


@dataclass
class JointState:
    """Current reduced coordinates: root transform plus one value per link (root entry unused)."""

    root: np.ndarray
    values: np.ndarray

    def copy(self) -> "JointState":
        return JointState(self.root.copy(), self.values.copy())

    def as_vector(self) -> np.ndarray:
        """Flat export: root rotation (row-major 3x3), root translation, joint values."""
        return np.concatenate([self.root[:3, :3].reshape(-1), self.root[:3, 3], self.values[1:]])

    @classmethod
    def from_vector(cls, vec, n_links) -> "JointState":
        vec = np.asarray(vec, dtype=float)
        root = _homogeneous(vec[:9].reshape(3, 3), vec[9:12])
        return cls(root, np.concatenate([[0.0], vec[12:12 + n_links - 1]]))


@dataclass
class KinematicTree:
    """Links sorted so that every parent precedes its children.

    ``order[k]`` is the position of sorted link ``k`` in the input list.
    """

    links: list
    rest_positions: np.ndarray
    order: np.ndarray

    @classmethod
    def create(cls, links, rest_positions) -> "KinematicTree":
        links = list(links)
        rest = np.asarray(rest_positions, dtype=float).reshape(-1, 3)
        if not links:
            raise SkeletonError("a skeleton needs at least a root link")
        roots = [i for i, l in enumerate(links) if l.parent < 0]
        if len(roots) != 1:
            raise SkeletonError(f"expected exactly one root link, found {len(roots)}")
        if links[roots[0]].joint.kind != FREE:
            raise SkeletonError("the root link must carry a free joint")
        for i, l in enumerate(links):
            if l.parent >= len(links):
                raise SkeletonError(f"link {l.name!r}: parent {l.parent} does not exist")
            if l.parent >= 0 and l.joint.kind == FREE:
                raise SkeletonError(f"link {l.name!r}: only the root may have a free joint")
        # breadth-first sort from the root; unreachable links mean a cycle
        children = {i: [] for i in range(len(links))}
        for i, l in enumerate(links):
            if l.parent >= 0:
                children[l.parent].append(i)
        order = [roots[0]]
        for i in order:
            order.extend(children[i])
        if len(order) != len(links):
            missing = sorted(set(range(len(links))) - set(order))
            raise SkeletonError(f"links {missing} are not connected to the root (cycle?)")
        pos = {old: new for new, old in enumerate(order)}
        sorted_links = []
        seen = set()
        for old in order:
            l = links[old]
            verts = np.asarray(l.vertices, dtype=np.int64).reshape(-1)
            if verts.size and (verts.min() < 0 or verts.max() >= len(rest)):
                raise SkeletonError(f"link {l.name!r}: vertex index out of range")
            dup = seen.intersection(verts.tolist())
            if dup or len(set(verts.tolist())) != verts.size:
                raise SkeletonError(f"link {l.name!r}: vertex {sorted(dup)[:1] or verts[0]} assigned twice")
            seen.update(verts.tolist())
            sorted_links.append(Link(l.name, pos[l.parent] if l.parent >= 0 else -1, l.joint, verts))
        return cls(sorted_links, rest, np.array(order))

    # -- structure --

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_vertices(self) -> int:
        return len(self.rest_positions)

    @property
    def root_free(self) -> bool:
        return not self.links[0].joint.fixed

    @property
    def rigid_vertices(self) -> np.ndarray:
        parts = [l.vertices for l in self.links]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    @property
    def deformable_vertices(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.rigid_vertices] = False
        return np.flatnonzero(mask)

    @property
    def has_rigid(self) -> bool:
        return self.rigid_vertices.size > 0

    def chain(self, k) -> list:
        """Non-root links from the root's child down to ``k`` (inclusive)."""
        out = []
        while k > 0:
            out.append(k)
            k = self.links[k].parent
        return out[::-1]

    def rest_homogeneous(self, k) -> np.ndarray:
        V = np.ones((4, len(self.links[k].vertices)))
        V[:3] = self.rest_positions[self.links[k].vertices].T
        return V

    def initial_state(self) -> JointState:
        root = self.links[0].joint.transform.copy()
        return JointState(root, np.array([l.joint.value for l in self.links]))

    def joint_at(self, k, js: JointState) -> Joint:
        j = self.links[k].joint
        if k == 0:
            return replace(j, transform=js.root)
        return replace(j, value=float(js.values[k]))

    def dof_layout(self):
        """(n_deformable_dofs, root slice or None, per-link joint column or -1, total)."""
        nd = 3 * len(self.deformable_vertices)
        col = nd
        root = None
        if self.root_free:
            root = slice(col, col + 6)
            col += 6
        joint_col = -np.ones(self.n_links, dtype=np.int64)
        for k in range(1, self.n_links):
            joint_col[k] = col
            col += 1
        return nd, root, joint_col, col

    @property
    def n_rigid_dofs(self) -> int:
        return (6 if self.root_free else 0) + self.n_links - 1


def forward_kinematics(tree: KinematicTree, js: JointState | None = None):
    """Per-link world transforms and the rigid vertices' world positions (N, 3 rows filled for rigid ones)."""
    js = tree.initial_state() if js is None else js
    T = [None] * tree.n_links
    T[0] = js.root.copy()
    for k in range(1, tree.n_links):
        A, _ = joint_transform(tree.joint_at(k, js))
        T[k] = T[tree.links[k].parent] @ A
    X = np.array(tree.rest_positions, dtype=float)
    for k, l in enumerate(tree.links):
        if l.vertices.size:
            X[l.vertices] = (T[k] @ tree.rest_homogeneous(k))[:3].T
    return T, X


def place_rigid(tree: KinematicTree, js: JointState, X) -> np.ndarray:
    """Copy of ``X`` with rigid vertices moved to their forward-kinematics positions."""
    _, fk = forward_kinematics(tree, js)
    out = np.array(X, dtype=float).reshape(-1, 3)
    rv = tree.rigid_vertices
    out[rv] = fk[rv]
    return out


@dataclass
class ReducedJacobian:
    """``B = dq/dz`` as a sparse (3N, nz) matrix plus its per-link blocks.

    ``blocks[(u, v)]`` is (3, m_u) for joint DoF ``v`` of link ``u``'s vertices;
    ``blocks[(u, 0)]`` is (m_u, 3, 6) for the free root.
    """

    matrix: sp.csc_matrix
    blocks: dict
    mult_count: int
    n_deformable_dofs: int
    root: slice | None
    joint_col: np.ndarray
    transforms: list

    @property
    def n_dofs(self) -> int:
        return self.matrix.shape[1]

    @property
    def rigid_slice(self) -> slice:
        return slice(self.n_deformable_dofs, self.n_dofs)


def _root_block(x) -> np.ndarray:
    """(m, 3, 6) blocks ``[-[q]x, I]``."""
    m = len(x)
    B = np.zeros((m, 3, 6))
    B[:, 0, 1], B[:, 0, 2] = x[:, 2], -x[:, 1]
    B[:, 1, 0], B[:, 1, 2] = -x[:, 2], x[:, 0]
    B[:, 2, 0], B[:, 2, 1] = x[:, 1], -x[:, 0]
    B[:, :, 3:] = np.eye(3)
    return B


def assemble_B(tree: KinematicTree, js: JointState | None = None) -> ReducedJacobian:
    """Top-down assembly of ``B`` with cached prefix and suffix products.

    ``B_{u,v} = Q P_v dA_v S_{v,u} V_u`` where ``P_v`` is the product of the
    ancestors' transforms and ``S_{v,u}`` the product from below ``v`` down to
    ``u`` (identity when ``u = v``). ``mult_count`` counts 4x4 products.
    """
    js = tree.initial_state() if js is None else js
    nl = tree.n_links
    A, dA = [None] * nl, [None] * nl
    P, T = [None] * nl, [None] * nl
    W = [None] * nl
    S = {}
    count = 0
    T[0] = js.root.copy()
    P[0] = np.eye(4)
    blocks = {}
    for u in range(1, nl):
        A[u], (dA[u],) = joint_transform(tree.joint_at(u, js))
        par = tree.links[u].parent
        P[u] = T[par]
        T[u] = P[u] @ A[u]
        W[u] = P[u] @ dA[u]
        count += 2
        V = tree.rest_homogeneous(u)
        for v in tree.chain(u):
            if v == u:
                S[v, u] = None  # identity
                D = W[v]
            else:
                prev = S[v, par]
                S[v, u] = A[u] if prev is None else prev @ A[u]
                D = W[v] @ S[v, u]
                count += 1 if prev is None else 2
            if V.shape[1]:
                blocks[u, v] = (D @ V)[:3]

    nd, root, joint_col, nz = tree.dof_layout()
    rows, cols, vals = [], [], []
    dv = tree.deformable_vertices
    rows.append((3 * dv[:, None] + np.arange(3)).reshape(-1))
    cols.append(np.arange(nd))
    vals.append(np.ones(nd))
    for u, l in enumerate(tree.links):
        if not l.vertices.size:
            continue
        r3 = 3 * l.vertices[:, None] + np.arange(3)  # (m, 3)
        if root is not None:
            x = (T[u] @ tree.rest_homogeneous(u))[:3].T
            Br = _root_block(x)
            blocks[u, 0] = Br
            rows.append(np.repeat(r3.reshape(-1), 6))
            cols.append(np.tile(np.arange(root.start, root.stop), r3.size))
            vals.append(Br.reshape(-1))
        for v in tree.chain(u):
            rows.append(r3.reshape(-1))
            cols.append(np.full(r3.size, joint_col[v]))
            vals.append(blocks[u, v].T.reshape(-1))
    B = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * tree.n_vertices, nz),
    )
    return ReducedJacobian(B, blocks, count, nd, root, joint_col, T)


def naive_B_blocks(tree: KinematicTree, js: JointState | None = None):
    """Reference assembly recomputing every chain product from scratch (O(N^3) on chains).

    Returns ``(blocks, mult_count)`` with the joint blocks of :func:`assemble_B`.
    """
    js = tree.initial_state() if js is None else js
    count = 0
    blocks = {}
    for u in range(1, tree.n_links):
        V = tree.rest_homogeneous(u)
        chain = tree.chain(u)
        for i, v in enumerate(chain):
            D = js.root.copy()
            for w in chain[:i]:
                D = D @ joint_transform(tree.joint_at(w, js))[0]
                count += 1
            D = D @ joint_transform(tree.joint_at(v, js))[1][0]
            count += 1
            for w in chain[i + 1:]:
                D = D @ joint_transform(tree.joint_at(w, js))[0]
                count += 1
            if V.shape[1]:
                blocks[u, v] = (D @ V)[:3]
    return blocks, count


def fk_curvature(tree: KinematicTree, js: JointState, g, B: ReducedJacobian | None = None) -> np.ndarray:
    """Contraction ``sum_i g_i . d^2 q_i / dz_r dz_r`` over the rigid DoFs.

    ``g`` is an (N, 3) per-vertex covector. Root increments use the chart of
    :func:`rigid_local_step`, whose second derivative in omega is
    ``1/2 (E_a E_b + E_b E_a)(q - t)``; translations enter linearly.
    """
    g = np.asarray(g, dtype=float).reshape(-1, 3)
    B = assemble_B(tree, js) if B is None else B
    nr = tree.n_rigid_dofs
    off = 6 if tree.root_free else 0
    C = np.zeros((nr, nr))
    jcol = {k: off + k - 1 for k in range(1, tree.n_links)}
    A = [None] + [joint_transform(tree.joint_at(k, js)) for k in range(1, tree.n_links)]
    t = js.root[:3, 3]
    for u, l in enumerate(tree.links):
        if not l.vertices.size:
            continue
        gu = g[l.vertices]  # (m, 3)
        V = tree.rest_homogeneous(u)
        chain = tree.chain(u)
        for a, va in enumerate(chain):
            for b in range(a, len(chain)):
                D = js.root.copy()
                for k, w in enumerate(chain):
                    if k == a == b:
                        D = D @ joint_second_derivative(tree.joint_at(w, js))
                    elif k in (a, b):
                        D = D @ A[w][1][0]
                    else:
                        D = D @ A[w][0]
                val = float(np.sum((D @ V)[:3] * gu.T))
                C[jcol[va], jcol[chain[b]]] += val
                if a != b:
                    C[jcol[chain[b]], jcol[va]] += val
        if tree.root_free:
            x = (B.transforms[u] @ V)[:3].T - t
            C[:3, :3] += 0.5 * (x.T @ gu + gu.T @ x) - np.eye(3) * np.sum(gu * x)
            for v in chain:
                Bv = B.blocks[u, v].T  # (m, 3)
                c = np.cross(Bv, gu).sum(axis=0)
                C[:3, jcol[v]] += c
                C[jcol[v], :3] += c
    return C


def apply_increment(tree: KinematicTree, js: JointState, dz_rigid) -> JointState:
    """Root and joint local updates for the rigid part of ``dz``."""
    dz = np.asarray(dz_rigid, dtype=float)
    out = js.copy()
    off = 0
    if tree.root_free:
        out.root = rigid_local_step(js.root, dz[:6])
        off = 6
    for k in range(1, tree.n_links):
        out.values[k] = joint_local_update(tree.joint_at(k, js), dz[off + k - 1]).value
    return out


def pad_torques(tree: KinematicTree, tau) -> np.ndarray:
    """Accept joint-only torques or full rigid generalized forces; return the latter."""
    nr = tree.n_rigid_dofs
    if tau is None:
        return np.zeros(nr)
    tau = np.asarray(tau, dtype=float).reshape(-1)
    nj = tree.n_links - 1
    if tau.size == nr:
        return tau.copy()
    if tau.size == nj:
        return np.concatenate([np.zeros(nr - nj), tau])
    raise ValueError(f"expected {nj} joint torques or {nr} rigid forces, got {tau.size}")


def reduced_system(sys: GlobalSystem, B: ReducedJacobian, X, s, ps, tau=None):
    """``H = B^T (M/h^2 + L) B`` and ``k = -B^T((M/h^2+L) q - rhs) + tau``."""
    A3 = sys.system_matrix3
    q = np.asarray(X, dtype=float).reshape(-1)
    rhs = sys.rhs(np.asarray(s, dtype=float).reshape(-1, 3), ps).reshape(-1)
    Bm = B.matrix
    H = (Bm.T @ (A3 @ Bm)).tocsc()
    k = -(Bm.T @ (A3 @ q - rhs))
    nr = B.n_dofs - B.n_deformable_dofs
    if nr and tau is not None:
        k[B.rigid_slice] += np.asarray(tau, dtype=float)
    return H, k


def solve_reduced(H, k, n_deformable: int) -> np.ndarray:
    """Symmetric solve with Tikhonov regularization of the rigid block if needed."""
    dim = H.shape[0]

    def attempt(Hm):
        try:
            x = spla.splu(Hm.tocsc()).solve(k)
        except RuntimeError:
            return None
        r = Hm @ x - k
        if not np.all(np.isfinite(x)) or np.linalg.norm(r) > 1e-8 * (np.linalg.norm(k) + 1e-300) + 1e-14:
            return None
        return x

    x = attempt(H)
    if x is not None:
        return x
    eps = 1e-10 * H.diagonal().sum() / max(dim, 1)
    reg = np.zeros(dim)
    reg[n_deformable:] = eps
    x = attempt(H + sp.diags(reg))
    if x is not None:
        log.debug("reduced system regularized with eps=%g", eps)
        return x
    cond = np.linalg.cond(H.toarray()) if dim <= 2000 else float("inf")
    raise ReducedSolveError(f"reduced system singular (dim {dim}, condition estimate {cond:.3g})")


def reduced_global_solve(sys: GlobalSystem, B: ReducedJacobian, X, s, ps, tau=None) -> np.ndarray:
    """Increment ``dz`` solving ``H dz = k`` for the current linearization."""
    H, k = reduced_system(sys, B, X, s, ps, tau)
    return solve_reduced(H, k, B.n_deformable_dofs)


def reduced_solve_positions(
    sys: GlobalSystem,
    s,
    cfg: SolverConfig,
    tree: KinematicTree | None,
    js: JointState | None,
    X0=None,
    tau=None,
    record=False,
    force_reduced=False,
):
    """Local/global loop with the reduced global step.

    Returns ``(X, joint_state, SolveInfo)``. Scenes without rigid vertices take
    the plain global solve so the result is bitwise identical to the
    unreduced path; ``force_reduced`` disables that shortcut (for testing).
    """
    from .pd import objective, solve_positions

    if tree is None or (not tree.has_rigid and not force_reduced):
        X, info = solve_positions(sys, s, cfg, X0=X0, record=record)
        return X, (None if js is None else js.copy()), info

    X = np.array(s if X0 is None else X0, dtype=float).reshape(-1, 3)
    js = js.copy()
    X = place_rigid(tree, js, X)
    tau_full = pad_torques(tree, tau)
    dv = tree.deformable_vertices
    history, ps, converged, it = [], None, False, 0
    for it in range(1, cfg.max_local_global_iters + 1):
        ps = local_step(sys.blocks, X)
        if record:
            history.append(objective(sys, s, X, ps) - float(tau_full @ _rigid_coords(tree, js)))
        B = assemble_B(tree, js)
        dz = reduced_global_solve(sys, B, X, s, ps, tau_full)
        X_new = X.copy()
        X_new[dv] += dz[: B.n_deformable_dofs].reshape(-1, 3)
        js = apply_increment(tree, js, dz[B.n_deformable_dofs:])
        X_new = place_rigid(tree, js, X_new)
        change = relative_change(X_new, X)
        X = X_new
        if change < cfg.convergence_tol:
            converged = True
            break
    if not converged:
        log.info("reduced local/global loop hit the cap of %d iterations", cfg.max_local_global_iters)
    return X, js, SolveInfo(it, converged, ps, history)


def _rigid_coords(tree: KinematicTree, js: JointState) -> np.ndarray:
    """Joint values padded with zeros for the root (torque potential bookkeeping)."""
    return np.concatenate([np.zeros(6 if tree.root_free else 0), js.values[1:]])
