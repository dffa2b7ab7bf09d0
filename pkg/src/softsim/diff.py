"""Gradients of trajectory losses by reverse accumulation over per-frame checkpoints.

The forward pass keeps only the state at the start of each frame (positions,
velocities, joint coordinates and the frame's controls). The backward pass
re-runs each frame from its checkpoint and differentiates the converged
solution through the implicit function theorem:

* the PD solve satisfies ``grad Phi(q) = (M/h^2)(q - s) + L q - J p(q) = 0``,
  so ``K dq = (M/h^2) ds - d_theta grad Phi`` with ``K = M/h^2 + d^2E/dq^2``;
* with a skeleton the condition is ``B^T grad Phi - tau = 0`` in reduced
  coordinates, with ``H = B^T K B + C`` where ``C`` holds the curvature of the
  forward kinematics contracted with ``grad Phi``;
* the contact stage is differentiated with its active set (separate, stick,
  slide) frozen at the converged value.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import SimState
from .sim import Scene, Simulator, Trajectory, barycenter
from .skeleton import JointState

log = logging.getLogger(__name__)

CONTROL_KEYS = ("torque", "muscle", "pneumatic")
GROUPS = ("theta1", "theta2", "x0")
NEWTON_POLISH_ITERS = 6
_FLIP_EPS = 1e-7


# --- parameters and losses ------------------------------------------------------------


@dataclass
class ParamSet:
    """Differentiable inputs of a run.

    ``theta1`` is the flattened per-frame controls (torque, then muscle, then
    pneumatic; each (frames, K) row-major). ``theta2`` is per-element Young's
    modulus followed by per-element Poisson's ratio. ``x0`` is the initial
    positions followed by the initial velocities (flat, 3N each).
    """

    controls: dict
    youngs: np.ndarray
    poisson: np.ndarray
    q0: np.ndarray
    v0: np.ndarray
    joints0: JointState | None = None

    @classmethod
    def from_scene(cls, scene: Scene, frames=None) -> "ParamSet":
        st = scene.initial_state()
        return cls(
            scene.default_controls(frames),
            np.array(scene.mesh.youngs, dtype=float),
            np.array(scene.mesh.poisson, dtype=float),
            st.q.copy(),
            st.v.copy(),
            None if st.joints is None else st.joints.copy(),
        )

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.controls.items()}, self.youngs.copy(),
                        self.poisson.copy(), self.q0.copy(), self.v0.copy(),
                        None if self.joints0 is None else self.joints0.copy())

    @property
    def n_frames(self) -> int:
        return len(next(iter(self.controls.values()))) if self.controls else 0

    def vector(self, group: str) -> np.ndarray:
        if group == "theta1":
            return np.concatenate([self.controls[k].reshape(-1) for k in CONTROL_KEYS if k in self.controls])
        if group == "theta2":
            return np.concatenate([self.youngs, self.poisson])
        if group == "x0":
            return np.concatenate([self.q0, self.v0])
        raise ValueError(f"unknown parameter group {group!r}")

    def with_vector(self, group: str, vec) -> "ParamSet":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        out = self.copy()
        if vec.size != self.vector(group).size:
            raise ValueError(f"{group}: expected {self.vector(group).size} values, got {vec.size}")
        if group == "theta1":
            i = 0
            for k in CONTROL_KEYS:
                if k in out.controls:
                    n = out.controls[k].size
                    out.controls[k] = vec[i:i + n].reshape(out.controls[k].shape).copy()
                    i += n
        elif group == "theta2":
            t = len(self.youngs)
            out.youngs, out.poisson = vec[:t].copy(), vec[t:].copy()
        else:
            n = len(self.q0)
            out.q0, out.v0 = vec[:n].copy(), vec[n:].copy()
        return out

    def initial_state(self) -> SimState:
        return SimState(self.q0.copy(), self.v0.copy(), 0, None if self.joints0 is None else self.joints0.copy())


@dataclass
class LossSpec:
    """Euclidean distance of a terminal quantity to a target.

    ``kind`` is ``"barycenter"`` (mass-weighted, optionally over ``vertices``),
    ``"vertices"`` (stacked positions of ``vertices``; all when empty),
    ``"state"`` (positions then velocities) or ``"joints"`` (values of
    ``links``, non-root link indices).
    """

    kind: str
    target: np.ndarray
    vertices: np.ndarray | None = None
    links: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("barycenter", "vertices", "state", "joints"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        self.target = np.asarray(self.target, dtype=float).reshape(-1)
        if self.vertices is not None:
            self.vertices = np.asarray(self.vertices, dtype=np.int64).reshape(-1)
        if self.links is not None:
            self.links = np.asarray(self.links, dtype=np.int64).reshape(-1)

    def quantity(self, mass, state: SimState) -> np.ndarray:
        X = state.positions
        if self.kind == "barycenter":
            idx = np.arange(len(X)) if self.vertices is None else self.vertices
            return barycenter(mass[idx], X[idx])
        if self.kind == "vertices":
            idx = np.arange(len(X)) if self.vertices is None else self.vertices
            return X[idx].reshape(-1)
        if self.kind == "state":
            return np.concatenate([state.q, state.v])
        if state.joints is None:
            raise ValueError("joint loss on a scene without skeleton")
        links = np.arange(1, len(state.joints.values)) if self.links is None else self.links
        return state.joints.values[links]

    def evaluate(self, mass, state: SimState):
        """Loss value and its gradients with respect to (q, v, joint values)."""
        diff = self.quantity(mass, state) - self.target
        value = float(np.linalg.norm(diff))
        gq = np.zeros_like(state.positions)
        gv = np.zeros_like(state.velocities)
        gj = np.zeros(0 if state.joints is None else len(state.joints.values) - 1)
        if value == 0.0:
            return value, gq, gv, gj
        u = diff / value
        if self.kind == "barycenter":
            idx = np.arange(len(gq)) if self.vertices is None else self.vertices
            np.add.at(gq, idx, (mass[idx] / mass[idx].sum())[:, None] * u)
        elif self.kind == "vertices":
            idx = np.arange(len(gq)) if self.vertices is None else self.vertices
            np.add.at(gq, idx, u.reshape(-1, 3))
        elif self.kind == "state":
            n = gq.size
            gq += u[:n].reshape(-1, 3)
            gv += u[n:].reshape(-1, 3)
        else:
            links = np.arange(1, len(state.joints.values)) if self.links is None else self.links
            np.add.at(gj, links - 1, u)
        return value, gq, gv, gj


def loss(trajectory: Trajectory, spec: LossSpec, mass) -> float:
    """Terminal loss of a finished trajectory."""
    return spec.evaluate(np.asarray(mass, dtype=float), trajectory.final)[0]


# --- checkpointed forward pass ---------------------------------------------------------


@dataclass
class Checkpoint:
    """State at the start of a frame plus that frame's controls; nothing else."""

    frame_index: int
    q: np.ndarray
    v: np.ndarray
    joints: np.ndarray | None
    activations: dict

    def float_count(self) -> int:
        n = self.q.size + self.v.size + (0 if self.joints is None else self.joints.size)
        return n + sum(a.size for a in self.activations.values())

    def state(self, n_links=None) -> SimState:
        js = None if self.joints is None else JointState.from_vector(self.joints, n_links)
        return SimState(self.q.copy(), self.v.copy(), self.frame_index, js)


@dataclass
class CheckpointStore:
    """Checkpoints of a run and the float accounting used for memory tests.

    ``retained_floats`` counts everything kept after the forward pass.
    ``peak_transient_floats`` is the largest set of per-frame intermediates
    alive at once. In tape mode (``checkpointing=False``) every frame's
    intermediates are retained instead, as a naive reverse pass would need.
    """

    checkpoints: list = field(default_factory=list)
    tape: list = field(default_factory=list)
    final_state_floats: int = 0
    peak_transient_floats: int = 0
    checkpointing: bool = True

    def __len__(self):
        return len(self.checkpoints)

    def __getitem__(self, i) -> Checkpoint:
        return self.checkpoints[i]

    @property
    def retained_floats(self) -> int:
        n = sum(c.float_count() for c in self.checkpoints) + self.final_state_floats
        return n + sum(self.tape)

    @property
    def checkpoint_floats(self) -> int:
        return self.checkpoints[0].float_count() if self.checkpoints else 0


def precise_scene(scene: Scene) -> Scene:
    """Scene variant whose frames are solved to round-off (Newton polish after PD)."""
    return replace(scene, newton_polish=max(scene.newton_polish, NEWTON_POLISH_ITERS))


def _frame_controls(controls: dict, n: int) -> dict:
    return {k: v[n].copy() for k, v in controls.items()}


def simulate_with_checkpoints(scene: Scene, params: ParamSet, n_frames: int | None = None,
                              checkpointing: bool = True, sim: Simulator | None = None):
    """Forward run storing exactly one checkpoint per frame.

    Returns ``(trajectory, store)``. A divergent run stops early with
    ``trajectory.diverged`` set.
    """
    n_frames = params.n_frames if n_frames is None else n_frames
    sim = Simulator(scene, params.youngs, params.poisson) if sim is None else sim
    state = params.initial_state()
    store = CheckpointStore(checkpointing=checkpointing)
    diverged = False
    unconverged = []
    for n in range(n_frames):
        acts = _frame_controls(params.controls, n)
        store.checkpoints.append(Checkpoint(
            n, state.q.copy(), state.v.copy(),
            None if state.joints is None else state.joints.as_vector(), acts))
        new, rec = sim.advance_row(state, acts, n)
        transient = rec.float_count() + state.q.size + state.v.size
        store.peak_transient_floats = max(store.peak_transient_floats, transient)
        if not checkpointing:
            store.tape.append(rec.float_count())
        if not new.converged:
            unconverged.append(n)
        state = new
        if not state.is_finite() or (rec.contact is not None and rec.contact.diverged):
            diverged = True
            break
    store.final_state_floats = state.q.size + state.v.size + (0 if state.joints is None else state.joints.as_vector().size)
    traj = Trajectory(state, scene.h, state.frame_index, None, diverged, unconverged)
    return traj, store


def replay_frame(sim: Simulator, checkpoint: Checkpoint):
    """Re-run one frame from its checkpoint; returns ``(state, FrameRecord)``."""
    n_links = None if sim.tree is None else sim.tree.n_links
    state = checkpoint.state(n_links)
    return sim.advance_row(state, checkpoint.activations, checkpoint.frame_index)


# --- per-frame adjoints ----------------------------------------------------------------


def _weight_sensitivity(block, x, y) -> np.ndarray:
    """``d/dw_k [x^T (sum_k w_k G_k^T G_k) y] = (G_k x) . (G_k y)`` per term."""
    return np.einsum("krc,krc->k", block.apply_G(x), block.apply_G(y))


@dataclass
class _ContactPartition:
    stick: list
    slide: list
    borderline: bool


def _classify_contacts(result, h) -> _ContactPartition:
    cs = result.contacts
    v = result.v
    stick, slide, border = [], [], False
    for k, c in enumerate(cs.contacts):
        xi = cs.xi[k]
        xin = float(xi @ c.normal)
        scale = max(np.abs(xi).max(), 1e-300)
        vi = v[c.vertex]
        vn = float(vi @ c.normal)
        if xin <= 1e-12 * (1.0 + scale):
            if abs(vn) <= _FLIP_EPS * (1.0 + np.abs(v).max()):
                border = True
            continue
        xit = np.linalg.norm(xi - xin * c.normal)
        vt = vi - vn * c.normal
        if xit < c.friction * xin * (1.0 - 1e-9) or c.friction == 0.0 and np.linalg.norm(vt) == 0.0:
            if xit > c.friction * xin * (1.0 - _FLIP_EPS) and c.friction > 0:
                border = True
            stick.append(k)
        else:
            if np.linalg.norm(vt) <= _FLIP_EPS * (1.0 + np.abs(v).max()):
                border = True
                stick.append(k)
            else:
                slide.append(k)
    return _ContactPartition(stick, slide, border)


def _contact_adjoint(sim: Simulator, rec, vbar):
    """Adjoint of the contact fixed point with the active set frozen.

    Returns ``(w, fixed_mask, borderline)`` where ``w`` (N, 3) is the
    multiplier of the free momentum rows (zero on fixed vertices) and, on
    fixed vertices, of their prescribed-velocity rows.
    """
    res = rec.contact
    h = sim.scene.h
    v = res.v
    n = len(v)
    part = _classify_contacts(res, h)
    fixed = np.zeros(n, dtype=bool)
    if sim.fixed_vertices is not None and len(sim.fixed_vertices):
        fixed[sim.fixed_vertices] = True
    A = (sp.diags(sim.mass) + h**2 * sim.sys.L).tocsr()
    A3 = sp.kron(A, sp.identity(3), format="csr")
    free_rows = np.flatnonzero(np.repeat(~fixed, 3))
    fixed_rows = np.flatnonzero(np.repeat(fixed, 3))
    # unknowns: v (3n) | stick xi (3 each) | slide xi_n (1 each)
    cs = res.contacts.contacts
    n_stick, n_slide = len(part.stick), len(part.slide)
    n_unk = 3 * n + 3 * n_stick + n_slide
    rows, cols, vals = [], [], []

    def put(r, c, val):
        rows.append(np.atleast_1d(r))
        cols.append(np.atleast_1d(c))
        vals.append(np.atleast_1d(val).astype(float))

    Af = A3[free_rows].tocoo()
    put(free_rows[Af.row], Af.col, Af.data)
    put(fixed_rows, fixed_rows, np.ones(len(fixed_rows)))
    r = 3 * n
    c = 3 * n
    for k in part.stick:
        i = cs[k].vertex
        dof = 3 * i + np.arange(3)
        put(dof, c + np.arange(3), -np.ones(3))       # -xi in the momentum rows
        put(r + np.arange(3), dof, np.ones(3))        # v_i = 0
        r += 3
        c += 3
    for k in part.slide:
        ck = cs[k]
        i = ck.vertex
        dof = 3 * i + np.arange(3)
        nrm = ck.normal
        vi = v[i]
        vt = vi - (vi @ nrm) * nrm
        vt_norm = np.linalg.norm(vt)
        t = vt / vt_norm
        xin = float(res.contacts.xi[k] @ nrm)
        d = nrm - ck.friction * t
        put(dof, np.full(3, c), -d)
        Pt = np.eye(3) - np.outer(nrm, nrm)
        D = ck.friction * xin * (np.eye(3) - np.outer(t, t)) @ Pt / vt_norm
        put(np.repeat(dof, 3), np.tile(dof, 3), D.reshape(-1))
        put(np.full(3, r), dof, nrm)                  # n . v_i = 0
        r += 1
        c += 1
    J = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_unk, n_unk))
    ybar = np.zeros(n_unk)
    ybar[: 3 * n] = vbar.reshape(-1)
    w = spla.splu(J.T.tocsc()).solve(ybar)
    return w[: 3 * n].reshape(n, 3), fixed, part.borderline


def _activation_adjoint(block, X, mu) -> np.ndarray:
    """``w_k (G_k mu) . dp_k/da_k`` per term."""
    return block.weight * np.einsum("krc,krc->k", block.apply_G(mu), block.activation_jacobian(X))


def _frame_adjoint(sim: Simulator, state: SimState, rec, qbar, vbar, jbar):
    """Pull (q_{n+1}, v_{n+1}, joints_{n+1}) adjoints back through one frame."""
    h = sim.scene.h
    m = sim.mass
    q_n = state.positions
    X = rec.q_pd
    cor = sim.blocks["corotational"]
    omega_bar = np.zeros(len(cor))
    borderline = False
    qbar_n = np.zeros_like(q_n)
    if rec.contact is not None:
        v = rec.contact.v
        vb = vbar + h * qbar
        qbar_n += qbar
        w, fixed, borderline = _contact_adjoint(sim, rec, vb)
        wf = np.where(fixed[:, None], 0.0, w)
        Aw = m[:, None] * wf + h**2 * (sim.sys.L @ wf)
        qpd_bar = Aw / h
        qbar_n -= Aw / h
        qpd_bar[fixed] += w[fixed] / h
        qbar_n[fixed] -= w[fixed] / h
        omega_bar += -h**2 * _weight_sensitivity(cor, wf, v) + h * _weight_sensitivity(cor, wf, X - q_n)
    else:
        qpd_bar = qbar + vbar / h
        qbar_n -= vbar / h

    ps = [b.project(X) for b in sim.sys.blocks]
    tau_bar = None
    if sim.tree is None or not sim.tree.has_rigid:
        K = sim.hessian(X)
        mu = spla.splu(K.T.tocsc()).solve(qpd_bar.reshape(-1)).reshape(-1, 3)
    else:
        H, B = sim.reduced_hessian(X, rec.joints_pd, rec.s, ps)
        zbar = B.matrix.T @ qpd_bar.reshape(-1)
        nj = sim.tree.n_links - 1
        if nj:
            zbar[B.n_dofs - nj:] += jbar
        lam = np.linalg.solve(H.T, zbar)
        mu = (B.matrix @ lam).reshape(-1, 3)
        tau_bar = lam[B.n_dofs - nj:] if nj else np.zeros(0)
    sbar = (m / h**2)[:, None] * mu
    qbar_n += sbar
    vbar_n = h * sbar
    p_cor = ps[list(sim.blocks).index("corotational")]
    omega_bar += -np.einsum("krc,krc->k", cor.apply_G(mu), cor.apply_G(X) - p_cor)
    act_bar = {}
    for key in ("muscle", "pneumatic"):
        if key in sim.blocks:
            per_term = _activation_adjoint(sim.blocks[key], X, mu)
            groups = getattr(sim.scene, f"{key}_groups")
            act_bar[key] = np.bincount(groups, weights=per_term, minlength=sim.scene.n_controls[key])
    if tau_bar is not None and len(sim.scene.torque_links):
        act_bar["torque"] = tau_bar[sim.scene.torque_links - 1]
    return qbar_n, vbar_n, omega_bar, act_bar, borderline


def _near_detection_threshold(sim: Simulator, state: SimState) -> bool:
    """True if some vertex sits within round-off of the contact activation margin."""
    from .contact import CONTACT_MARGIN

    X = state.positions
    mask = np.ones(len(X), dtype=bool)
    if sim.fixed_vertices is not None:
        mask[sim.fixed_vertices] = False
    for col in sim.scene.colliders:
        gap, _ = col.distance(X)
        if np.any(mask & (np.abs(gap - CONTACT_MARGIN) <= _FLIP_EPS)):
            return True
    return False


# --- public gradient API ---------------------------------------------------------------


@dataclass
class GradientResult:
    loss: float
    grads: dict
    potential_subgradient: bool
    store: CheckpointStore
    trajectory: Trajectory

    def vector(self, wrt=GROUPS) -> np.ndarray:
        return np.concatenate([self.grads[g] for g in wrt])


def gradient(scene: Scene, params: ParamSet, spec: LossSpec, wrt=GROUPS, precise: bool = True) -> GradientResult:
    """dL/d(theta1, theta2, x0) by a checkpointed reverse sweep.

    Frames are re-run from their checkpoints in reverse order; per-frame
    intermediates live only while that frame's adjoint is computed.
    """
    wrt = tuple(wrt)
    for g in wrt:
        if g not in GROUPS:
            raise ValueError(f"unknown parameter group {g!r}")
    scene = precise_scene(scene) if precise else scene
    sim = Simulator(scene, params.youngs, params.poisson)
    traj, store = simulate_with_checkpoints(scene, params, sim=sim)
    value, qbar, vbar, jbar = spec.evaluate(sim.mass, traj.final)
    cor = sim.blocks["corotational"]
    omega_bar = np.zeros(len(cor))
    ctrl_bar = {k: np.zeros_like(v) for k, v in params.controls.items()}
    flagged = False
    n_links = None if sim.tree is None else sim.tree.n_links
    for n in reversed(range(len(store))):
        ck = store[n]
        state = ck.state(n_links)
        flagged |= _near_detection_threshold(sim, state)
        _, rec = replay_frame(sim, ck)
        qbar, vbar, wb, ab, border = _frame_adjoint(sim, state, rec, qbar, vbar, jbar)
        flagged |= border
        jbar = np.zeros_like(jbar)
        omega_bar += wb
        for k, a in ab.items():
            ctrl_bar[k][n] += a
    if flagged:
        log.warning("a contact sits at an activation or stick/slide threshold; gradient may be a subgradient")
    grads = {}
    if "theta1" in wrt:
        grads["theta1"] = np.concatenate([ctrl_bar[k].reshape(-1) for k in CONTROL_KEYS if k in ctrl_bar])
    if "theta2" in wrt:
        V = cor.volume
        E, nu = params.youngs, params.poisson
        grads["theta2"] = np.concatenate([omega_bar * V / (2.0 * (1.0 + nu)),
                                          -omega_bar * V * E / (2.0 * (1.0 + nu) ** 2)])
    if "x0" in wrt:
        grads["x0"] = np.concatenate([qbar.reshape(-1), vbar.reshape(-1)])
    return GradientResult(value, grads, flagged, store, traj)


def evaluate_loss(scene: Scene, params: ParamSet, spec: LossSpec, precise: bool = True):
    """Loss of a full forward run; ``nan`` when the run diverges."""
    scene = precise_scene(scene) if precise else scene
    sim = Simulator(scene, params.youngs, params.poisson)
    traj, _ = simulate_with_checkpoints(scene, params, sim=sim)
    if traj.diverged:
        return float("nan")
    return spec.evaluate(sim.mass, traj.final)[0]


def fd_step(value: float, step: float) -> float:
    """Per-parameter step ``step * max(1, |value|)``."""
    return step * max(1.0, abs(value))


def finite_difference_oracle(scene: Scene, params: ParamSet, spec: LossSpec, component, step: float = 1e-5,
                             precise: bool = True) -> float:
    """Central difference ``(L(+) - L(-)) / (2 step_i)`` of one parameter with full re-runs.

    ``component`` is ``(group, index)``.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    group, idx = component
    base = params.vector(group)
    hi = fd_step(base[idx], step)
    plus, minus = base.copy(), base.copy()
    plus[idx] += hi
    minus[idx] -= hi
    lp = evaluate_loss(scene, params.with_vector(group, plus), spec, precise)
    lm = evaluate_loss(scene, params.with_vector(group, minus), spec, precise)
    return (lp - lm) / (2.0 * hi)


def worker_count() -> int:
    """Thread cap from ``SOFTSIM_THREADS`` (default: all cores)."""
    env = os.environ.get("SOFTSIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring invalid SOFTSIM_THREADS=%r", env)
    return os.cpu_count() or 1


def finite_difference_gradient(scene: Scene, params: ParamSet, spec: LossSpec, group: str, indices=None,
                               step: float = 1e-5, precise: bool = True) -> np.ndarray:
    """Several oracle components, evaluated in parallel up to :func:`worker_count`."""
    indices = range(params.vector(group).size) if indices is None else indices
    indices = list(indices)

    def one(i):
        return finite_difference_oracle(scene, params, spec, (group, i), step, precise)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return np.array(list(pool.map(one, indices)))


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Per-component ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
