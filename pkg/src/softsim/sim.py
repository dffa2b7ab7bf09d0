"""Scenes and the frame-by-frame simulator combining PD, skeletons, actuators and contact."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import contact as ct
from .energy import attachment_block, corotational_block, muscle_block, pneumatic_block
from .mesh import SimState, TetMesh, lumped_mass
from .pd import GlobalSystem, SolverConfig, local_step
from .skeleton import (
    JointState,
    KinematicTree,
    apply_increment,
    assemble_B,
    fk_curvature,
    pad_torques,
    place_rigid,
    reduced_solve_positions,
)

log = logging.getLogger(__name__)

MUSCLE_RANGE = (0.0, 1.0)
PNEUMATIC_RANGE = (0.1, 10.0)


class SimulationDiverged(RuntimeError):
    pass


@dataclass
class Scene:
    """Everything needed to run a simulation.

    Control schedules are (frames, K) arrays keyed by ``"muscle"``,
    ``"pneumatic"`` and ``"torque"``; missing schedules default to muscles
    relaxed (0), pneumatic cells at rest volume (1) and zero torque.
    ``external_force`` is an optional ``f(frame_index) -> (N, 3)`` hook.
    ``muscle_groups`` / ``pneumatic_groups`` map each term to a control
    column so several tets can share one activation (default: one each).
    """

    mesh: TetMesh
    h: float = 0.01
    frames: int = 100
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    tol: float = 1e-6
    max_iters: int = 50
    attachment_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    attachment_targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    attachment_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    skeleton: KinematicTree | None = None
    muscle_tets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    muscle_fibers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    muscle_stiffness: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pneumatic_tets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pneumatic_stiffness: np.ndarray = field(default_factory=lambda: np.zeros(0))
    muscle_groups: np.ndarray | None = None
    pneumatic_groups: np.ndarray | None = None
    torque_links: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    colliders: list = field(default_factory=list)
    contact_mode: str = ct.SPLIT
    contact_cap: int = 1000
    initial_positions: np.ndarray | None = None
    initial_velocity: np.ndarray | None = None
    controls: dict = field(default_factory=dict)
    external_force: object = None
    newton_polish: int = 0
    loss: object = None
    optimization: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("time step h must be positive")
        if self.frames < 0:
            raise ValueError("frame count must be non-negative")
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        self.attachment_vertices = np.asarray(self.attachment_vertices, dtype=np.int64).reshape(-1)
        self.attachment_targets = np.asarray(self.attachment_targets, dtype=float).reshape(-1, 3)
        self.attachment_weights = np.broadcast_to(
            np.asarray(self.attachment_weights, dtype=float), self.attachment_vertices.shape).copy()
        self.muscle_tets = np.asarray(self.muscle_tets, dtype=np.int64).reshape(-1)
        self.muscle_fibers = np.asarray(self.muscle_fibers, dtype=float).reshape(-1, 3)
        self.muscle_stiffness = np.broadcast_to(
            np.asarray(self.muscle_stiffness, dtype=float), self.muscle_tets.shape).copy()
        self.pneumatic_tets = np.asarray(self.pneumatic_tets, dtype=np.int64).reshape(-1)
        self.pneumatic_stiffness = np.broadcast_to(
            np.asarray(self.pneumatic_stiffness, dtype=float), self.pneumatic_tets.shape).copy()
        self.torque_links = np.asarray(self.torque_links, dtype=np.int64).reshape(-1)
        for key in ("muscle", "pneumatic"):
            terms = getattr(self, f"{key}_tets")
            grp = getattr(self, f"{key}_groups")
            grp = np.arange(len(terms)) if grp is None else np.asarray(grp, dtype=np.int64).reshape(-1)
            if len(grp) != len(terms):
                raise ValueError(f"one {key} group index per {key} tet")
            if grp.size and (grp.min() < 0 or set(np.unique(grp)) != set(range(grp.max() + 1))):
                raise ValueError(f"{key} groups must number 0..K-1 without gaps")
            setattr(self, f"{key}_groups", grp)
        n = self.mesh.n_vertices
        for name, idx, bound in (
            ("attachment vertex", self.attachment_vertices, n),
            ("muscle tet", self.muscle_tets, self.mesh.n_tets),
            ("pneumatic tet", self.pneumatic_tets, self.mesh.n_tets),
        ):
            if idx.size and (idx.min() < 0 or idx.max() >= bound):
                raise ValueError(f"{name} index out of range")
        if len(self.attachment_targets) != len(self.attachment_vertices):
            raise ValueError("one attachment target per attachment vertex")
        if len(self.muscle_fibers) != len(self.muscle_tets):
            raise ValueError("one fiber direction per muscle tet")
        if self.torque_links.size:
            if self.skeleton is None:
                raise ValueError("torque actuators need a skeleton")
            if self.torque_links.min() < 1 or self.torque_links.max() >= self.skeleton.n_links:
                raise ValueError("torque actuators must bind non-root links")
        if self.contact_mode not in (ct.ORIGINAL, ct.SPLIT):
            raise ValueError(f"unknown contact mode {self.contact_mode!r}")

    # -- convenience --

    @property
    def n_controls(self) -> dict:
        return {"muscle": _n_groups(self.muscle_groups), "pneumatic": _n_groups(self.pneumatic_groups),
                "torque": len(self.torque_links)}

    def default_controls(self, frames=None) -> dict:
        frames = self.frames if frames is None else frames
        out = {}
        for key, k in self.n_controls.items():
            base = 1.0 if key == "pneumatic" else 0.0
            sched = self.controls.get(key)
            arr = np.full((frames, k), base)
            if sched is not None and k:
                sched = np.asarray(sched, dtype=float).reshape(-1, k)
                m = min(frames, len(sched))
                arr[:m] = sched[:m]
                if m < frames and len(sched):
                    arr[m:] = sched[-1]
            out[key] = arr
        return out

    def initial_state(self) -> SimState:
        q = self.mesh.rest_positions if self.initial_positions is None else self.initial_positions
        q = np.array(q, dtype=float).reshape(-1, 3)
        if self.initial_velocity is None:
            v = np.zeros_like(q)
        else:
            v = np.broadcast_to(np.asarray(self.initial_velocity, dtype=float), q.shape).copy()
        js = None
        if self.skeleton is not None:
            js = self.skeleton.initial_state()
            q = place_rigid(self.skeleton, js, q)
        return SimState(q.reshape(-1), v.reshape(-1), 0, js)


def _n_groups(groups) -> int:
    return int(groups.max()) + 1 if len(groups) else 0


@dataclass
class FrameRecord:
    """Intermediates of one frame, recomputed on demand by the backward pass."""

    s: np.ndarray
    q_pd: np.ndarray
    joints_pd: JointState | None
    projections: list
    pd_iterations: int
    pd_converged: bool
    contacts: ct.ContactSet | None
    contact: ct.ContactResult | None
    torques: np.ndarray

    def float_count(self) -> int:
        n = self.s.size + self.q_pd.size + sum(p.size for p in self.projections)
        if self.contact is not None:
            n += self.contact.v.size + self.contact.contacts.xi.size
        return n


@dataclass
class Trajectory:
    """Result of a run. ``states`` holds every frame only when recording was requested."""

    final: SimState
    h: float
    n_frames: int
    states: list | None = None
    diverged: bool = False
    unconverged_frames: list = field(default_factory=list)

    @property
    def time(self) -> float:
        return self.n_frames * self.h


class Simulator:
    """Builds the prefactorized system for a scene and advances frames.

    ``youngs``/``poisson`` override the mesh materials per element (used by
    system identification); changing them rebuilds the factorization.
    """

    def __init__(self, scene: Scene, youngs=None, poisson=None):
        self.scene = scene
        mesh = scene.mesh
        if youngs is not None or poisson is not None:
            mesh = mesh.with_materials(youngs=youngs, poisson=poisson)
        self.mesh = mesh
        self.mass = lumped_mass(mesh).vertex_mass
        self.blocks = {"corotational": corotational_block(mesh)}
        if len(scene.muscle_tets):
            self.blocks["muscle"] = muscle_block(mesh, scene.muscle_tets, scene.muscle_fibers, scene.muscle_stiffness)
        if len(scene.pneumatic_tets):
            self.blocks["pneumatic"] = pneumatic_block(mesh, scene.pneumatic_tets, scene.pneumatic_stiffness)
        if len(scene.attachment_vertices):
            self.blocks["attachment"] = attachment_block(
                scene.attachment_vertices, scene.attachment_targets, scene.attachment_weights)
        f_ext = self.mass[:, None] * scene.gravity
        self.sys = GlobalSystem.build(self.mass, list(self.blocks.values()), scene.h, f_ext)
        self.cfg = SolverConfig(h=scene.h, max_local_global_iters=scene.max_iters, convergence_tol=scene.tol)
        self.tree = scene.skeleton
        self.fixed_vertices = None if self.tree is None else self.tree.rigid_vertices

    # -- per-frame pieces --

    def external_force(self, frame: int) -> np.ndarray:
        f = self.sys.f_ext
        if self.scene.external_force is not None:
            f = f + np.asarray(self.scene.external_force(frame), dtype=float).reshape(-1, 3)
        return f

    def set_activations(self, row: dict):
        """Load one frame's muscle and pneumatic activations into the term blocks."""
        if "muscle" in self.blocks:
            self.blocks["muscle"].activation[:] = np.asarray(row["muscle"])[self.scene.muscle_groups]
        if "pneumatic" in self.blocks:
            self.blocks["pneumatic"].activation[:] = np.asarray(row["pneumatic"])[self.scene.pneumatic_groups]

    def torques(self, row: dict) -> np.ndarray | None:
        """Generalized rigid forces (root wrench zero) for one frame's torque controls."""
        if self.tree is None:
            return None
        tau = np.zeros(self.tree.n_links - 1)
        if len(self.scene.torque_links):
            np.add.at(tau, self.scene.torque_links - 1, row["torque"])
        return pad_torques(self.tree, tau)

    def predict(self, state: SimState, frame: int) -> np.ndarray:
        h = self.scene.h
        return state.positions + h * state.velocities + h**2 * self.external_force(frame) / self.mass[:, None]

    def gradient_of_objective(self, X, s, ps=None) -> np.ndarray:
        """``(M/h^2)(q - s) + L q - J p`` at ``X`` (projections refreshed if not given)."""
        ps = local_step(self.sys.blocks, X) if ps is None else ps
        return (self.mass / self.scene.h**2)[:, None] * (X - s) + self.sys.L @ X - self.sys.Jp(ps)

    def hessian(self, X) -> sp.csc_matrix:
        """``M/h^2 + d^2E/dq^2`` on flat 3N DoFs."""
        n3 = 3 * len(self.mass)
        parts = [b.hessian_triplets(X) for b in self.sys.blocks if len(b)]
        rows = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
        vals = np.concatenate([p[2] for p in parts])
        K = sp.csc_matrix((vals, (rows, cols)), shape=(n3, n3))
        return (K + sp.diags(np.repeat(self.mass, 3) / self.scene.h**2)).tocsc()

    def reduced_hessian(self, X, js, s, ps=None):
        """``H = B^T K B + C`` and ``B`` at a skeleton configuration."""
        B = assemble_B(self.tree, js)
        K = self.hessian(X)
        H = (B.matrix.T @ K @ B.matrix).toarray()
        g = self.gradient_of_objective(X, s, ps)
        H[B.rigid_slice, B.rigid_slice] += fk_curvature(self.tree, js, g, B)
        return H, B

    def newton_polish(self, X, js, s, tau, iters: int):
        """Newton steps on the stationarity condition, accepted while the residual drops."""
        for _ in range(iters):
            g = self.gradient_of_objective(X, s)
            if self.tree is None or not self.tree.has_rigid:
                r = g.reshape(-1)
                if np.abs(r).max() <= 1e-14 * (np.abs(self.mass[:, None] * s).max() / self.scene.h**2 + 1):
                    break
                dq = spla.splu(self.hessian(X)).solve(-r)
                X_new, js_new = X + dq.reshape(-1, 3), js
                r_new = self.gradient_of_objective(X_new, s).reshape(-1)
            else:
                H, B = self.reduced_hessian(X, js, s)
                r = B.matrix.T @ g.reshape(-1)
                r[B.rigid_slice] -= tau
                dz = np.linalg.solve(H, -r)
                X_new = X.copy()
                dv = self.tree.deformable_vertices
                X_new[dv] += dz[: B.n_deformable_dofs].reshape(-1, 3)
                js_new = apply_increment(self.tree, js, dz[B.n_deformable_dofs:])
                X_new = place_rigid(self.tree, js_new, X_new)
                r_new = assemble_B(self.tree, js_new).matrix.T @ self.gradient_of_objective(X_new, s).reshape(-1)
                r_new[B.rigid_slice] -= tau
            if not np.linalg.norm(r_new) < np.linalg.norm(r):
                break
            X, js = X_new, js_new
        return X, js

    def advance(self, state: SimState, controls: dict, frame: int | None = None):
        """One frame from ``state`` using row ``frame`` of the control schedules."""
        frame = state.frame_index if frame is None else frame
        return self.advance_row(state, {k: v[frame] for k, v in controls.items()}, frame)

    def advance_row(self, state: SimState, row: dict, frame: int):
        """One frame with explicit per-frame controls; returns ``(new_state, FrameRecord)``."""
        h = self.scene.h
        self.set_activations(row)
        tau = self.torques(row)
        s = self.predict(state, frame)
        q_n = state.positions
        X0 = s if self.tree is None else place_rigid(self.tree, state.joints, s)
        X, js, info = reduced_solve_positions(self.sys, s, self.cfg, self.tree, state.joints, X0=X0, tau=tau)
        if self.scene.newton_polish:
            X, js = self.newton_polish(X, js, s, tau, self.scene.newton_polish)
            info.projections = local_step(self.sys.blocks, X)
        contacts = result = None
        X_out = X
        if self.scene.colliders:
            contacts = ct.detect_contacts(q_n, self.scene.colliders, exclude=self.fixed_vertices)
            if len(contacts):
                b = ct.contact_rhs(self.sys, s, q_n, info.projections)
                v_pd = (X - q_n) / h
                result = ct.solve_contact_velocities(
                    self.sys, b, contacts, self.scene.contact_mode, self.scene.contact_cap,
                    v0=v_pd, fixed=self.fixed_vertices)
                X_out = q_n + h * result.v
        v = (X_out - q_n) / h
        converged = info.converged and (result is None or result.converged)
        new = SimState(X_out.reshape(-1), v.reshape(-1), state.frame_index + 1, js, converged)
        rec = FrameRecord(s, X, js, info.projections, info.iterations, info.converged, contacts, result,
                          np.zeros(0) if tau is None else tau)
        return new, rec

    def run(self, controls: dict | None = None, frames: int | None = None, state: SimState | None = None,
            record_states: bool = False, callback=None) -> Trajectory:
        frames = self.scene.frames if frames is None else frames
        controls = self.scene.default_controls(frames) if controls is None else controls
        state = self.scene.initial_state() if state is None else state
        states = [state.copy()] if record_states else None
        unconverged = []
        diverged = False
        for n in range(frames):
            new, rec = self.advance(state, controls, n)
            if callback is not None:
                callback(n, state, new, rec)
            if not new.is_finite() or (rec.contact is not None and rec.contact.diverged):
                diverged = True
                log.warning("simulation diverged at frame %d", n)
                state = new
                if record_states:
                    states.append(new.copy())
                break
            if not new.converged:
                unconverged.append(n)
            state = new
            if record_states:
                states.append(new.copy())
        return Trajectory(state, self.scene.h, state.frame_index, states, diverged, unconverged)


def barycenter(mass, X) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    return (mass[:, None] * X).sum(axis=0) / mass.sum()


def ballistic_center(c0, v0, gravity, h, n) -> np.ndarray:
    """Center of mass after ``n`` implicit-Euler frames of free flight.

    The discrete recurrence ``c_{k+1} = c_k + h v_k + h^2 g`` gives
    ``c_n = c_0 + n h v_0 + h^2 g n (n + 1) / 2``, which differs from the
    continuous ``1/2 g t^2`` by ``h g t / 2``.
    """
    return np.asarray(c0) + n * h * np.asarray(v0) + h**2 * np.asarray(gravity) * n * (n + 1) / 2.0


def joint_values(state: SimState) -> np.ndarray:
    return np.zeros(0) if state.joints is None else state.joints.values[1:].copy()


@dataclass
class StudyRow:
    h: float
    ratio: float
    mode: str
    converged: bool
    diverged: bool
    iterations: int


def contact_study(scene: Scene, hs, modes=(ct.ORIGINAL, ct.SPLIT), cap: int = 10_000):
    """Contact-iteration behaviour versus time step for the scene's first frame.

    Returns ``(h_max, rows, velocities)`` where ``velocities[(h, mode)]`` is
    the converged velocity (or ``None``).
    """
    bound = ct.stability_bound(scene.mesh).h_max
    rows, vel = [], {}
    for h in hs:
        sc = replace(scene, h=float(h))
        sim = Simulator(sc)
        state = sc.initial_state()
        s = sim.predict(state, 0)
        X, js, info = reduced_solve_positions(sim.sys, s, sim.cfg, sim.tree, state.joints,
                                              tau=sim.torques({k: v[0] for k, v in sc.default_controls(1).items()}))
        contacts = ct.detect_contacts(state.q, sc.colliders, exclude=sim.fixed_vertices)
        b = ct.contact_rhs(sim.sys, s, state.q, info.projections)
        for mode in modes:
            r = ct.solve_contact_velocities(sim.sys, b, contacts, mode, cap, v0=(X - state.positions) / h,
                                            fixed=sim.fixed_vertices)
            rows.append(StudyRow(float(h), float(h / bound), mode, r.converged, r.diverged, r.iterations))
            vel[float(h), mode] = r.v if r.converged else None
    return bound, rows, vel
