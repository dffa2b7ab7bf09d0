"""Plain-text mesh and scene files, and trajectory CSV export.

Mesh files (``.mesh``)::

    nodes N
    x y z            (N lines)
    tets T
    i j k l          (T lines, 0-based vertex indices)

Scene files (``.scene``) are line oriented. ``#`` starts a comment, a
``[section]`` header opens a section and every other non-blank line is one
whitespace-separated record whose first field is a keyword. Sections and
records (``*`` marks a repeatable record):

``[scene]``
    ``name NAME``
``[mesh]``
    ``file PATH`` (relative to the scene file) or inline ``node X Y Z`` * and
    ``tet I J K L`` *
``[material]``
    ``default DENSITY YOUNGS POISSON``; ``element T DENSITY YOUNGS POISSON`` *
``[attachments]``
    ``pin V X Y Z WEIGHT`` *
``[skeleton]``
    ``root NAME fixed|free [R00 R01 .. R22 TX TY TZ]``;
    ``link NAME PARENT rotational|prismatic AX AY AZ PX PY PZ VALUE`` *;
    ``rigid LINK V ...`` * (vertices carried by a link)
``[actuators]``
    ``muscle T FX FY FZ STIFFNESS [GROUP]`` *; ``pneumatic T STIFFNESS [GROUP]`` *;
    ``torque LINK`` *
``[colliders]``
    ``plane PX PY PZ NX NY NZ FRICTION`` *; ``sphere CX CY CZ R FRICTION`` *
``[simulation]``
    ``h F``; ``frames N``; ``gravity GX GY GZ``; ``tol F``; ``max_iters N``;
    ``contact_mode split|original``; ``contact_cap N``
``[initial]``
    ``velocity VX VY VZ``; ``vertex_velocity V VX VY VZ`` *; ``position V X Y Z`` *
``[controls]``
    ``torque|muscle|pneumatic FRAME A1 .. AK`` * (per-frame schedules)
``[loss]``
    ``kind barycenter|vertices|state|joints``; ``target X ...``;
    ``vertices V ...``; ``links NAME ...``
``[optimization]``
    ``KEY VALUE`` * (free-form numbers or words, e.g. ``lr 0.5``)

Floats are written with ``repr`` so a file re-parses to identical values.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .contact import ORIGINAL, SPLIT, Plane, Sphere
from .diff import LossSpec
from .mesh import MeshError, TetMesh
from .sim import Scene, Trajectory
from .skeleton import FREE, PRISMATIC, ROTATIONAL, Joint, KinematicTree, Link, SkeletonError

SECTIONS = ("scene", "mesh", "material", "attachments", "skeleton", "actuators", "colliders",
            "simulation", "initial", "controls", "loss", "optimization")


class SceneError(ValueError):
    """A scene or mesh file is malformed; the message names the line."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line


def _fmt(x) -> str:
    return repr(float(x))


# --- meshes -------------------------------------------------------------------------


def read_mesh(path, **material) -> TetMesh:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    pos, tets = parse_mesh_text(text, path)
    try:
        return TetMesh.create(pos, tets, **material)
    except MeshError as exc:
        raise SceneError(str(exc), path=path) from None


def parse_mesh_text(text, path=None):
    lines = [(i + 1, ln.split("#", 1)[0].split()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, f) for i, f in lines if f]
    it = iter(lines)

    def header(word):
        try:
            no, f = next(it)
        except StopIteration:
            raise SceneError(f"missing '{word}' header", path=path) from None
        if len(f) != 2 or f[0] != word:
            raise SceneError(f"expected '{word} COUNT'", no, path)
        try:
            return int(f[1])
        except ValueError:
            raise SceneError(f"bad count {f[1]!r}", no, path) from None

    def rows(count, arity, conv):
        out = []
        for _ in range(count):
            try:
                no, f = next(it)
            except StopIteration:
                raise SceneError("file ends before the declared count", path=path) from None
            if len(f) != arity:
                raise SceneError(f"expected {arity} fields, got {len(f)}", no, path)
            try:
                out.append([conv(v) for v in f])
            except ValueError:
                raise SceneError(f"bad number in {' '.join(f)!r}", no, path) from None
        return out

    pos = rows(header("nodes"), 3, float)
    tets = rows(header("tets"), 4, int)
    for no, _ in it:
        raise SceneError("unexpected content after the tet list", no, path)
    return np.array(pos, dtype=float).reshape(-1, 3), np.array(tets, dtype=np.int64).reshape(-1, 4)


def write_mesh(mesh: TetMesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(mesh_text(mesh))


def mesh_text(mesh: TetMesh) -> str:
    out = [f"nodes {mesh.n_vertices}"]
    out += [" ".join(_fmt(c) for c in x) for x in mesh.rest_positions]
    out.append(f"tets {mesh.n_tets}")
    out += [" ".join(str(int(i)) for i in t) for t in mesh.tets]
    return "\n".join(out) + "\n"


# --- scene parsing ------------------------------------------------------------------


@dataclass
class _Raw:
    """Records grouped by section, each ``(line, fields)``."""

    sections: dict = field(default_factory=lambda: {s: [] for s in SECTIONS})


def _tokenize(text, path):
    raw = _Raw()
    current = None
    for i, line in enumerate(text.splitlines()):
        no = i + 1
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise SceneError(f"malformed section header {body!r}", no, path)
            name = body[1:-1].strip()
            if name not in SECTIONS:
                raise SceneError(f"unknown section [{name}]", no, path)
            current = name
            continue
        if current is None:
            raise SceneError("record outside any section", no, path)
        raw.sections[current].append((no, body.split()))
    return raw


class _Reader:
    def __init__(self, path):
        self.path = path

    def fail(self, msg, no):
        raise SceneError(msg, no, self.path)

    def arity(self, no, f, n, usage):
        ok = n(len(f)) if callable(n) else len(f) == n
        if not ok:
            self.fail(f"bad arity for '{f[0]}': expected {usage}", no)

    def floats(self, no, vals):
        try:
            return [float(v) for v in vals]
        except ValueError:
            self.fail(f"expected numbers, got {' '.join(vals)!r}", no)

    def ints(self, no, vals):
        try:
            return [int(v) for v in vals]
        except ValueError:
            self.fail(f"expected integers, got {' '.join(vals)!r}", no)

    def index(self, no, value, bound, what):
        if not 0 <= value < bound:
            self.fail(f"{what} {value} does not exist (valid: 0..{bound - 1})", no)
        return value


def parse_scene(path) -> Scene:
    """Read and validate a scene file; every error names its line."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_scene_text(text, path=path, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_scene_text(text, path=None, base_dir=".") -> Scene:
    raw = _tokenize(text, path)
    rd = _Reader(path)
    S = raw.sections

    name = ""
    for no, f in S["scene"]:
        if f[0] != "name":
            rd.fail(f"unknown record '{f[0]}' in [scene]", no)
        rd.arity(no, f, 2, "name NAME")
        name = f[1]

    # mesh
    nodes, tets, mesh_file = [], [], None
    for no, f in S["mesh"]:
        if f[0] == "node":
            rd.arity(no, f, 4, "node X Y Z")
            nodes.append(rd.floats(no, f[1:]))
        elif f[0] == "tet":
            rd.arity(no, f, 5, "tet I J K L")
            tets.append((no, rd.ints(no, f[1:])))
        elif f[0] == "file":
            rd.arity(no, f, 2, "file PATH")
            mesh_file = (no, f[1])
        else:
            rd.fail(f"unknown record '{f[0]}' in [mesh]", no)
    if mesh_file is not None:
        if nodes or tets:
            rd.fail("give either a mesh file or inline nodes/tets, not both", mesh_file[0])
        fpath = os.path.join(base_dir, mesh_file[1])
        try:
            with open(fpath, encoding="utf-8") as fh:
                pos, tet_arr = parse_mesh_text(fh.read(), fpath)
        except OSError as exc:
            rd.fail(f"cannot read mesh file {mesh_file[1]!r}: {exc.strerror}", mesh_file[0])
        tets = [(mesh_file[0], t) for t in tet_arr.tolist()]
    else:
        pos = np.array(nodes, dtype=float).reshape(-1, 3)
    n, n_tets = len(pos), len(tets)
    if n_tets == 0:
        raise SceneError("scene has no tets", path=path)
    for no, t in tets:
        for v in t:
            rd.index(no, v, n, "vertex")

    # material
    rho, E, nu = np.full(n_tets, 1000.0), np.full(n_tets, 1e5), np.full(n_tets, 0.3)
    for no, f in S["material"]:
        if f[0] == "default":
            rd.arity(no, f, 4, "default DENSITY YOUNGS POISSON")
            d, y, p = rd.floats(no, f[1:])
            rho[:], E[:], nu[:] = d, y, p
        elif f[0] == "element":
            rd.arity(no, f, 5, "element T DENSITY YOUNGS POISSON")
            t = rd.index(no, rd.ints(no, f[1:2])[0], n_tets, "tet")
            rho[t], E[t], nu[t] = rd.floats(no, f[2:])
        else:
            rd.fail(f"unknown record '{f[0]}' in [material]", no)
    try:
        mesh = TetMesh.create(pos, [t for _, t in tets], density=rho, youngs=E, poisson=nu)
    except MeshError as exc:
        raise SceneError(str(exc), path=path) from None

    # attachments
    att_v, att_x, att_w = [], [], []
    for no, f in S["attachments"]:
        if f[0] != "pin":
            rd.fail(f"unknown record '{f[0]}' in [attachments]", no)
        rd.arity(no, f, 6, "pin V X Y Z WEIGHT")
        att_v.append(rd.index(no, rd.ints(no, f[1:2])[0], n, "vertex"))
        vals = rd.floats(no, f[2:])
        att_x.append(vals[:3])
        att_w.append(vals[3])

    tree, link_ids = _parse_skeleton(S["skeleton"], rd, mesh, path)

    # actuators
    mus_t, mus_f, mus_k, mus_g = [], [], [], []
    pn_t, pn_k, pn_g = [], [], []
    tq = []
    for no, f in S["actuators"]:
        if f[0] == "muscle":
            rd.arity(no, f, lambda k: k in (6, 7), "muscle T FX FY FZ STIFFNESS [GROUP]")
            mus_t.append(rd.index(no, rd.ints(no, f[1:2])[0], n_tets, "tet"))
            vals = rd.floats(no, f[2:6])
            mus_f.append(vals[:3])
            mus_k.append(vals[3])
            mus_g.append(rd.ints(no, f[6:7])[0] if len(f) == 7 else None)
        elif f[0] == "pneumatic":
            rd.arity(no, f, lambda k: k in (3, 4), "pneumatic T STIFFNESS [GROUP]")
            pn_t.append(rd.index(no, rd.ints(no, f[1:2])[0], n_tets, "tet"))
            pn_k.append(rd.floats(no, f[2:3])[0])
            pn_g.append(rd.ints(no, f[3:4])[0] if len(f) == 4 else None)
        elif f[0] == "torque":
            rd.arity(no, f, 2, "torque LINK")
            if f[1] not in link_ids:
                rd.fail(f"torque actuator references missing link {f[1]!r}", no)
            if link_ids[f[1]] == 0:
                rd.fail(f"torque actuator cannot drive the root link {f[1]!r}", no)
            tq.append(link_ids[f[1]])
        else:
            rd.fail(f"unknown record '{f[0]}' in [actuators]", no)

    def groups(gs, what):
        if all(g is None for g in gs):
            return None
        if any(g is None for g in gs):
            raise SceneError(f"either all or none of the {what} actuators carry a group", path=path)
        return np.array(gs, dtype=np.int64)

    # colliders
    colliders = []
    for no, f in S["colliders"]:
        try:
            if f[0] == "plane":
                rd.arity(no, f, 8, "plane PX PY PZ NX NY NZ FRICTION")
                v = rd.floats(no, f[1:])
                colliders.append(Plane(v[:3], v[3:6], v[6]))
            elif f[0] == "sphere":
                rd.arity(no, f, 6, "sphere CX CY CZ R FRICTION")
                v = rd.floats(no, f[1:])
                colliders.append(Sphere(v[:3], v[3], v[4]))
            else:
                rd.fail(f"unknown record '{f[0]}' in [colliders]", no)
        except SceneError:
            raise
        except ValueError as exc:
            rd.fail(str(exc), no)

    # simulation
    sim = {}
    for no, f in S["simulation"]:
        key = f[0]
        if key in ("h", "tol"):
            rd.arity(no, f, 2, f"{key} VALUE")
            sim[key] = rd.floats(no, f[1:])[0]
            if not sim[key] > 0:
                rd.fail(f"{key} must be positive", no)
        elif key in ("frames", "max_iters", "contact_cap"):
            rd.arity(no, f, 2, f"{key} N")
            sim[key] = rd.ints(no, f[1:])[0]
            if sim[key] < 0:
                rd.fail(f"{key} must be non-negative", no)
        elif key == "gravity":
            rd.arity(no, f, 4, "gravity GX GY GZ")
            sim[key] = np.array(rd.floats(no, f[1:]))
        elif key == "contact_mode":
            rd.arity(no, f, 2, "contact_mode split|original")
            if f[1] not in (SPLIT, ORIGINAL):
                rd.fail(f"unknown contact mode {f[1]!r}", no)
            sim[key] = f[1]
        else:
            rd.fail(f"unknown record '{key}' in [simulation]", no)

    # initial state
    q0 = None
    v0 = None
    for no, f in S["initial"]:
        if f[0] == "velocity":
            rd.arity(no, f, 4, "velocity VX VY VZ")
            v0 = np.tile(rd.floats(no, f[1:]), (n, 1)) if v0 is None else v0
            v0[:] = rd.floats(no, f[1:])
        elif f[0] == "vertex_velocity":
            rd.arity(no, f, 5, "vertex_velocity V VX VY VZ")
            v0 = np.zeros((n, 3)) if v0 is None else v0
            v0[rd.index(no, rd.ints(no, f[1:2])[0], n, "vertex")] = rd.floats(no, f[2:])
        elif f[0] == "position":
            rd.arity(no, f, 5, "position V X Y Z")
            q0 = mesh.rest_positions.copy() if q0 is None else q0
            q0[rd.index(no, rd.ints(no, f[1:2])[0], n, "vertex")] = rd.floats(no, f[2:])
        else:
            rd.fail(f"unknown record '{f[0]}' in [initial]", no)

    scene_kwargs = dict(
        h=sim.get("h", 0.01), frames=sim.get("frames", 100), tol=sim.get("tol", 1e-6),
        max_iters=sim.get("max_iters", 50), contact_cap=sim.get("contact_cap", 1000),
        contact_mode=sim.get("contact_mode", SPLIT),
    )
    if "gravity" in sim:
        scene_kwargs["gravity"] = sim["gravity"]
    try:
        scene = Scene(
            mesh, attachment_vertices=np.array(att_v, dtype=np.int64),
            attachment_targets=np.array(att_x, dtype=float).reshape(-1, 3), attachment_weights=np.array(att_w),
            skeleton=tree,
            muscle_tets=np.array(mus_t, dtype=np.int64), muscle_fibers=np.array(mus_f).reshape(-1, 3),
            muscle_stiffness=np.array(mus_k), muscle_groups=groups(mus_g, "muscle"),
            pneumatic_tets=np.array(pn_t, dtype=np.int64), pneumatic_stiffness=np.array(pn_k),
            pneumatic_groups=groups(pn_g, "pneumatic"),
            torque_links=np.array(tq, dtype=np.int64), colliders=colliders,
            initial_positions=q0, initial_velocity=v0, name=name, **scene_kwargs,
        )
    except ValueError as exc:
        raise SceneError(str(exc), path=path) from None

    scene.controls = _parse_controls(S["controls"], rd, scene)
    scene.loss = _parse_loss(S["loss"], rd, scene, link_ids)
    scene.optimization = _parse_optimization(S["optimization"], rd)
    return scene


def _parse_skeleton(records, rd: _Reader, mesh, path):
    if not records:
        return None, {}
    links, ids, rigid = [], {}, {}
    for no, f in records:
        if f[0] == "root":
            rd.arity(no, f, lambda k: k in (3, 15), "root NAME fixed|free [R00 .. R22 TX TY TZ]")
            if links:
                rd.fail("the root must be declared once, before any link", no)
            if f[2] not in ("fixed", "free"):
                rd.fail(f"root must be 'fixed' or 'free', got {f[2]!r}", no)
            T = np.eye(4)
            if len(f) == 15:
                v = rd.floats(no, f[3:])
                T[:3, :3] = np.reshape(v[:9], (3, 3))
                T[:3, 3] = v[9:]
            links.append([f[1], -1, Joint(FREE, transform=T, fixed=f[2] == "fixed"), no])
            ids[f[1]] = 0
        elif f[0] == "link":
            rd.arity(no, f, 11, "link NAME PARENT rotational|prismatic AX AY AZ PX PY PZ VALUE")
            if not links:
                rd.fail("declare the root before links", no)
            lname, parent, kind = f[1], f[2], f[3]
            if lname in ids:
                rd.fail(f"duplicate link name {lname!r}", no)
            if parent not in ids:
                rd.fail(f"link {lname!r} references missing parent link {parent!r}", no)
            if kind not in (ROTATIONAL, PRISMATIC):
                rd.fail(f"unknown joint kind {kind!r}", no)
            v = rd.floats(no, f[4:])
            try:
                joint = Joint(kind, axis=v[:3], anchor=v[3:6], value=v[6])
            except SkeletonError as exc:
                rd.fail(str(exc), no)
            ids[lname] = len(links)
            links.append([lname, ids[parent], joint, no])
        elif f[0] == "rigid":
            rd.arity(no, f, lambda k: k >= 2, "rigid LINK V ...")
            if f[1] not in ids:
                rd.fail(f"rigid set references missing link {f[1]!r}", no)
            verts = [rd.index(no, v, mesh.n_vertices, "vertex") for v in rd.ints(no, f[2:])]
            rigid.setdefault(ids[f[1]], []).extend(verts)
        else:
            rd.fail(f"unknown record '{f[0]}' in [skeleton]", no)
    if not links:
        raise SceneError("skeleton section has no root", path=path)
    objs = [Link(nm, par, jt, np.array(rigid.get(k, []), dtype=np.int64)) for k, (nm, par, jt, _) in enumerate(links)]
    try:
        tree = KinematicTree.create(objs, mesh.rest_positions)
    except SkeletonError as exc:
        raise SceneError(str(exc), records[0][0], path) from None
    return tree, ids


def _parse_controls(records, rd: _Reader, scene: Scene) -> dict:
    rows = {}
    nk = scene.n_controls
    for no, f in records:
        key = f[0]
        if key not in nk:
            rd.fail(f"unknown control kind {key!r}", no)
        rd.arity(no, f, nk[key] + 2, f"{key} FRAME followed by {nk[key]} values")
        frame = rd.ints(no, f[1:2])[0]
        if frame < 0:
            rd.fail("frame index must be non-negative", no)
        rows.setdefault(key, {})[frame] = (no, rd.floats(no, f[2:]))
    out = {}
    for key, by_frame in rows.items():
        frames = sorted(by_frame)
        if frames != list(range(len(frames))):
            missing = next(i for i in range(len(frames) + 1) if i not in by_frame)
            raise SceneError(f"{key} schedule skips frame {missing}", by_frame[frames[-1]][0], rd.path)
        out[key] = np.array([by_frame[i][1] for i in frames], dtype=float).reshape(len(frames), nk[key])
    return out


def _parse_loss(records, rd: _Reader, scene: Scene, link_ids):
    if not records:
        return None
    vals = {}
    for no, f in records:
        if f[0] not in ("kind", "target", "vertices", "links"):
            rd.fail(f"unknown record '{f[0]}' in [loss]", no)
        rd.arity(no, f, lambda k: k >= 2, f"{f[0]} VALUE ...")
        if f[0] == "kind":
            vals["kind"] = (no, f[1])
        elif f[0] == "target":
            vals["target"] = (no, rd.floats(no, f[1:]))
        elif f[0] == "vertices":
            vals["vertices"] = (no, [rd.index(no, v, scene.mesh.n_vertices, "vertex") for v in rd.ints(no, f[1:])])
        else:
            for nm in f[1:]:
                if nm not in link_ids or link_ids[nm] == 0:
                    rd.fail(f"loss references missing non-root link {nm!r}", no)
            vals["links"] = (no, [link_ids[nm] for nm in f[1:]])
    if "kind" not in vals or "target" not in vals:
        rd.fail("[loss] needs 'kind' and 'target'", records[0][0])
    try:
        return LossSpec(vals["kind"][1], vals["target"][1], vals.get("vertices", (0, None))[1],
                        vals.get("links", (0, None))[1])
    except ValueError as exc:
        rd.fail(str(exc), vals["kind"][0])


def _parse_optimization(records, rd: _Reader) -> dict:
    out = {}
    for no, f in records:
        rd.arity(no, f, lambda k: k >= 2, "KEY VALUE ...")
        vals = []
        for tok in f[1:]:
            try:
                vals.append(int(tok))
            except ValueError:
                try:
                    vals.append(float(tok))
                except ValueError:
                    vals.append(tok)
        out[f[0]] = vals[0] if len(vals) == 1 else vals
    return out


# --- scene serialization ------------------------------------------------------------


def serialize_scene(scene: Scene) -> str:
    """Canonical text of a scene; :func:`parse_scene_text` inverts it."""
    mesh = scene.mesh
    out = []
    if scene.name:
        out += ["[scene]", f"name {scene.name}", ""]
    out.append("[mesh]")
    out += ["node " + " ".join(_fmt(c) for c in x) for x in mesh.rest_positions]
    out += ["tet " + " ".join(str(int(i)) for i in t) for t in mesh.tets]
    out += ["", "[material]"]
    d0, e0, n0 = mesh.density[0], mesh.youngs[0], mesh.poisson[0]
    out.append(f"default {_fmt(d0)} {_fmt(e0)} {_fmt(n0)}")
    for t in range(mesh.n_tets):
        if (mesh.density[t], mesh.youngs[t], mesh.poisson[t]) != (d0, e0, n0):
            out.append(f"element {t} {_fmt(mesh.density[t])} {_fmt(mesh.youngs[t])} {_fmt(mesh.poisson[t])}")
    if len(scene.attachment_vertices):
        out += ["", "[attachments]"]
        for v, x, w in zip(scene.attachment_vertices, scene.attachment_targets, scene.attachment_weights):
            out.append(f"pin {int(v)} " + " ".join(_fmt(c) for c in x) + f" {_fmt(w)}")
    names = []
    if scene.skeleton is not None:
        tree = scene.skeleton
        names = [lk.name for lk in tree.links]
        out += ["", "[skeleton]"]
        for k in tree.order:
            lk = tree.links[k]
            j = lk.joint
            if lk.parent < 0:
                T = j.transform
                extra = ""
                if not np.array_equal(T, np.eye(4)):
                    extra = " " + " ".join(_fmt(c) for c in list(T[:3, :3].reshape(-1)) + list(T[:3, 3]))
                out.append(f"root {lk.name} {'fixed' if j.fixed else 'free'}{extra}")
            else:
                out.append(f"link {lk.name} {names[lk.parent]} {j.kind} "
                           + " ".join(_fmt(c) for c in list(j.axis) + list(j.anchor) + [j.value]))
        for k in tree.order:
            lk = tree.links[k]
            if len(lk.vertices):
                out.append(f"rigid {lk.name} " + " ".join(str(int(v)) for v in lk.vertices))
    if len(scene.muscle_tets) or len(scene.pneumatic_tets) or len(scene.torque_links):
        out += ["", "[actuators]"]
        mg = scene.muscle_groups
        plain_m = np.array_equal(mg, np.arange(len(mg)))
        for i, (t, fib, k) in enumerate(zip(scene.muscle_tets, scene.muscle_fibers, scene.muscle_stiffness)):
            grp = "" if plain_m else f" {int(mg[i])}"
            out.append(f"muscle {int(t)} " + " ".join(_fmt(c) for c in fib) + f" {_fmt(k)}{grp}")
        pg = scene.pneumatic_groups
        plain_p = np.array_equal(pg, np.arange(len(pg)))
        for i, (t, k) in enumerate(zip(scene.pneumatic_tets, scene.pneumatic_stiffness)):
            grp = "" if plain_p else f" {int(pg[i])}"
            out.append(f"pneumatic {int(t)} {_fmt(k)}{grp}")
        for lk in scene.torque_links:
            out.append(f"torque {names[int(lk)]}")
    if scene.colliders:
        out += ["", "[colliders]"]
        for c in scene.colliders:
            if isinstance(c, Plane):
                out.append("plane " + " ".join(_fmt(x) for x in list(c.point) + list(c.normal) + [c.friction]))
            elif isinstance(c, Sphere):
                out.append("sphere " + " ".join(_fmt(x) for x in list(c.center) + [c.radius, c.friction]))
            else:
                raise TypeError(f"cannot serialize collider {type(c).__name__}")
    out += ["", "[simulation]", f"h {_fmt(scene.h)}", f"frames {scene.frames}",
            "gravity " + " ".join(_fmt(g) for g in scene.gravity), f"tol {_fmt(scene.tol)}",
            f"max_iters {scene.max_iters}", f"contact_mode {scene.contact_mode}", f"contact_cap {scene.contact_cap}"]
    init = []
    if scene.initial_velocity is not None:
        v = np.broadcast_to(np.asarray(scene.initial_velocity, dtype=float), (mesh.n_vertices, 3))
        if np.all(v == v[0]):
            init.append("velocity " + " ".join(_fmt(c) for c in v[0]))
        else:
            init += [f"vertex_velocity {i} " + " ".join(_fmt(c) for c in v[i]) for i in range(len(v))]
    if scene.initial_positions is not None:
        q = np.asarray(scene.initial_positions, dtype=float).reshape(-1, 3)
        for i in np.flatnonzero(np.any(q != mesh.rest_positions, axis=1)):
            init.append(f"position {i} " + " ".join(_fmt(c) for c in q[i]))
    if init:
        out += ["", "[initial]"] + init
    sched = [(k, np.asarray(v, dtype=float)) for k, v in scene.controls.items() if np.size(v)]
    if sched:
        out += ["", "[controls]"]
        for key, arr in sched:
            arr = arr.reshape(len(arr), -1)
            out += [f"{key} {i} " + " ".join(_fmt(c) for c in row) for i, row in enumerate(arr)]
    if scene.loss is not None:
        ls = scene.loss
        out += ["", "[loss]", f"kind {ls.kind}", "target " + " ".join(_fmt(c) for c in ls.target)]
        if ls.vertices is not None:
            out.append("vertices " + " ".join(str(int(v)) for v in ls.vertices))
        if ls.links is not None:
            out.append("links " + " ".join(names[int(k)] for k in ls.links))
    if scene.optimization:
        out += ["", "[optimization]"]
        for key, val in scene.optimization.items():
            vals = val if isinstance(val, (list, tuple)) else [val]
            out.append(f"{key} " + " ".join(_fmt(v) if isinstance(v, float) else str(v) for v in vals))
    return "\n".join(out) + "\n"


def write_scene(scene: Scene, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_scene(scene))


# --- trajectories -------------------------------------------------------------------


def trajectory_header(n_vertices: int, joint_names=None) -> list:
    cols = ["frame", "time"]
    cols += [f"q{i}_{c}" for i in range(n_vertices) for c in "xyz"]
    cols += [f"v{i}_{c}" for i in range(n_vertices) for c in "xyz"]
    if joint_names is not None:
        cols += [f"root_R{i}{j}" for i in range(3) for j in range(3)]
        cols += [f"root_t{c}" for c in "xyz"]
        cols += [f"joint_{nm}" for nm in joint_names]
    return cols


def export_trajectory(trajectory: Trajectory, path, joint_names=None):
    """One CSV row per recorded state: frame, time, q, v, then joint coordinates.

    ``joint_names`` (non-root links) labels the joint columns; they are
    written whenever the states carry joint coordinates.
    """
    if trajectory.states is None:
        raise ValueError("trajectory has no recorded states; run with record_states=True")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(trajectory_csv(trajectory, joint_names))


def trajectory_csv(trajectory: Trajectory, joint_names=None) -> str:
    states = trajectory.states
    n = len(states[0].q) // 3 if states else 0
    has_joints = bool(states) and states[0].joints is not None
    if has_joints and joint_names is None:
        joint_names = [str(k) for k in range(1, len(states[0].joints.values))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trajectory_header(n, joint_names if has_joints else None))
    for st in states:
        row = [str(st.frame_index), f"{st.frame_index * trajectory.h:.17g}"]
        row += [f"{x:.17g}" for x in st.q]
        row += [f"{x:.17g}" for x in st.v]
        if has_joints:
            row += [f"{x:.17g}" for x in st.joints.as_vector()]
        w.writerow(row)
    return buf.getvalue()


@dataclass
class TrajectoryTable:
    frames: np.ndarray
    times: np.ndarray
    q: np.ndarray
    v: np.ndarray
    joints: np.ndarray | None
    columns: list


def import_trajectory(path) -> TrajectoryTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trajectory file")
    header, body = rows[0], rows[1:]
    nq = sum(1 for c in header if c.startswith("q"))
    data = np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), len(header))
    q = data[:, 2:2 + nq]
    v = data[:, 2 + nq:2 + 2 * nq]
    joints = data[:, 2 + 2 * nq:] if len(header) > 2 + 2 * nq else None
    return TrajectoryTable(data[:, 0].astype(np.int64), data[:, 1], q, v, joints, header)
