"""Command-line driver: ``softsim {sim,gradcheck,sysid,control,bound,contact-study}``.

Exit codes: 0 success, 1 validation error (bad flags, bad scene, failed
gradient check), 2 solver divergence during ``sim``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import contact as ct
from .diff import ParamSet, finite_difference_gradient, gradient, relative_error
from .mesh import MeshError
from .optim import OptimConfig, run_control, run_gradient_free_baseline, run_sysid, sysid_problem, write_history
from .scene_io import SceneError, export_trajectory, parse_scene
from .sim import Simulator, contact_study

log = logging.getLogger("softsim")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
GRADCHECK_TOL = 1e-3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="softsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sim", help="run a scene and write its trajectory CSV")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--h", type=float)
    s.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gradcheck", help="compare gradients with central differences")
    g.add_argument("--scene", required=True)
    g.add_argument("--wrt", required=True, choices=("theta1", "theta2", "x0"))
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--max-components", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)

    for name, text in (("sysid", "fit material parameters to the scene's loss target"),
                       ("control", "optimize per-frame actuation toward the scene's loss target")):
        o = sub.add_parser(name, help=text)
        o.add_argument("--scene", required=True)
        o.add_argument("--out", required=True)
        o.add_argument("--episodes", type=int)
        o.add_argument("--seed", type=int)

    b = sub.add_parser("bound", help="print the contact stability bound h_max")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene")
    src.add_argument("--params", nargs=4, type=float, metavar=("TETS", "MU", "EDGE", "DENSITY"),
                     help="identical tets: count, shear modulus, edge length, density")

    c = sub.add_parser("contact-study", help="contact solver convergence versus time step")
    c.add_argument("--scene", required=True)
    c.add_argument("--h-sweep", required=True, help="a:b:n, n values from a to b as multiples of h_max")
    c.add_argument("--absolute", action="store_true", help="read the sweep as seconds, not multiples of h_max")
    c.add_argument("--mode", default="both", choices=("original", "split", "both"))
    c.add_argument("--cap", type=int, default=10_000)
    c.add_argument("--out")
    return p


def _load(path):
    if not os.path.isfile(path):
        raise UsageError(f"scene file not found: {path}")
    return parse_scene(path)


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def cmd_sim(args) -> int:
    scene = _load(args.scene)
    if args.h is not None:
        if not args.h > 0:
            raise UsageError("--h must be positive")
        scene = replace(scene, h=args.h)
    if args.frames is not None:
        if args.frames < 0:
            raise UsageError("--frames must be non-negative")
        scene = replace(scene, frames=args.frames)
    sim = Simulator(scene)
    traj = sim.run(record_states=True)
    out = _outdir(args.out)
    names = None if scene.skeleton is None else [lk.name for lk in scene.skeleton.links[1:]]
    export_trajectory(traj, os.path.join(out, "trajectory.csv"), names)
    print(f"frames {traj.n_frames}  h {scene.h:g}  unconverged {len(traj.unconverged_frames)}")
    if traj.diverged:
        print(f"diverged at frame {traj.n_frames}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _need_loss(scene):
    if scene.loss is None:
        raise UsageError("scene has no [loss] section")
    return scene.loss


def cmd_gradcheck(args) -> int:
    scene = _load(args.scene)
    spec = _need_loss(scene)
    if not args.step > 0:
        raise UsageError("--step must be positive")
    params = ParamSet.from_scene(scene)
    res = gradient(scene, params, spec, wrt=(args.wrt,))
    an = res.grads[args.wrt]
    if an.size == 0:
        raise UsageError(f"scene has no {args.wrt} parameters")
    idx = np.unique(np.linspace(0, an.size - 1, min(an.size, max(1, args.max_components))).astype(int))
    fd = finite_difference_gradient(scene, params, spec, args.wrt, idx, step=args.step)
    floor = max(1e-6 * float(np.abs(fd).max()), 1e-12)
    err = relative_error(an[idx], fd, floor)
    print(f"loss {res.loss:.10g}  wrt {args.wrt}  step {args.step:g}  components {len(idx)}/{an.size}")
    print(f"{'index':>6} {'analytic':>16} {'numeric':>16} {'rel_err':>10}")
    for i, a, n, e in zip(idx, an[idx], fd, err):
        print(f"{i:6d} {a:16.8e} {n:16.8e} {e:10.2e}")
    worst = float(err.max())
    ok = worst <= GRADCHECK_TOL
    if res.potential_subgradient:
        print("warning: a contact sits at a threshold; the gradient may be a subgradient")
    print(f"max relative error {worst:.3e}  {'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_INVALID


def _config(scene, args) -> OptimConfig:
    opt = scene.optimization
    kw = {}
    for key, field_name, conv in (("algorithm", "algorithm", str), ("lr", "lr", float),
                                  ("episodes", "max_episodes", int), ("tol", "tol", float),
                                  ("seed", "seed", int), ("max_step", "max_step", float)):
        if key in opt:
            kw[field_name] = conv(opt[key])
    if args.episodes is not None:
        kw["max_episodes"] = args.episodes
    if args.seed is not None:
        kw["seed"] = args.seed
    return OptimConfig(**kw)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def cmd_sysid(args) -> int:
    scene = _load(args.scene)
    spec = _need_loss(scene)
    cfg = _config(scene, args)
    opt = scene.optimization
    init = ParamSet.from_scene(scene)
    if "init_youngs" in opt:
        vals = np.array(_as_list(opt["init_youngs"]), dtype=float)
        init.youngs = np.broadcast_to(vals, init.youngs.shape).copy()
    elements = _as_list(opt["elements"]) if "elements" in opt else None
    fit_nu = bool(opt.get("fit_poisson", 0))
    res = run_sysid(scene, spec, cfg, init, elements, fit_nu)
    out = _outdir(args.out)
    write_history(os.path.join(out, "history.csv"), res.history)
    with open(os.path.join(out, "params.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tet", "youngs", "poisson"])
        for t, (e, nu) in enumerate(zip(res.params.youngs, res.params.poisson)):
            w.writerow([t, f"{e:.17g}", f"{nu:.17g}"])
    budget = int(opt.get("baseline_budget", 0))
    if budget:
        prob = sysid_problem(scene, spec, init, elements, fit_nu)
        base = run_gradient_free_baseline(prob, budget, float(opt.get("baseline_radius", np.log(10.0))), cfg.seed)
        write_history(os.path.join(out, "baseline.csv"), base)
        print(f"baseline best of {budget}: {base[-1]:.6g}")
    print(f"episodes {len(res.history) - 1}  loss {res.history[0]:.6g} -> {res.history[-1]:.6g}")
    print("youngs " + " ".join(f"{e:.6g}" for e in res.params.youngs))
    return EXIT_OK


def cmd_control(args) -> int:
    scene = _load(args.scene)
    spec = _need_loss(scene)
    cfg = _config(scene, args)
    limit = float(scene.optimization.get("torque_limit", np.inf))
    res = run_control(scene, spec, cfg, torque_limit=limit)
    out = _outdir(args.out)
    write_history(os.path.join(out, "history.csv"), res.history)
    with open(os.path.join(out, "controls.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        keys = [k for k in ("torque", "muscle", "pneumatic") if res.params.controls[k].size]
        w.writerow(["frame"] + [f"{k}{j}" for k in keys for j in range(res.params.controls[k].shape[1])])
        for n in range(res.params.n_frames):
            w.writerow([n] + [f"{x:.17g}" for k in keys for x in res.params.controls[k][n]])
    print(f"episodes {len(res.history) - 1}  loss {res.history[0]:.6g} -> {res.history[-1]:.6g}")
    return EXIT_OK


def cmd_bound(args) -> int:
    if args.params is not None:
        n, mu, edge, rho = args.params
        if n < 1 or min(mu, edge, rho) <= 0:
            raise UsageError("--params needs a positive tet count, stiffness, edge and density")
        h = ct.stability_bound_from_params(int(n), mu, edge, rho)
        print(f"h_max {h:.6e}  (1/{1.0 / h:.1f})")
        return EXIT_OK
    b = ct.stability_bound(_load(args.scene).mesh)
    print(f"h_max {b.h_max:.6e}  (1/{1.0 / b.h_max:.1f})  tets {b.n_tets}  single-tet bound {b.h_single:.6e}")
    return EXIT_OK


def parse_sweep(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"--h-sweep expects a:b:n, got {text!r}")
    try:
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise UsageError(f"--h-sweep expects numbers, got {text!r}") from None
    if not (a > 0 and b > 0 and n >= 1):
        raise UsageError("--h-sweep needs positive bounds and at least one value")
    return np.linspace(a, b, n)


def cmd_contact_study(args) -> int:
    scene = _load(args.scene)
    if not scene.colliders:
        raise UsageError("scene has no colliders")
    sweep = parse_sweep(args.h_sweep)
    h_max = ct.stability_bound(scene.mesh).h_max
    hs = sweep if args.absolute else sweep * h_max
    modes = (ct.ORIGINAL, ct.SPLIT) if args.mode == "both" else (args.mode,)
    _, rows, _ = contact_study(scene, hs, modes, args.cap)
    header = ["h", "h_over_hmax", "mode", "converged", "diverged", "iterations"]
    table = [[f"{r.h:.6e}", f"{r.ratio:.4g}", r.mode, int(r.converged), int(r.diverged), r.iterations] for r in rows]
    print(f"# h_max {h_max:.6e}")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(table)
    if args.out:
        with open(os.path.join(_outdir(args.out), "contact_study.csv"), "w", newline="") as fh:
            cw = csv.writer(fh)
            cw.writerow(header)
            cw.writerows(table)
    return EXIT_OK


COMMANDS = {"sim": cmd_sim, "gradcheck": cmd_gradcheck, "sysid": cmd_sysid, "control": cmd_control,
            "bound": cmd_bound, "contact-study": cmd_contact_study}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, SceneError, MeshError, ValueError) as exc:
        print(f"softsim {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"softsim {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if args.command == "sim" else EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
