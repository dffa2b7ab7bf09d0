"""Acceptance suite: twelve end-to-end criteria, each with its tolerance and time limit.

Every criterion prints one ``PASS``/``FAIL`` line; the lines are repeated in
the pytest terminal summary. Run directly (``python3 tests/test_acceptance.py``)
to get only the report.
"""

import io
import sys
import time
from contextlib import redirect_stdout
from dataclasses import replace
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))

from scenes import random_drop_scene, worst_violations  # noqa: E402
from trees import chain, fd_jacobian_error, random_tree  # noqa: E402

from softsim import contact as ct  # noqa: E402
from softsim import diff, optim  # noqa: E402
from softsim import energy as en  # noqa: E402
from softsim import pd  # noqa: E402
from softsim import skeleton as sk  # noqa: E402
from softsim.cli import main as cli_main  # noqa: E402
from softsim.energy import attachment_block, corotational_block  # noqa: E402
from softsim.fixtures import cube_on_ground, free_fall, two_tet_bar  # noqa: E402
from softsim.mesh import SimState, box_mesh, lumped_mass  # noqa: E402
from softsim.scene_io import parse_scene  # noqa: E402
from softsim.sim import Simulator, barycenter, ballistic_center, contact_study  # noqa: E402

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
REPORT = []


def _report(number, title, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}  [{elapsed:.2f} s / limit {limit:g} s]"
    REPORT.append(line)
    print(line)
    return ok


def _timed(fn):
    t0 = time.perf_counter()
    ok, detail = fn()
    return ok, detail, time.perf_counter() - t0


# --- 1 ------------------------------------------------------------------------------------


def _c1():
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli_main(["bound", "--scene", str(FIXTURES / "bound.scene")])
    h = float(buf.getvalue().split()[1])
    rel = abs(h - 1 / 1934) / (1 / 1934)
    return code == 0 and rel <= 5e-3, f"h_max = {h:.6e} = 1/{1 / h:.1f}, off 1/1934 by {100 * rel:.3f}%"


def test_c01_stability_bound():
    assert _report(1, "bound reproduces 1/1934", *_timed(_c1), limit=1.0)


# --- 2 ------------------------------------------------------------------------------------


def _c2():
    scene = cube_on_ground()
    h_max = ct.stability_bound(scene.mesh).h_max
    _, rows, vel = contact_study(scene, [10 * h_max, 0.5 * h_max], cap=10_000)
    r = {(round(row.ratio, 6), row.mode): row for row in rows}
    orig, split = r[10.0, ct.ORIGINAL], r[10.0, ct.SPLIT]
    lo_o, lo_s = r[0.5, ct.ORIGINAL], r[0.5, ct.SPLIT]
    ok = (orig.diverged or not orig.converged) and split.converged and split.iterations <= 500
    ok &= lo_o.converged and lo_s.converged
    gap = np.inf
    if ok:
        gap = float(np.abs(vel[float(0.5 * h_max), ct.ORIGINAL] - vel[float(0.5 * h_max), ct.SPLIT]).max())
        ok &= gap <= 1e-6
    detail = (f"10 h_max: original {'diverged' if orig.diverged else 'stalled'} after {orig.iterations}, "
              f"split converged in {split.iterations}; 0.5 h_max: {lo_o.iterations}/{lo_s.iterations} sweeps, "
              f"max|v_orig - v_split| = {gap:.1e}")
    return ok, detail


def test_c02_split_beats_original():
    assert _report(2, "split iteration stable past the bound", *_timed(_c2), limit=30.0)


# --- 3 ------------------------------------------------------------------------------------


def _c3():
    rng = np.random.default_rng(2024)
    worst = {"xi_n": 0.0, "penetration_velocity": 0.0, "cone": 0.0, "stick_slip": 0.0}
    contacts = 0
    for _ in range(100):
        w, counts = worst_violations(random_drop_scene(rng))
        contacts += counts["contacts"]
        for k in worst:
            worst[k] = max(worst[k], w[k])
    ok = (worst["xi_n"] <= 0.0 and worst["penetration_velocity"] <= 1e-8 and worst["cone"] <= 1e-6
          and worst["stick_slip"] <= 1e-6 and contacts > 0)
    detail = f"{contacts} contacts; worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return ok, detail


def test_c03_coulomb_law():
    assert _report(3, "Coulomb law at convergence, 100 scenes", *_timed(_c3), limit=120.0)


# --- 4 ------------------------------------------------------------------------------------


def _c4():
    rng = np.random.default_rng(7)
    err = max(fd_jacobian_error(random_tree(rng, max_depth=6)) for _ in range(50))
    counts = {n: sk.assemble_B(chain(n)).mult_count for n in (8, 16, 32)}
    ratios = [counts[16] / counts[8], counts[32] / counts[16]]
    ok = err <= 1e-6 and all(abs(r - 4.0) <= 0.15 * 4.0 for r in ratios)
    return ok, f"max |B - FD| = {err:.1e} over 50 trees; count ratios {ratios[0]:.3f}, {ratios[1]:.3f}"


def test_c04_jacobian():
    assert _report(4, "B matches finite differences, O(N^2) products", *_timed(_c4), limit=60.0)


# --- 5 ------------------------------------------------------------------------------------


def _c5():
    rng = np.random.default_rng(11)
    T = np.eye(4)
    orth = det = 0.0
    for _ in range(1000):
        T = sk.rigid_local_step(T, np.concatenate([rng.normal(scale=0.5, size=3), rng.normal(size=3)]))
        R = T[:3, :3]
        orth = max(orth, float(np.linalg.norm(R.T @ R - np.eye(3))))
        det = max(det, abs(float(np.linalg.det(R)) - 1.0))
    return orth < 1e-9 and det <= 1e-9, f"max ||R^T R - I||_F = {orth:.1e}, max |det - 1| = {det:.1e}"


def test_c05_so3():
    assert _report(5, "rotations stay in SO(3)", *_timed(_c5), limit=10.0)


# --- 6 ------------------------------------------------------------------------------------


def _c6():
    mesh = box_mesh((2, 2, 1), (0.2, 0.2, 0.1), youngs=1e5)
    mass = lumped_mass(mesh).vertex_mass
    sys0 = pd.GlobalSystem.build(mass, [corotational_block(mesh)], 0.01, np.zeros((mesh.n_vertices, 3)))
    cfg = pd.SolverConfig()
    state = SimState.at_rest(mesh)
    drift = 0.0
    for _ in range(100):
        new = pd.step(state, sys0, cfg)
        drift = max(drift, float(np.abs(new.q - state.q).max()))
        state = new
    pins = np.flatnonzero(mesh.rest_positions[:, 2] < 1e-9)
    att = attachment_block(pins, mesh.rest_positions[pins], np.full(len(pins), 1e4))
    sys1 = pd.GlobalSystem.build(mass, [corotational_block(mesh), att], 0.01,
                                 mass[:, None] * np.array([0.0, 0.0, -9.81]))
    rng = np.random.default_rng(3)
    rise = -np.inf
    for _ in range(20):
        s = mesh.rest_positions + 0.02 * rng.normal(size=mesh.rest_positions.shape)
        _, info = pd.solve_positions(sys1, s, pd.SolverConfig(max_local_global_iters=40), record=True)
        hist = np.array(info.history)
        rise = max(rise, float((np.diff(hist) / np.abs(hist[:-1])).max()))
    ok = drift <= 1e-12 and rise <= 1e-12
    return ok, f"rest drift {drift:.1e} per frame; largest relative objective increase {rise:.1e}"


def test_c06_pd_fixed_point_and_monotone():
    assert _report(6, "PD rest state fixed, objective monotone", *_timed(_c6), limit=30.0)


# --- 7 ------------------------------------------------------------------------------------


def _c7():
    scene = free_fall(frames=100)
    sim = Simulator(scene)
    err = 0.0
    c0 = barycenter(sim.mass, scene.initial_state().q)
    v0 = np.asarray(scene.initial_velocity)

    def cb(n, state, new, rec):
        nonlocal err
        want = ballistic_center(c0, v0, scene.gravity, scene.h, n + 1)
        err = max(err, float(np.abs(barycenter(sim.mass, new.q) - want).max()))

    traj = sim.run(callback=cb)
    return traj.n_frames == 100 and err < 1e-8, f"max barycenter error {err:.1e} m over {traj.n_frames} frames"


def test_c07_momentum():
    assert _report(7, "free fall follows the ballistic parabola", *_timed(_c7), limit=10.0)


# --- 8 ------------------------------------------------------------------------------------


def _gradcheck(scene, params, spec, group):
    g = diff.gradient(scene, params, spec, wrt=(group,)).grads[group]
    fd = diff.finite_difference_gradient(scene, params, spec, group)
    return float(diff.relative_error(g, fd, floor=max(1e-6 * np.abs(fd).max(), 1e-12)).max())


def _c8():
    bar = parse_scene(FIXTURES / "bar_sysid.scene")
    e2 = _gradcheck(bar, diff.ParamSet.from_scene(bar), bar.loss, "theta2")
    pend = parse_scene(FIXTURES / "pendulum.scene")
    pp = diff.ParamSet.from_scene(pend)
    pp.controls["torque"][:] = 0.05 * np.cos(np.arange(pend.frames))[:, None]
    e1 = _gradcheck(pend, pp, pend.loss, "theta1")
    ff = parse_scene(FIXTURES / "free_fall.scene")
    fspec = diff.LossSpec("vertices", ff.mesh.rest_positions.reshape(-1))
    e0 = _gradcheck(ff, diff.ParamSet.from_scene(ff), fspec, "x0")
    ok = max(e0, e1, e2) <= 1e-3
    return ok, f"max relative error theta2 {e2:.1e}, theta1 {e1:.1e}, x0 {e0:.1e}"


def test_c08_gradients():
    assert _report(8, "gradients match central differences", *_timed(_c8), limit=120.0)


# --- 9 ------------------------------------------------------------------------------------


def _c9():
    scene = free_fall()
    stores = {}
    for n in (10, 200):
        _, stores[n] = diff.simulate_with_checkpoints(scene, diff.ParamSet.from_scene(scene, n))
    size = stores[10].checkpoint_floats
    const = stores[10].retained_floats - 10 * size
    bound = 1.05 * (200 * size + const)
    got = stores[200].retained_floats
    ok = got <= bound and stores[200].peak_transient_floats == stores[10].peak_transient_floats
    return ok, (f"retained {got} floats at 200 frames vs bound {bound:.0f} (state {size}, constant {const}); "
                f"peak transient {stores[200].peak_transient_floats} at both lengths")


def test_c09_checkpoint_memory():
    assert _report(9, "checkpoint memory linear in frames", *_timed(_c9), limit=60.0)


# --- 10 -----------------------------------------------------------------------------------


def _c10():
    scene = parse_scene(FIXTURES / "bar_sysid.scene")
    truth = two_tet_bar().mesh.youngs
    res = optim.run_sysid(scene, scene.loss, optim.OptimConfig(max_episodes=50))
    h = res.history
    at10 = h[min(10, len(h) - 1)]
    reduction = h[0] / at10
    e_err = float(np.abs(res.params.youngs / truth - 1).max())
    budget = int(scene.optimization.get("baseline_budget", 200))
    base = optim.run_gradient_free_baseline(optim.sysid_problem(scene, scene.loss), budget, radius=np.log(10.0))
    ok = reduction >= 10 and e_err <= 0.05 and base[-1] > at10
    return ok, (f"loss {h[0]:.3g} -> {at10:.3g} after 10 episodes ({reduction:.0f}x); E error {100 * e_err:.2g}% "
                f"after {len(h) - 1} episodes; random search best of {budget}: {base[-1]:.3g}")


def test_c10_sysid():
    assert _report(10, "sys-id beats random search", *_timed(_c10), limit=120.0)


# --- 11 -----------------------------------------------------------------------------------


def _c11():
    scene = free_fall(frames=50)
    root = sk.Link("root", -1, sk.Joint(sk.FREE, fixed=True), np.zeros(0, dtype=np.int64))
    with_tree = replace(scene, skeleton=sk.KinematicTree.create([root], scene.mesh.rest_positions))
    a = Simulator(scene).run(record_states=True)
    b = Simulator(with_tree).run(record_states=True)
    same = all(np.array_equal(x.q, y.q) and np.array_equal(x.v, y.v) for x, y in zip(a.states, b.states))
    same &= len(a.states) == len(b.states) == 51
    # the reduced global solve itself, forced on, agrees with the plain one to round-off
    sim = Simulator(with_tree)
    st = with_tree.initial_state()
    s = sim.predict(st, 0)
    X1, _, _ = sk.reduced_solve_positions(sim.sys, s, sim.cfg, sim.tree, st.joints)
    X2, _, _ = sk.reduced_solve_positions(sim.sys, s, sim.cfg, sim.tree, st.joints, force_reduced=True)
    forced = float(np.abs(X1 - X2).max())
    return same, f"51 states bitwise identical: {same}; forced B = I solve differs by {forced:.1e}"


def test_c11_reduced_path_equivalence():
    assert _report(11, "no rigid links: skeleton path equals plain PD", *_timed(_c11), limit=10.0)


# --- 12 -----------------------------------------------------------------------------------


def _c12():
    x, _, _ = en.pneumatic_singular_values(np.ones(3), 8.0)
    D = x - 1.0
    m = np.array([1.0, 0.0, 0.0])
    e0 = en.muscle_energy(np.eye(3), 0.0, m, 1e4)
    t1 = sk.joint_local_update(sk.Joint(sk.ROTATIONAL, value=0.0), 0.1).value
    t0 = sk.joint_local_update(sk.Joint(sk.ROTATIONAL, value=0.0), 0.0).value
    l1 = sk.joint_local_update(sk.Joint(sk.PRISMATIC, value=1.0), -0.25).value
    ok = (np.allclose(D, 1.0, atol=1e-12) and np.allclose(en.project_pneumatic(np.eye(3), 8.0), 2 * np.eye(3))
          and e0 == 0.0 and abs(t1 - np.arctan2(0.1, 1.0)) < 1e-15 and abs(t1 - 0.09967) < 1e-5
          and t0 == 0.0 and l1 == 0.75)
    return ok, f"pneumatic D = {np.round(D, 12)}, muscle energy {e0}, theta {t1:.5f}, slide {l1}"


def test_c12_actuator_units():
    assert _report(12, "actuator and joint unit checks", *_timed(_c12), limit=1.0)


if __name__ == "__main__":
    results = []
    for name, fn in sorted(globals().items()):
        if name.startswith("test_c"):
            try:
                fn()
                results.append(True)
            except AssertionError:
                results.append(False)
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
