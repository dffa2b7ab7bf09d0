import numpy as np
import pytest

from softsim import diff
from softsim.fixtures import bar_tip, free_fall, pendulum, two_tet_bar
from softsim.mesh import TetMesh, box_mesh, lumped_mass
from softsim.scene_io import export_trajectory, import_trajectory
from softsim.sim import Scene, Simulator, barycenter
from softsim.skeleton import FREE, ROTATIONAL, Joint, KinematicTree, Link


def _bar_spec(scene):
    truth = Simulator(scene).run()
    return diff.LossSpec("vertices", truth.final.positions[bar_tip()].reshape(-1) + 0.01, vertices=bar_tip())


def _check(scene, params, spec, group, indices=None, tol=1e-3):
    g = diff.gradient(scene, params, spec, wrt=(group,)).grads[group]
    idx = np.arange(g.size) if indices is None else np.asarray(indices)
    fd = diff.finite_difference_gradient(scene, params, spec, group, idx)
    err = diff.relative_error(g[idx], fd, floor=max(1e-6 * np.abs(fd).max(), 1e-12))
    assert err.max() <= tol, (g[idx], fd)
    return g


def test_bar_material_gradient_matches_fd():
    scene = two_tet_bar()
    params = diff.ParamSet.from_scene(scene)
    g = _check(scene, params, _bar_spec(scene), "theta2")
    assert np.abs(g).max() > 0


def test_pendulum_torque_gradient_matches_fd():
    scene = pendulum(frames=20)
    params = diff.ParamSet.from_scene(scene)
    params.controls["torque"][:] = 0.05 * np.sin(np.arange(20))[:, None]
    spec = diff.LossSpec("joints", [0.1])
    _check(scene, params, spec, "theta1")


def test_free_fall_initial_state_gradient_matches_fd():
    scene = free_fall(frames=10)
    params = diff.ParamSet.from_scene(scene)
    spec = diff.LossSpec("vertices", scene.mesh.rest_positions.reshape(-1) + 0.05, vertices=None)
    n = params.q0.size
    rng = np.random.default_rng(0)
    _check(scene, params, spec, "x0", np.concatenate([rng.choice(n, 6, replace=False),
                                                      n + rng.choice(n, 6, replace=False)]))


def test_barycenter_gradient_is_exact_under_momentum_conservation():
    scene = free_fall(frames=1)
    params = diff.ParamSet.from_scene(scene)
    mass = lumped_mass(scene.mesh).vertex_mass
    target = np.array([0.1, 0.2, 0.3])
    spec = diff.LossSpec("barycenter", target)
    res = diff.gradient(scene, params, spec, wrt=("x0",))
    c = barycenter(mass, res.trajectory.final.q)
    u = (c - target) / np.linalg.norm(c - target)
    n = params.q0.size
    gq = res.grads["x0"][:n].reshape(-1, 3)
    gv = res.grads["x0"][n:].reshape(-1, 3)
    assert np.allclose(gq.sum(axis=0), u, atol=1e-10)
    assert np.allclose(gq, (mass / mass.sum())[:, None] * u, atol=1e-10)
    assert np.allclose(gv, scene.h * (mass / mass.sum())[:, None] * u, atol=1e-12)


def test_disconnected_link_torque_has_zero_gradient():
    # a second bob on its own hinge shares no energy term with the first
    a = box_mesh((1, 1, 1), (0.05,) * 3, origin=(-0.025, -0.025, -0.525))
    b = box_mesh((1, 1, 1), (0.05,) * 3, origin=(-0.025, 0.975, -0.525))
    pos = np.vstack([a.rest_positions, b.rest_positions])
    mesh = TetMesh.create(pos, np.vstack([a.tets, b.tets + a.n_vertices]), youngs=1e5)
    links = [Link("base", -1, Joint(FREE, fixed=True), np.zeros(0, np.int64)),
             Link("arm", 0, Joint(ROTATIONAL, axis=[0, 1, 0], value=0.3), np.arange(a.n_vertices)),
             Link("other", 0, Joint(ROTATIONAL, axis=[0, 1, 0], anchor=[0, 1, 0], value=-0.2),
                  a.n_vertices + np.arange(b.n_vertices))]
    scene = Scene(mesh, frames=5, skeleton=KinematicTree.create(links, pos), torque_links=[1, 2])
    params = diff.ParamSet.from_scene(scene)
    params.controls["torque"][:] = 0.02
    g = diff.gradient(scene, params, diff.LossSpec("joints", [0.2], links=[1]), wrt=("theta1",)).grads["theta1"]
    g = g.reshape(5, 2)
    assert np.abs(g[:, 0]).max() > 0
    assert np.abs(g[:, 1]).max() == 0.0


def test_symmetric_scene_has_zero_lateral_derivative():
    scene = free_fall(frames=5, velocity=(0.0, 0.0, 0.5))
    params = diff.ParamSet.from_scene(scene)
    mass = lumped_mass(scene.mesh).vertex_mass
    c0 = barycenter(mass, params.q0)
    spec = diff.LossSpec("barycenter", c0 + [0.0, 0.0, 0.2])
    n = params.q0.size
    g = diff.gradient(scene, params, spec, wrt=("x0",)).grads["x0"]
    lateral = n + 3 * np.arange(n // 3) + 1
    assert np.abs(g[lateral].sum()) < 1e-8
    assert abs(diff.finite_difference_oracle(scene, params, spec, ("x0", int(lateral[0])))) < 1e-8


def test_fd_step_refinement():
    scene = two_tet_bar()
    params = diff.ParamSet.from_scene(scene)
    spec = _bar_spec(scene)
    a = diff.finite_difference_oracle(scene, params, spec, ("theta2", 1), 1e-4)
    b = diff.finite_difference_oracle(scene, params, spec, ("theta2", 1), 1e-5)
    assert abs(a - b) < 1e-4 * abs(b)
    with pytest.raises(ValueError):
        diff.finite_difference_oracle(scene, params, spec, ("theta2", 1), 0.0)


def test_checkpoints_replay_bitwise():
    scene = two_tet_bar(frames=10)
    params = diff.ParamSet.from_scene(scene)
    sim = Simulator(scene)
    traj, store = diff.simulate_with_checkpoints(scene, params, sim=sim)
    assert len(store) == 10
    for k in range(9):
        state, _ = diff.replay_frame(sim, store[k])
        assert np.array_equal(state.q, store[k + 1].q)
        assert np.array_equal(state.v, store[k + 1].v)
    state, _ = diff.replay_frame(sim, store[9])
    assert np.array_equal(state.q, traj.final.q)


def test_checkpoint_memory_is_linear_in_frames():
    scene = two_tet_bar()
    out = {}
    for n in (10, 200):
        params = diff.ParamSet.from_scene(scene, n)
        _, store = diff.simulate_with_checkpoints(scene, params)
        _, tape = diff.simulate_with_checkpoints(scene, params, checkpointing=False)
        out[n] = (store, tape)
    size = out[10][0].checkpoint_floats
    const = out[10][0].retained_floats - 10 * size
    assert out[200][0].retained_floats <= 1.05 * (200 * size + const)
    assert out[200][0].peak_transient_floats == out[10][0].peak_transient_floats
    assert sum(c.float_count() for c in out[200][0].checkpoints) == 20 * sum(
        c.float_count() for c in out[10][0].checkpoints)
    assert out[200][1].retained_floats > 2 * out[200][0].retained_floats


def test_zero_frame_run():
    scene = two_tet_bar()
    params = diff.ParamSet.from_scene(scene, 0)
    traj, store = diff.simulate_with_checkpoints(scene, params)
    assert len(store) == 0 and traj.n_frames == 0
    assert np.array_equal(traj.final.q, params.q0)
    assert Simulator(scene).run(frames=0, record_states=True).states[0].frame_index == 0


def test_loss_examples(tmp_path):
    scene = free_fall(frames=3)
    sim = Simulator(scene)
    traj = sim.run(record_states=True)
    c = barycenter(sim.mass, traj.final.q)
    assert diff.loss(traj, diff.LossSpec("barycenter", c), sim.mass) == 0.0
    assert diff.loss(traj, diff.LossSpec("barycenter", c + [0.03, 0.04, 0.0]), sim.mass) == pytest.approx(0.05)
    export_trajectory(traj, tmp_path / "t.csv")
    table = import_trajectory(tmp_path / "t.csv")
    q = table.q[-1].reshape(-1, 3)
    target = c + [0.01, -0.02, 0.02]
    recomputed = np.linalg.norm((sim.mass[:, None] * q).sum(axis=0) / sim.mass.sum() - target)
    assert diff.loss(traj, diff.LossSpec("barycenter", target), sim.mass) == pytest.approx(recomputed, rel=1e-12)


def test_gradient_is_linear_in_loss_direction():
    # L = |c - t| with c far from t: scaling the offset leaves the gradient unchanged
    scene = free_fall(frames=2)
    params = diff.ParamSet.from_scene(scene)
    mass = lumped_mass(scene.mesh).vertex_mass
    c = barycenter(mass, Simulator(scene).run().final.q)
    g1 = diff.gradient(scene, params, diff.LossSpec("barycenter", c - [1.0, 0, 0]), wrt=("x0",)).grads["x0"]
    g2 = diff.gradient(scene, params, diff.LossSpec("barycenter", c - [5.0, 0, 0]), wrt=("x0",)).grads["x0"]
    assert np.allclose(g1, g2, atol=1e-12)


def test_param_set_roundtrip_and_errors():
    scene = pendulum(frames=4)
    p = diff.ParamSet.from_scene(scene)
    v = np.arange(p.vector("theta1").size, dtype=float)
    assert np.array_equal(p.with_vector("theta1", v).vector("theta1"), v)
    with pytest.raises(ValueError):
        diff.gradient(scene, p, diff.LossSpec("joints", [0.0]), wrt=("phi",))
    with pytest.raises(ValueError):
        diff.LossSpec("speed", [0.0])
