import numpy as np
import pytest
from hypothesis import given, strategies as st

from softsim import energy as en
from softsim.fixtures import gripper
from softsim.mesh import box_mesh, unit_tet
from softsim.sim import Simulator

from conftest import random_rotation

SEEDS = st.integers(0, 2**31 - 1)


def _random_F(rng, spread=0.3):
    return random_rotation(rng) @ np.diag(rng.uniform(1 - spread, 1 + spread, 3)) @ random_rotation(rng)


def test_deformation_gradient_examples(rng):
    m = unit_tet()
    x = m.rest_positions
    R = random_rotation(rng)
    assert np.allclose(en.deformation_gradient(m, 0, x), np.eye(3), atol=1e-15)
    assert np.allclose(en.deformation_gradient(m, 0, x @ R.T), R, atol=1e-14)
    assert np.allclose(en.deformation_gradient(m, 0, 2 * x), 2 * np.eye(3), atol=1e-14)


def test_corotational_examples(rng):
    assert np.allclose(en.project_corotational(np.eye(3)), np.eye(3))
    R = random_rotation(rng)
    assert np.allclose(en.project_corotational(3 * R), R, atol=1e-14)


def test_corotational_is_closest_rotation(rng):
    F = _random_F(rng, 0.6)
    P = en.project_corotational(F)
    assert np.allclose(P.T @ P, np.eye(3), atol=1e-12)
    assert np.linalg.det(P) == pytest.approx(1.0)
    best = np.linalg.norm(F - P)
    # sampling oracle: no random rotation is closer
    for _ in range(10_000):
        assert np.linalg.norm(F - random_rotation(rng)) >= best - 1e-9


def test_corotational_reflection_gives_proper_rotation():
    P = en.project_corotational(np.diag([1.0, 1.0, -0.5]))
    assert np.linalg.det(P) == pytest.approx(1.0)


def test_pneumatic_examples():
    x, _, _ = en.pneumatic_singular_values(np.ones(3), 1.0)
    assert np.allclose(x - 1, 0)
    x, _, _ = en.pneumatic_singular_values(np.ones(3), 8.0)
    assert np.allclose(x - 1, [1, 1, 1], atol=1e-12)
    assert np.allclose(en.project_pneumatic(np.eye(3), 8.0), 2 * np.eye(3), atol=1e-12)
    x, _, _ = en.pneumatic_singular_values(np.array([2.0, 1.0, 1.0]), 2.0)
    assert np.allclose(x, [2, 1, 1], atol=1e-12)


@given(SEEDS)
def test_pneumatic_reaches_volume_with_least_shift(seed):
    rng = np.random.default_rng(seed)
    s = np.sort(rng.uniform(0.5, 1.5, 3))[::-1]
    a = rng.uniform(0.3, 4.0)
    x, _, _ = en.pneumatic_singular_values(s, a)
    assert np.prod(x) == pytest.approx(a, rel=1e-9)
    # stationarity: x_i (x_i - s_i) is the same for every i
    c = x * (x - s)
    assert np.ptp(c) < 1e-8 * max(1.0, np.abs(c).max())


@given(SEEDS)
def test_pneumatic_batch_matches_scalar(seed):
    rng = np.random.default_rng(seed)
    S = np.sort(rng.uniform(0.2, 2.0, (20, 3)), axis=1)[:, ::-1]
    a = rng.uniform(0.1, 10.0, 20)
    batch = en.pneumatic_singular_values_batch(S, a)
    for k in range(20):
        assert np.array_equal(batch[k], en.pneumatic_singular_values(S[k], a[k])[0])


def test_muscle_examples(rng):
    m = np.array([1.0, 0.0, 0.0])
    R = random_rotation(rng)
    assert en.muscle_energy(R, 0.0, m, 5.0) == pytest.approx(0.0, abs=1e-24)
    F = _random_F(rng)
    assert en.muscle_energy(F, 1.0, m, 3.0) == pytest.approx(1.5 * np.sum((F @ m) ** 2))
    assert en.muscle_energy(np.eye(3), 0.5, m, 2.0) == pytest.approx(2.0 / 8.0)


def _fd_jacobian(f, F, eps=1e-6):
    J = np.zeros((9, 9))
    for k in range(9):
        d = np.zeros(9)
        d[k] = eps
        J[:, k] = (f(F + d.reshape(3, 3)) - f(F - d.reshape(3, 3))).reshape(-1) / (2 * eps)
    return J


@given(SEEDS)
def test_corotational_derivative_fd(seed):
    F = _random_F(np.random.default_rng(seed))
    J = en.corotational_derivative(F)
    assert np.allclose(J, _fd_jacobian(en.project_corotational, F), atol=1e-7)


@given(SEEDS)
def test_pneumatic_derivative_fd(seed):
    rng = np.random.default_rng(seed)
    F = _random_F(rng)
    a = rng.uniform(0.5, 3.0)
    JF, Ja = en.pneumatic_derivative(F, a)
    assert np.allclose(JF, _fd_jacobian(lambda G: en.project_pneumatic(G, a), F), atol=1e-6)
    fd_a = (en.project_pneumatic(F, a + 1e-6) - en.project_pneumatic(F, a - 1e-6)).reshape(-1) / 2e-6
    assert np.allclose(Ja, fd_a, atol=1e-6)


def test_corotational_G_examples():
    m = box_mesh((1, 1, 1), (0.3, 0.2, 0.4))
    x = m.rest_positions
    for t in range(m.n_tets):
        G, w = en.corotational_G(m, t)
        assert np.allclose(G @ x.reshape(-1), np.eye(3).reshape(-1), atol=1e-12)
        A = en.shape_operator(m, t)
        assert np.allclose(A.sum(axis=1), 0.0, atol=1e-12)
        assert w == pytest.approx(m.mu[t] * m.volumes()[t])
        # G^T G against a dense construction from the shape operator
        dense = np.zeros((3 * m.n_vertices, 3 * m.n_vertices))
        idx = m.tets[t]
        AtA = A.T @ A
        for i in range(4):
            for j in range(4):
                dense[3 * idx[i]:3 * idx[i] + 3, 3 * idx[j]:3 * idx[j] + 3] = AtA[i, j] * np.eye(3)
        assert np.allclose(w * (G.T @ G).toarray(), w * dense, atol=1e-9 * w * np.abs(dense).max())


def test_term_energy_and_projection(rng):
    m = unit_tet(youngs=1e4)
    term = en.corotational_term(m, 0)
    x = m.rest_positions @ random_rotation(rng).T
    term.project(x)
    assert term.energy(x) == pytest.approx(0.0, abs=1e-18)
    att = en.attachment_term(2, [1.0, 2.0, 3.0], 10.0)
    q = np.zeros((4, 3))
    assert att.energy(q) == pytest.approx(5.0 * 14.0)
    with pytest.raises(ValueError):
        en.attachment_term(0, np.zeros(3), 0.0)


def test_grouped_pneumatic_block_projection_matches_scalar(rng):
    scene = gripper(frames=1)
    sim = Simulator(scene)
    blk = sim.blocks["pneumatic"]
    blk.activation[:] = rng.uniform(0.5, 2.0, len(blk))
    X = scene.mesh.rest_positions + 0.003 * rng.normal(size=scene.mesh.rest_positions.shape)
    P = blk.project(X)
    for k, t in enumerate(scene.pneumatic_tets):
        F = en.deformation_gradient(scene.mesh, t, X)
        want = en.project_pneumatic(F, blk.activation[k])
        assert np.allclose(P[k], want.T, atol=1e-12) or np.allclose(P[k], want, atol=1e-12)
