import numpy as np
import pytest
from hypothesis import given, strategies as st

from softsim.fixtures import two_tet_bar
from softsim.mesh import MeshError, TetMesh, box_mesh, displacement_matrix, lumped_mass, unit_tet
from softsim.scene_io import SceneError, read_mesh

UNIT = "nodes 4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\ntets 1\n0 1 2 3\n"


def test_unit_tet_file_volume(tmp_path):
    f = tmp_path / "unit.mesh"
    f.write_text(UNIT)
    m = read_mesh(f)
    assert m.n_tets == 1
    assert m.volumes()[0] == pytest.approx(1.0 / 6.0, rel=1e-15)


def test_coplanar_tet_rejected(tmp_path):
    f = tmp_path / "flat.mesh"
    f.write_text("nodes 4\n0 0 0\n1 0 0\n0 1 0\n1 1 0\ntets 1\n0 1 2 3\n")
    with pytest.raises(SceneError, match="degenerate"):
        read_mesh(f)
    with pytest.raises(MeshError):
        TetMesh.create([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [[0, 1, 2, 3]])


def test_bad_index_rejected():
    with pytest.raises(MeshError):
        TetMesh.create(np.vstack([np.zeros(3), np.eye(3)]), [[0, 1, 2, 4]])


def test_bar_volume_is_sum_of_determinants():
    m = two_tet_bar().mesh
    x = m.rest_positions
    want = sum(abs(np.linalg.det((x[t[1:]] - x[t[0]]).T)) / 6.0 for t in m.tets)
    assert m.n_tets == 2
    assert m.volumes().sum() == pytest.approx(want, rel=1e-14)


def test_displacement_matrix_rest_and_scaled():
    m = unit_tet()
    x = m.rest_positions
    assert np.array_equal(displacement_matrix(m, 0, x), np.eye(3))
    assert np.allclose(displacement_matrix(m, 0, 2 * x), 2 * np.eye(3))
    with pytest.raises(IndexError):
        displacement_matrix(m, 1, x)


@given(st.integers(0, 2**31 - 1))
def test_displacement_matrix_columns(seed):
    rng = np.random.default_rng(seed)
    m = box_mesh((2, 1, 1))
    q = rng.normal(size=(m.n_vertices, 3))
    t = int(rng.integers(m.n_tets))
    D = displacement_matrix(m, t, q)
    i = m.tets[t]
    for c in range(3):
        assert np.array_equal(D[:, c], q[i[c + 1]] - q[i[0]])


def test_lumped_mass_single_tet():
    m = unit_tet(density=1.0)
    assert np.allclose(lumped_mass(m).vertex_mass, 1.0 / 24.0, rtol=1e-15)


def test_lumped_mass_shared_face():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    m = TetMesh.create(pos, [[0, 1, 2, 3], [0, 2, 1, 4]], density=1.0)
    share = 1.0 / 24.0
    assert np.allclose(lumped_mass(m).vertex_mass, [2 * share] * 3 + [share] * 2)


@given(st.integers(0, 2**31 - 1))
def test_total_mass(seed):
    rng = np.random.default_rng(seed)
    m = box_mesh((2, 2, 1), (1.0, 0.7, 0.3))
    q = m.rest_positions + 0.02 * rng.normal(size=m.rest_positions.shape)
    rho = rng.uniform(500, 1500, size=m.n_tets)
    m = TetMesh.create(q, m.tets, density=rho)
    vol = sum(abs(np.linalg.det((q[t[1:]] - q[t[0]]).T)) / 6.0 for t in m.tets)
    total = sum(r * abs(np.linalg.det((q[t[1:]] - q[t[0]]).T)) / 6.0 for r, t in zip(rho, m.tets))
    assert lumped_mass(m).total == pytest.approx(total, rel=1e-12)
    assert m.volumes().sum() == pytest.approx(vol, rel=1e-12)
