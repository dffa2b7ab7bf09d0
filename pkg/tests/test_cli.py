import subprocess
import sys

import numpy as np
import pytest

from softsim.cli import main, parse_sweep
from softsim.scene_io import import_trajectory, parse_scene
from softsim.sim import Simulator, barycenter, ballistic_center


def test_bound_on_reference_fixture(fixtures_dir, capsys):
    assert main(["bound", "--scene", str(fixtures_dir / "bound.scene")]) == 0
    out = capsys.readouterr().out
    h = float(out.split()[1])
    assert h == pytest.approx(1 / 1934, rel=5e-3)
    assert "tets 1000" in out


def test_bound_from_parameters(capsys):
    assert main(["bound", "--params", "1000", "3e5", "1e-2", "1"]) == 0
    assert float(capsys.readouterr().out.split()[1]) == pytest.approx(5.17e-4, rel=5e-3)


def test_sim_then_parabola_check(fixtures_dir, tmp_path, capsys):
    assert main(["sim", "--scene", str(fixtures_dir / "free_fall.scene"), "--out", str(tmp_path)]) == 0
    table = import_trajectory(tmp_path / "trajectory.csv")
    scene = parse_scene(fixtures_dir / "free_fall.scene")
    mass = Simulator(scene).mass
    q = table.q.reshape(len(table.q), -1, 3)
    v0 = table.v[0].reshape(-1, 3)
    c0 = barycenter(mass, q[0])
    vc = (mass[:, None] * v0).sum(axis=0) / mass.sum()
    assert len(q) == 101
    err = max(np.abs(barycenter(mass, q[n]) - ballistic_center(c0, vc, scene.gravity, scene.h, n)).max()
              for n in range(len(q)))
    assert err < 1e-8


def test_sim_divergence_exit_code(fixtures_dir, tmp_path, capsys):
    text = (fixtures_dir / "cube_on_ground.scene").read_text().replace("contact_mode split", "contact_mode original")
    (tmp_path / "c.scene").write_text(text)
    assert main(["sim", "--scene", str(tmp_path / "c.scene"), "--out", str(tmp_path / "o"),
                 "--h", "0.03", "--frames", "5"]) == 2
    assert "diverged" in capsys.readouterr().err


def test_gradcheck_on_bar(fixtures_dir, capsys):
    assert main(["gradcheck", "--scene", str(fixtures_dir / "bar_sysid.scene"), "--wrt", "theta2"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_contact_study(fixtures_dir, tmp_path, capsys):
    assert main(["contact-study", "--scene", str(fixtures_dir / "cube_on_ground.scene"), "--h-sweep", "0.5:10:2",
                 "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "contact_study.csv").read_text().splitlines()
    assert rows[0] == "h,h_over_hmax,mode,converged,diverged,iterations"
    assert len(rows) == 5
    big = [r.split(",") for r in rows[1:] if r.split(",")[1] == "10"]
    by_mode = {r[2]: r for r in big}
    assert by_mode["original"][3] == "0"
    assert by_mode["split"][3] == "1"


def test_pendulum_control(fixtures_dir, tmp_path, capsys):
    assert main(["control", "--scene", str(fixtures_dir / "pendulum.scene"), "--out", str(tmp_path)]) == 0
    hist = np.loadtxt(tmp_path / "history.csv", delimiter=",", skiprows=1)
    assert hist[-1, 1] < 1e-2
    assert (tmp_path / "controls.csv").exists()


@pytest.mark.parametrize("argv", [
    ["sim", "--scene", "/does/not/exist.scene", "--out", "x"],
    ["sim", "--scene", "x"],
    ["bound"],
    ["gradcheck", "--scene", "x", "--wrt", "speed"],
    ["frobnicate"],
])
def test_usage_errors_exit_1(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_gradcheck_needs_loss(fixtures_dir, capsys):
    assert main(["gradcheck", "--scene", str(fixtures_dir / "minimal.scene"), "--wrt", "x0"]) == 1
    assert "loss" in capsys.readouterr().err


def test_parse_sweep():
    assert np.allclose(parse_sweep("0.5:10:3"), [0.5, 5.25, 10])
    for bad in ("1:2", "a:b:c", "0:1:2", "1:2:0"):
        with pytest.raises(ValueError):
            parse_sweep(bad)


def test_module_entry_point(fixtures_dir):
    r = subprocess.run([sys.executable, "-m", "softsim", "bound", "--params", "1", "1", "1", "1"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert float(r.stdout.split()[1]) == pytest.approx(np.sqrt(1 / (72 * np.sqrt(3))))
