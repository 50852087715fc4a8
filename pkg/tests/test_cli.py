import csv
import json

import numpy as np
import pytest

from augcontact import fixtures
from augcontact.cli import CSV_COLUMNS, main, run
from augcontact.scene import load_scene


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_free_fall_one_frame(tmp_path):
    cfg = fixtures.free_fall(tmp_path / "scene")
    out = tmp_path / "out"
    assert main([str(cfg), "-o", str(out), "--dump-positions", "--deterministic"]) == 0
    assert sorted(p.name for p in out.glob("*.obj")) == ["frame_0001.obj"]
    rows = _rows(out / "stats.csv")
    assert rows[0] == CSV_COLUMNS and len(rows) == 2
    sc = load_scene(cfg)
    expect = sc.x0 + sc.h * sc.v0 + sc.h ** 2 * sc.gravity
    got = np.loadtxt(out / "positions_0001.txt")
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-10)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["success"] and summary["frames_completed"] == 1
    # the OBJ carries the surface vertices at the same positions
    v = np.array([l.split()[1:] for l in (out / "frame_0001.obj").read_text().splitlines() if l.startswith("v ")],
                 float)
    np.testing.assert_allclose(np.sort(v, axis=0), np.sort(expect, axis=0), atol=1e-12)


def test_deterministic_csv_identical(tmp_path):
    cfg = fixtures.two_tet_squeeze(tmp_path / "scene", frames=8)
    for k in ("a", "b"):
        assert main([str(cfg), "-o", str(tmp_path / k), "--deterministic"]) == 0
    for name in ("stats.csv", "newton.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_stats_schema(tmp_path):
    cfg = fixtures.falling_tet(tmp_path / "scene", frames=5)
    rep = run(cfg, tmp_path / "out")
    rows = _rows(tmp_path / "out" / "stats.csv")
    assert rows[0] == ["frame", "wall_ms", "newton_iters", "pcg_iters_total", "n_constraints_max", "min_distance",
                       "sigma_final"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]
    for r in rows[1:]:
        assert int(r[2]) > 0 and int(r[3]) >= 0 and int(r[4]) >= 0 and float(r[5]) > 0
    assert rep.success and len(rep.frames) == 5
    it = _rows(tmp_path / "out" / "newton.csv")
    assert len(it) - 1 == sum(int(r[2]) for r in rows[1:])


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    from augcontact import cli
    from augcontact.optimizer import SolverOptions

    cfg = fixtures.falling_tet(tmp_path / "scene", frames=3)
    orig = SolverOptions.__init__

    def capped(self, *a, **kw):
        orig(self, *a, **kw)
        self.max_newton = 1

    monkeypatch.setattr(cli.SolverOptions, "__init__", capped)
    out = tmp_path / "out"
    assert main([str(cfg), "-o", str(out)]) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["success"] is False and "Newton" in summary["error"]
    assert (out / "failed_iterate.txt").exists()
    assert _rows(out / "stats.csv")[0] == CSV_COLUMNS


def test_bad_scene_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("h = 1\n")
    assert main([str(bad), "-o", str(tmp_path / "out")]) == 2
    assert "no bodies" in capsys.readouterr().err
    assert main([str(tmp_path / "missing.cfg"), "-o", str(tmp_path / "out")]) == 2


def test_ablation_flags_recorded(tmp_path):
    cfg = fixtures.free_fall(tmp_path / "scene")
    out = tmp_path / "out"
    assert main([str(cfg), "-o", str(out), "--no-warm-start", "--no-auglag", "--friction-update",
                 "per-optimization", "--precond", "additive", "--fp", "f32", "--frames", "2"]) == 0
    opts = json.loads((out / "summary.json").read_text())["options"]
    assert opts == {"warm_start": False, "auglag": False, "friction_update": "per-optimization",
                    "precond": "additive", "fp": "f32", "deterministic": False}
    assert len(list(out.glob("*.obj"))) == 2


def test_no_auglag_squeeze_equivalent(tmp_path):
    cfg = fixtures.two_tet_squeeze(tmp_path / "scene", frames=30)
    for k, flags in (("a", []), ("b", ["--no-auglag"])):
        assert main([str(cfg), "-o", str(tmp_path / k), "--dump-positions"] + flags) == 0
    xa = np.loadtxt(tmp_path / "a" / "positions_0030.txt")
    xb = np.loadtxt(tmp_path / "b" / "positions_0030.txt")
    assert np.abs(xa - xb).max() <= 1e-6


def test_unknown_flag_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["scene.cfg", "-o", str(tmp_path), "--precond", "ilu"])
