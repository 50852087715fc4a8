import numpy as np
import pytest

from augcontact import fixtures
from augcontact.mesh import regular_tet, write_mesh
from augcontact.scene import Motion, SceneError, load_scene, parse_config


def test_parse_config_comments_and_errors():
    cfg = parse_config("# header\nh = 0.02  # step\n\nbody.0.node = a.node\n")
    assert cfg == {"h": "0.02", "body.0.node": "a.node"}
    with pytest.raises(SceneError, match="duplicate"):
        parse_config("h = 1\nh = 2\n")
    with pytest.raises(SceneError, match="line 1"):
        parse_config("h 0.01\n")


def test_motion_parse_and_positions():
    assert Motion.parse("static").kind == "static"
    m = Motion.parse("translate 1 0 -2")
    np.testing.assert_allclose(m.positions([[0, 0, 0]], 0.5), [[0.5, 0, -1]])
    r = Motion.parse("rotate 0 0 2 1 0 0 3.141592653589793")
    np.testing.assert_allclose(r.axis, [0, 0, 1])
    np.testing.assert_allclose(r.positions([[2, 0, 0]], 1.0), [[0, 0, 0]], atol=1e-12)
    np.testing.assert_allclose(r.positions([[2, 0, 0]], 0.5), [[1, 1, 0]], atol=1e-12)
    for bad in ("", "spin 1", "translate 1 2", "rotate 0 0 0 0 0 0 1"):
        with pytest.raises(SceneError):
            Motion.parse(bad)


def _tet_scene(tmp_path, extra=""):
    p, t = regular_tet(0.2)
    write_mesh(p, t, tmp_path / "t.node", tmp_path / "t.ele")
    path = tmp_path / "s.cfg"
    path.write_text("body.0.node = t.node\nbody.0.ele = t.ele\n" + extra)
    return path


def test_defaults(tmp_path):
    s = load_scene(_tet_scene(tmp_path))
    assert s.h == 0.01 and s.dhat == 1e-3 and s.chi == 0.0 and s.frames == 10
    assert s.eps_v == s.dhat
    np.testing.assert_allclose(s.gravity, [0, -9.81, 0])
    assert s.models[0].tag == "StableNeoHookean"
    assert not np.any(s.scripted) and np.all(s.v0 == 0)


def test_eps_v_follows_dhat(tmp_path):
    assert load_scene(_tet_scene(tmp_path, "dhat = 2e-3\n")).eps_v == 2e-3
    assert load_scene(_tet_scene(tmp_path, "dhat = 2e-3\neps_v = 5e-4\n")).eps_v == 5e-4


def test_body_options(tmp_path):
    s = load_scene(_tet_scene(tmp_path, "body.0.material = ARAP\nbody.0.E = 2e6\nbody.0.velocity = 1 2 3\n"
                                         "body.0.translate = 0 1 0\nfriction = 0.4\n"))
    assert s.models[0].tag == "ARAP"
    assert s.models[0].mu == pytest.approx(2e6 / 2.6)
    np.testing.assert_allclose(s.v0, np.tile([1, 2, 3], (4, 1)))
    p, _ = regular_tet(0.2)
    np.testing.assert_allclose(s.x0, p + [0, 1, 0])
    assert s.chi == 0.4


def test_boundary_selection(tmp_path):
    p, _ = regular_tet(0.2)
    top = int(np.argmax(p[:, 1]))
    y = p[top, 1]
    s = load_scene(_tet_scene(tmp_path, f"bc.0.body = 0\nbc.0.nodes = box -1 {y - 1e-9} -1 1 1 1\n"
                                         "bc.0.motion = translate 0 1 0\n"))
    assert s.scripted.tolist() == [i == top for i in range(4)]
    xt = s.scripted_positions(2.0)
    np.testing.assert_allclose(xt[top], p[top] + [0, 2, 0])
    s = load_scene(_tet_scene(tmp_path, "bc.0.nodes = 0 2\n"))
    assert s.scripted.tolist() == [True, False, True, False]


@pytest.mark.parametrize("extra, msg", [
    ("colour = red\n", "unknown key"),
    ("h = -1\n", "h must be positive"),
    ("dhat = 0\n", "dhat"),
    ("friction = -0.1\n", "friction"),
    ("gravity = 0 1\n", "gravity"),
    ("bc.0.nodes = 7\n", "out of range"),
    ("body.0.material = Rubber\n", "unknown elastic model"),
    ("bc.0.nodes = box 5 5 5 6 6 6\n", "selects nothing"),
])
def test_scene_errors(tmp_path, extra, msg):
    with pytest.raises(SceneError, match=msg):
        load_scene(_tet_scene(tmp_path, extra))


def test_missing_mesh_file(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text("body.0.node = t.node\n")
    with pytest.raises(SceneError, match="missing"):
        load_scene(path)
    path.write_text("h = 0.01\n")
    with pytest.raises(SceneError, match="no bodies"):
        load_scene(path)


@pytest.mark.parametrize("name", sorted(fixtures.ACCEPTANCE_SCENES))
def test_fixture_scenes_load(tmp_path, name):
    s = load_scene(fixtures.ACCEPTANCE_SCENES[name](tmp_path))
    assert s.mesh.node_count > 0
    assert np.all(np.isfinite(s.x0))
