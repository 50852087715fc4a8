"""Small scenes used by the tests, the acceptance script and the CLI examples.

Every builder writes .node/.ele files plus a scene .cfg into a directory and
returns the path of the .cfg.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import box_tets, regular_tet, write_mesh

FLOOR_TOP = 0.0


def _rot(axis, angle):
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _write(out, name, bodies, globals_, bcs=()):
    """bodies: list of dicts with positions, tets and optional per-body keys."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in globals_.items()]
    for i, b in enumerate(bodies):
        stem = f"{name}_b{i}"
        write_mesh(b["positions"], b["tets"], out / f"{stem}.node", out / f"{stem}.ele")
        lines += [f"body.{i}.node = {stem}.node", f"body.{i}.ele = {stem}.ele"]
        for k in ("material", "E", "nu", "velocity", "fixed", "density"):
            if k in b:
                lines.append(f"body.{i}.{k} = {b[k]}")
    for j, bc in enumerate(bcs):
        lines += [f"bc.{j}.{k} = {v}" for k, v in bc.items()]
    path = out / f"{name}.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def floor_body(width=1.0, thickness=0.1):
    p, t = box_tets(1, 1, 1, (width, thickness, width), (-width / 2, FLOOR_TOP - thickness, -width / 2))
    return {"positions": p, "tets": t, "fixed": "true", "E": 1e7}


def _tet_body(edge, center, rot=None, **kw):
    p, t = regular_tet(edge)
    if rot is not None:
        p = p @ rot.T
    p = p + np.asarray(center, dtype=float)
    return {"positions": p, "tets": t, **kw}


def _lift(body, gap):
    body["positions"] = body["positions"] + [0.0, FLOOR_TOP + gap - body["positions"][:, 1].min(), 0.0]
    return body


def falling_tet(out, frames=40, dhat=1e-3, h=0.01):
    tet = _lift(_tet_body(0.2, (0.0, 0.0, 0.0), _rot((1, 0, 1), 0.3)), 0.02)
    return _write(out, "falling_tet", [floor_body(), tet],
                  {"h": h, "dhat": dhat, "frames": frames, "gravity": "0 -9.81 0"})


def two_tet_squeeze(out, frames=30, dhat=1e-3, h=0.01):
    a = _tet_body(0.2, (-0.13, 0.0, 0.01), _rot((0, 1, 0), 0.2), velocity="0.5 0 0")
    b = _tet_body(0.2, (0.13, 0.0, -0.01), _rot((0, 1, 0), np.pi / 3 + 0.1), velocity="-0.5 0 0")
    return _write(out, "two_tet_squeeze", [a, b], {"h": h, "dhat": dhat, "frames": frames, "gravity": "0 0 0"})


def tet_pile(out, frames=50, dhat=1e-3, h=0.01):
    rng = np.random.default_rng(7)
    bodies = [floor_body()]
    edge, pitch = 0.12, 0.16
    for i, j, k in np.ndindex(2, 2, 2):
        c = np.array([(i - 0.5) * pitch, 0.08 + j * pitch, (k - 0.5) * pitch])
        c[[0, 2]] += rng.uniform(-0.02, 0.02, 2)
        R = _rot(rng.standard_normal(3), rng.uniform(0, np.pi))
        bodies.append(_tet_body(edge, c, R))
    for b in bodies[1:]:
        b["positions"][:, 1] += max(0.0, 0.01 - b["positions"][:, 1].min())
    return _write(out, "tet_pile", bodies, {"h": h, "dhat": dhat, "frames": frames})


def cube_body(size=0.1, gap=5e-4, velocity="0 0 0", yaw=0.1, offset=(0.013, 0.0, -0.007)):
    """Cube resting ``gap`` above the floor, turned about the vertical so no edge lines up with a floor edge."""
    p, t = box_tets(1, 1, 1, (size, size, size), (-size / 2, 0.0, -size / 2))
    p = p @ _rot((0, 1, 0), yaw).T + np.asarray(offset) + [0.0, FLOOR_TOP + gap, 0.0]
    return {"positions": p, "tets": t, "velocity": velocity}


def sliding_block(out, chi=0.5, frames=20, dhat=1e-3, h=0.01, eps_v=1e-3, speed=1.0, name="sliding_block"):
    return _write(out, name, [floor_body(), cube_body(velocity=f"{speed} 0 0")],
                  {"h": h, "dhat": dhat, "frames": frames, "friction": chi, "eps_v": eps_v})


def incline(out, tan_theta, chi=0.5, frames=60, dhat=1e-3, h=0.01, eps_v=1e-3, name="incline"):
    """Block on a plane tilted by atan(tan_theta), realised by rotating gravity."""
    th = np.arctan(tan_theta)
    g = 9.81 * np.array([np.sin(th), -np.cos(th), 0.0])
    return _write(out, name, [floor_body(), cube_body()],
                  {"h": h, "dhat": dhat, "frames": frames, "friction": chi, "eps_v": eps_v,
                   "gravity": " ".join(repr(float(v)) for v in g)})


def twisting_rods(out, frames=40, dhat=1e-3, h=0.01, omega=np.pi, segments=8):
    """Two parallel bars clamped at both ends; the clamps spin in opposite senses about the bars' common axis."""
    w, length, half_gap = 0.04, 0.4, 0.032
    bodies, bcs = [], []
    for i, sx in enumerate((-1.0, 1.0)):
        p, t = box_tets(1, 1, segments, (w, w, length), (sx * half_gap - w / 2, -w / 2, -length / 2))
        bodies.append({"positions": p, "tets": t, "E": 2e5})
        eps = 1e-9
        for zsign, om in ((-1.0, omega), (1.0, -omega)):
            z = zsign * length / 2
            bcs.append({"body": i, "nodes": f"box -1 -1 {z - eps} 1 1 {z + eps}",
                        "motion": f"rotate 0 0 1 0 0 0 {om}"})
    return _write(out, "twisting_rods", bodies, {"h": h, "dhat": dhat, "frames": frames, "gravity": "0 0 0"}, bcs)


def free_fall(out, frames=1, h=0.01):
    tet = _tet_body(0.2, (0.0, 1.0, 0.0), velocity="0.3 0 -0.2")
    return _write(out, "free_fall", [tet], {"h": h, "frames": frames})


ACCEPTANCE_SCENES = {
    "falling_tet": falling_tet,
    "two_tet_squeeze": two_tet_squeeze,
    "tet_pile": tet_pile,
    "sliding_block": sliding_block,
    "twisting_rods": twisting_rods,
}
