"""Flat key=value scene files: bodies, materials, boundary scripts and solver constants."""
from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .energy import ElasticModel
from .mesh import SimMesh, load_mesh, merge_bodies


class SceneError(ValueError):
    pass


GLOBAL_DEFAULTS = {
    "h": 0.01,
    "gravity": "0 -9.81 0",
    "density": 1000.0,
    "dhat": 1e-3,
    "eps_v": None,  # defaults to dhat
    "friction": 0.0,
    "frames": 10,
    "max_constraints": 1_000_000,
    "friction_tol": 1e-8,
}


@dataclass
class Motion:
    """Prescribed trajectory of a node set: static, translate or rotate."""

    kind: str = "static"
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Motion":
        tok = text.split()
        if not tok:
            raise SceneError("empty motion")
        if tok[0] == "static" and len(tok) == 1:
            return cls()
        if tok[0] == "translate" and len(tok) == 4:
            return cls("translate", velocity=np.array(tok[1:4], dtype=float))
        if tok[0] == "rotate" and len(tok) == 8:
            axis = np.array(tok[1:4], dtype=float)
            if not np.linalg.norm(axis) > 0:
                raise SceneError("rotation axis must be nonzero")
            return cls("rotate", axis=axis / np.linalg.norm(axis), center=np.array(tok[4:7], dtype=float),
                       omega=float(tok[7]))
        raise SceneError(f"bad motion {text!r}")

    def positions(self, x_ref, t: float) -> np.ndarray:
        x_ref = np.asarray(x_ref, dtype=float)
        if self.kind == "static":
            return x_ref.copy()
        if self.kind == "translate":
            return x_ref + t * self.velocity
        k = self.axis
        th = self.omega * t
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        R = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K
        return (x_ref - self.center) @ R.T + self.center


@dataclass
class BoundaryScript:
    nodes: np.ndarray  # global node indices
    motion: Motion


@dataclass
class Scene:
    mesh: SimMesh
    models: list  # ElasticModel per body
    x0: np.ndarray  # (N, 3)
    v0: np.ndarray  # (N, 3)
    h: float = 0.01
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.81, 0.0]))
    dhat: float = 1e-3
    eps_v: float = 1e-3
    chi: float = 0.0
    frames: int = 10
    max_constraints: int = 1_000_000
    friction_tol: float = 1e-8
    scripts: list = field(default_factory=list)

    def __post_init__(self):
        if not self.h > 0:
            raise SceneError("h must be positive")
        if not self.dhat > 0:
            raise SceneError("dhat must be positive")
        if not self.eps_v > 0:
            raise SceneError("eps_v must be positive")
        if self.chi < 0:
            raise SceneError("friction must be nonnegative")
        self.gravity = np.asarray(self.gravity, dtype=float)

    @property
    def scripted(self) -> np.ndarray:
        mask = np.zeros(self.mesh.node_count, dtype=bool)
        for s in self.scripts:
            mask[s.nodes] = True
        return mask

    @property
    def free(self) -> np.ndarray:
        return ~self.scripted

    def tet_models(self) -> dict:
        """Model -> tet indices (bodies sharing a model are merged)."""
        out = {}
        for b, m in enumerate(self.models):
            idx = np.flatnonzero(self.mesh.tet_body == b)
            if len(idx):
                out.setdefault(m, []).append(idx)
        return {m: np.concatenate(v) for m, v in out.items()}

    def scripted_positions(self, t: float) -> np.ndarray:
        """Full (N, 3) array with scripted nodes moved to their time-t position (others at rest pose)."""
        x = self.x0.copy()
        for s in self.scripts:
            x[s.nodes] = s.motion.positions(self.x0[s.nodes], t)
        return x


# ---------------------------------------------------------------- parsing


def _vec3(text, key):
    v = np.array(str(text).split(), dtype=float)
    if v.shape != (3,):
        raise SceneError(f"{key} needs 3 numbers")
    return v


def parse_config(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in cfg:
            raise SceneError(f"line {lineno}: duplicate key {k}")
        cfg[k] = v
    return cfg


def _select_nodes(text: str, offset: int, x_body: np.ndarray) -> np.ndarray:
    tok = shlex.split(text)
    if tok == ["all"]:
        return offset + np.arange(len(x_body))
    if tok and tok[0] == "box":
        if len(tok) != 7:
            raise SceneError("box selection needs 6 numbers")
        lo, hi = np.array(tok[1:4], float), np.array(tok[4:7], float)
        sel = np.flatnonzero(np.all((x_body >= lo) & (x_body <= hi), axis=1))
        if not len(sel):
            raise SceneError(f"node box {text!r} selects nothing")
        return offset + sel
    idx = np.array(tok, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= len(x_body)):
        raise SceneError("node index out of range")
    return offset + idx


def load_scene(path) -> Scene:
    path = Path(path)
    cfg = parse_config(path.read_text())
    g = dict(GLOBAL_DEFAULTS)
    known = set(g)
    for k, v in cfg.items():
        if k in known:
            g[k] = v
        elif not (k.startswith("body.") or k.startswith("bc.")):
            raise SceneError(f"unknown key {k}")
    body_ids = sorted({int(k.split(".")[1]) for k in cfg if k.startswith("body.")})
    if not body_ids:
        raise SceneError("scene has no bodies")
    parts, densities, models, vels, fixed_bodies = [], [], [], [], []
    for b in body_ids:
        pre = f"body.{b}."
        try:
            m = load_mesh(path.parent / cfg[pre + "node"], path.parent / cfg[pre + "ele"])
        except KeyError as e:
            raise SceneError(f"body {b} missing {e.args[0]}") from None
        x = m.rest_positions + (_vec3(cfg[pre + "translate"], pre + "translate") if pre + "translate" in cfg else 0.0)
        parts.append((x, m.tets))
        densities.append(float(cfg.get(pre + "density", g["density"])))
        try:
            models.append(ElasticModel.from_young(cfg.get(pre + "material", "StableNeoHookean"),
                                                  float(cfg.get(pre + "E", 1e5)), float(cfg.get(pre + "nu", 0.3))))
        except ValueError as e:
            raise SceneError(f"body {b}: {e}") from None
        vels.append(_vec3(cfg[pre + "velocity"], pre + "velocity") if pre + "velocity" in cfg else np.zeros(3))
        fixed_bodies.append(cfg.get(pre + "fixed", "false").lower() in ("1", "true", "yes"))
    mesh = merge_bodies(parts, densities)
    offsets = np.concatenate([[0], np.cumsum([len(p[0]) for p in parts])])
    x0 = mesh.rest_positions.copy()
    v0 = np.concatenate([np.repeat(v[None], len(p[0]), axis=0) for v, p in zip(vels, parts)])
    scripts = []
    for i, fx in enumerate(fixed_bodies):
        if fx:
            scripts.append(BoundaryScript(offsets[i] + np.arange(len(parts[i][0])), Motion()))
    bc_ids = sorted({int(k.split(".")[1]) for k in cfg if k.startswith("bc.")})
    for c in bc_ids:
        pre = f"bc.{c}."
        b = body_ids.index(int(cfg.get(pre + "body", body_ids[0])))
        nodes = _select_nodes(cfg.get(pre + "nodes", "all"), offsets[b], x0[offsets[b]:offsets[b + 1]])
        scripts.append(BoundaryScript(nodes, Motion.parse(cfg.get(pre + "motion", "static"))))
    return Scene(mesh, models, x0, v0, h=float(g["h"]), gravity=_vec3(g["gravity"], "gravity"),
                 dhat=float(g["dhat"]),
                 eps_v=float(g["dhat"] if g["eps_v"] is None else g["eps_v"]), chi=float(g["friction"]),
                 frames=int(g["frames"]), max_constraints=int(g["max_constraints"]),
                 friction_tol=float(g["friction_tol"]), scripts=scripts)
