"""Tetrahedral meshes: loading, validation, surface extraction and mass lumping."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


# outward faces of a positively oriented tet (a, b, c, d)
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def signed_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = positions[tets]
    e1, e2, e3 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


def extract_surface(tets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boundary faces (used by exactly one tet, outward) and their unique edges."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    bad = np.flatnonzero(counts > 2)
    if bad.size:
        f = uniq[bad[0]]
        raise MeshError(f"non-manifold boundary at face {int(bad[0])} ({f[0]} {f[1]} {f[2]})")
    boundary = counts[inverse] == 1
    tris = faces[boundary]
    order = np.lexsort(np.sort(tris, axis=1).T[::-1])
    tris = tris[order]
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return tris.astype(np.int64), edges.astype(np.int64)


def build_adjacency(n_nodes: int, tets: np.ndarray) -> list[np.ndarray]:
    pairs = tets[:, [(a, b) for a in range(4) for b in range(4) if a != b]].reshape(-1, 2)
    pairs = np.unique(pairs, axis=0)
    adj = [np.empty(0, dtype=np.int64) for _ in range(n_nodes)]
    if len(pairs):
        starts = np.searchsorted(pairs[:, 0], np.arange(n_nodes + 1))
        for i in range(n_nodes):
            adj[i] = pairs[starts[i]:starts[i + 1], 1].copy()
    return adj


@dataclass
class SimMesh:
    rest_positions: np.ndarray
    tets: np.ndarray
    surface_tris: np.ndarray
    surface_edges: np.ndarray
    lumped_mass: np.ndarray
    adjacency: list
    body: np.ndarray = field(default=None)  # body id per node
    tet_body: np.ndarray = field(default=None)
    _rest: tuple = field(default=None, repr=False, compare=False)

    @property
    def node_count(self) -> int:
        return len(self.rest_positions)

    @property
    def surface_vertices(self) -> np.ndarray:
        return np.unique(self.surface_tris)

    @property
    def rest_volumes(self) -> np.ndarray:
        return signed_volumes(self.rest_positions, self.tets)

    def rest_shape(self):
        """Cached (Dm^-1, rest volume, dF/dx) per tet; dF/dx maps the 12 tet coords to column-major vec(F)."""
        if self._rest is None:
            p = self.rest_positions[self.tets]
            dm = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
            dm_inv = np.linalg.inv(dm)
            g = np.concatenate([-dm_inv.sum(axis=1, keepdims=True), dm_inv], axis=1)  # (T, 4, 3): node v, column b
            dfdx = np.zeros((len(self.tets), 9, 12))
            for a in range(3):
                for b in range(3):
                    dfdx[:, a + 3 * b, a::3] = g[:, :, b]
            self._rest = (dm_inv, self.rest_volumes, dfdx)
        return self._rest

    @classmethod
    def from_arrays(cls, positions, tets, density: float = 1000.0, body=None, tet_body=None) -> "SimMesh":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
        n = len(positions)
        if not np.all(np.isfinite(positions)):
            raise MeshError("non-finite node coordinates")
        if tets.size and (tets.min() < 0 or tets.max() >= n):
            raise MeshError("element references a missing node")
        if np.any(np.array([len(set(t)) for t in tets.tolist()]) < 4):
            raise MeshError("element with repeated node")
        vol = signed_volumes(positions, tets)
        bad = np.flatnonzero(vol <= 0.0)
        if bad.size:
            raise MeshError(f"inverted element {int(bad[0])}")
        used = np.zeros(n, dtype=bool)
        used[tets.ravel()] = True
        if not used.all():
            raise MeshError(f"node {int(np.flatnonzero(~used)[0])} is not used by any element")
        tris, edges = extract_surface(tets)
        mesh = cls(
            rest_positions=positions,
            tets=tets,
            surface_tris=tris,
            surface_edges=edges,
            lumped_mass=np.zeros(n),
            adjacency=build_adjacency(n, tets),
            body=np.zeros(n, dtype=np.int64) if body is None else np.asarray(body, dtype=np.int64),
            tet_body=np.zeros(len(tets), dtype=np.int64) if tet_body is None else np.asarray(tet_body, dtype=np.int64),
        )
        mesh.lumped_mass = lump_mass(mesh, density)
        return mesh


def lump_mass(mesh: SimMesh, density) -> np.ndarray:
    """Each tet hands density*vol/4 to each of its nodes.

    ``density`` may be a scalar or one value per tet.
    """
    rho = np.broadcast_to(np.asarray(density, dtype=float), (len(mesh.tets),))
    if np.any(rho <= 0):
        raise MeshError("density must be positive")
    share = rho * mesh.rest_volumes / 4.0
    m = np.zeros(mesh.node_count)
    np.add.at(m, mesh.tets.ravel(), np.repeat(share, 4))
    return m


def _read_table(path: Path, width: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line.split())
    if not lines:
        raise MeshError(f"{path}: empty {kind} file")
    head = lines[0]
    try:
        count, dim = int(head[0]), int(head[1])
    except (ValueError, IndexError):
        raise MeshError(f"{path}: bad header line") from None
    if dim != width:
        raise MeshError(f"{path}: expected '{width}' in header, got {dim}")
    body = lines[1:]
    if len(body) != count:
        raise MeshError(f"{path}: header declares {count} rows, found {len(body)}")
    idx = np.empty(count, dtype=np.int64)
    vals = []
    for k, row in enumerate(body):
        if len(row) < width + 1:
            raise MeshError(f"{path}: row {k} has too few fields")
        try:
            idx[k] = int(row[0])
            vals.append([float(v) if kind == "node" else int(v) for v in row[1:width + 1]])
        except ValueError:
            raise MeshError(f"{path}: cannot parse row {k}") from None
    return idx, np.array(vals).reshape(count, width)


def load_mesh(node_file, element_file, density: float = 1000.0) -> SimMesh:
    """Read a ``.node`` / ``.ele`` pair (0-based indices)."""
    nidx, xyz = _read_table(node_file, 3, "node")
    uniq, counts = np.unique(nidx, return_counts=True)
    if np.any(counts > 1):
        raise MeshError(f"duplicate node {int(uniq[counts > 1][0])}")
    if not np.array_equal(np.sort(nidx), np.arange(len(nidx))):
        raise MeshError("node indices must be 0..N-1")
    pos = np.empty_like(xyz)
    pos[nidx] = xyz
    _, first, cnt = np.unique(pos, axis=0, return_index=True, return_counts=True)
    if np.any(cnt > 1):
        raise MeshError(f"duplicate node {int(first[cnt > 1][0])} (coincident coordinates)")
    eidx, ele = _read_table(element_file, 4, "element")
    order = np.argsort(eidx, kind="stable")
    return SimMesh.from_arrays(pos, ele[order].astype(np.int64), density)


def write_mesh(mesh_or_positions, tets, node_file, element_file) -> None:
    pos = np.asarray(mesh_or_positions, dtype=float)
    with open(node_file, "w") as f:
        f.write(f"{len(pos)} 3\n")
        for i, p in enumerate(pos):
            f.write(f"{i} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
    with open(element_file, "w") as f:
        f.write(f"{len(tets)} 4\n")
        for i, t in enumerate(np.asarray(tets)):
            f.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")


def merge_bodies(parts: list[tuple[np.ndarray, np.ndarray]], densities) -> SimMesh:
    """Concatenate several (positions, tets) bodies into one mesh."""
    pos, tets, body, tet_body, rho = [], [], [], [], []
    offset = 0
    for b, (p, t) in enumerate(parts):
        p = np.asarray(p, dtype=float)
        t = np.asarray(t, dtype=np.int64)
        pos.append(p)
        tets.append(t + offset)
        body.append(np.full(len(p), b))
        tet_body.append(np.full(len(t), b))
        rho.append(np.full(len(t), float(np.broadcast_to(densities, (len(parts),))[b])))
        offset += len(p)
    mesh = SimMesh.from_arrays(np.vstack(pos), np.vstack(tets), 1.0,
                               body=np.concatenate(body), tet_body=np.concatenate(tet_body))
    mesh.lumped_mass = lump_mass(mesh, np.concatenate(rho))
    return mesh


def box_tets(nx: int, ny: int, nz: int, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Regular grid of hexahedra, each split into 6 positively oriented tets."""
    size = np.asarray(size, dtype=float)
    g = np.stack(np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"), -1)
    pos = g.reshape(-1, 3) * (size / [nx, ny, nz]) + np.asarray(origin, dtype=float)

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    # Kuhn split along the main diagonal 0 -> 6 of the hex
    hex_tets = [(0, 1, 2, 6), (0, 2, 3, 6), (0, 3, 7, 6), (0, 7, 4, 6), (0, 4, 5, 6), (0, 5, 1, 6)]
    corner = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                c = [nid(i + a, j + b, k + d) for a, b, d in corner]
                for t in hex_tets:
                    tets.append([c[v] for v in t])
    tets = np.array(tets, dtype=np.int64)
    vol = signed_volumes(pos, tets)
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return pos, tets


def regular_tet(edge: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Regular tetrahedron resting on a face parallel to the xz-plane, apex up (+y)."""
    r = edge / np.sqrt(3.0)
    h = edge * np.sqrt(2.0 / 3.0)
    base = [(r * np.cos(a), 0.0, r * np.sin(a)) for a in (0.0, 2 * np.pi / 3, 4 * np.pi / 3)]
    pos = np.array(base + [(0.0, h, 0.0)])
    pos -= [0.0, h / 4.0, 0.0]
    pos += np.asarray(center, dtype=float)
    tets = np.array([[0, 1, 2, 3]])
    if signed_volumes(pos, tets)[0] < 0:
        tets = np.array([[0, 2, 1, 3]])
    return pos, tets
