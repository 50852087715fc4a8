"""Contact pairs, the clamped log barrier, slack/multiplier terms and lagged friction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .collision import query_candidates
from .distance import (DistanceInfo, InteriorViolation, distance, distance_derivatives, point_triangle_distance_batch,
                       segment_segment_distance_batch, signed_weights)
from .energy import StencilBatch, project_psd

log = logging.getLogger(__name__)

AUG_FRACTION = 1e-2  # pairs closer than this fraction of dhat get multipliers


# ---------------------------------------------------------------- barrier & slack


def barrier(d, dhat):
    """b(d) = -(d - dhat)^2 ln(d / dhat) on (0, dhat), zero beyond; returns (b, b', b'')."""
    d = np.asarray(d, dtype=float)
    dhat = np.asarray(dhat, dtype=float)
    if np.any(d <= 0):
        raise InteriorViolation("barrier evaluated at non-positive distance")
    on = d < dhat
    dd = np.where(on, d, dhat)
    t = dd - dhat
    lg = np.log(dd / dhat)
    b = np.where(on, -t * t * lg, 0.0)
    b1 = np.where(on, -2.0 * t * lg - t * t / dd, 0.0)
    b2 = np.where(on, -2.0 * lg - 4.0 * t / dd + t * t / (dd * dd), 0.0)
    if b.ndim == 0:
        return float(b), float(b1), float(b2)
    return b, b1, b2


def slack_closed_form(mu, sigma, dhat, d):
    """Minimiser over s >= 0 of mu c + sigma/2 c^2 with c = dhat + s - d."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return np.maximum(-np.asarray(mu) / sigma - dhat + np.asarray(d), 0.0)


# ---------------------------------------------------------------- pairs


@dataclass
class ContactPair:
    key: tuple  # ("VF", vertex, tri) or ("EE", edge_i, edge_j)
    kind: str  # classified kind
    nodes: np.ndarray  # active global nodes, A side first
    weights: np.ndarray  # signed closest-point weights over ``nodes``
    side_a: int
    d: float
    beta: np.ndarray
    normal: np.ndarray
    points: np.ndarray  # the 4 primitive positions used
    info: DistanceInfo = field(repr=False, default=None)
    lam: float = 0.0
    tangent: np.ndarray | None = None


class SurfaceTopology:
    """Surface primitives of a mesh plus the free-node mask."""

    def __init__(self, mesh, free=None):
        self.tris = mesh.surface_tris
        self.edges = mesh.surface_edges
        self.verts = mesh.surface_vertices
        self.free = np.ones(mesh.node_count, dtype=bool) if free is None else np.asarray(free, dtype=bool)

    def primitive_nodes(self, key) -> np.ndarray:
        if key[0] == "VF":
            return np.concatenate([[key[1]], self.tris[key[2]]])
        return np.concatenate([self.edges[key[1]], self.edges[key[2]]])

    def candidates(self, x, dx=None, margin=0.0):
        return query_candidates(self.tris, self.edges, self.verts, x, dx, margin, self.free)

    def candidate_keys(self, x, dx=None, margin=0.0) -> list:
        c = self.candidates(x, dx, margin)
        return [("VF", int(v), int(t)) for v, t in c.vf] + [("EE", int(i), int(j)) for i, j in c.ee]

    def candidate_arrays(self, x, dx=None, margin=0.0):
        """Candidate keys with their (k, 4) node indices and unsigned distances at ``x``."""
        c = self.candidates(x, dx, margin)
        x3 = np.asarray(x, dtype=float).reshape(-1, 3)
        keys = [("VF", int(v), int(t)) for v, t in c.vf] + [("EE", int(i), int(j)) for i, j in c.ee]
        nodes = np.concatenate([np.concatenate([c.vf[:, :1], self.tris[c.vf[:, 1]]], axis=1),
                                np.concatenate([self.edges[c.ee[:, 0]], self.edges[c.ee[:, 1]]], axis=1)])
        p = x3[nodes]
        nv = len(c.vf)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.concatenate([point_triangle_distance_batch(p[:nv, 0], p[:nv, 1], p[:nv, 2], p[:nv, 3]),
                                segment_segment_distance_batch(p[nv:, 0], p[nv:, 1], p[nv:, 2], p[nv:, 3])])
        return keys, nodes, d


def make_pair(topo: SurfaceTopology, x, key) -> ContactPair:
    x = np.asarray(x).reshape(-1, 3)
    glob = topo.primitive_nodes(key)
    pts = x[glob]
    info = distance(key[0], pts)
    return ContactPair(key, info.kind, glob[info.active], signed_weights(info), info.side_a,
                       info.d, info.beta, info.normal, pts, info)


def active_pairs(topo: SurfaceTopology, x, dhat: float) -> list:
    """All surface pairs closer than ``dhat`` (the active set), in deterministic order."""
    keys, _, d = topo.candidate_arrays(x, None, dhat)
    out = []
    for k in np.flatnonzero(d < dhat * (1.0 + 1e-8)):
        p = make_pair(topo, x, keys[k])
        if p.d < dhat:
            out.append(p)
    return out


def min_distance(pairs) -> float:
    return min((p.d for p in pairs), default=np.inf)


# ---------------------------------------------------------------- augmented Lagrangian state


@dataclass
class AugLagState:
    pairs: list = field(default_factory=list)  # the active set at the current iterate
    aug: list = field(default_factory=list)  # keys of the augmented subset
    mu: dict = field(default_factory=dict)
    slack: dict = field(default_factory=dict)
    sigma: float = 1.0
    sigma0: float = 1.0
    min_d_prev: float = np.inf

    def aug_set(self) -> set:
        return set(self.aug)


def pair_potential(d, dhat, sigma, mu=None, s=None):
    """Per-pair contribution phi(d) and its first two derivatives."""
    b, b1, b2 = barrier(d, dhat)
    phi, p1, p2 = sigma * b, sigma * b1, sigma * b2
    if mu is not None:
        ba, ba1, ba2 = barrier(d, dhat + s)
        phi += mu * (dhat + s - d) + sigma * ba
        p1 += -mu + sigma * ba1
        p2 += sigma * ba2
    return phi, p1, p2


def _pair_terms(pair, dhat, state, with_aug):
    if with_aug and pair.key in state.mu and pair.key in state.aug_set():
        return pair_potential(pair.d, dhat, state.sigma, state.mu[pair.key], state.slack.get(pair.key, 0.0))
    return pair_potential(pair.d, dhat, state.sigma)


def _evaluated_pairs(topo, x, pairs, state):
    keys = {p.key for p in pairs}
    extra = [make_pair(topo, x, k) for k in state.aug if k not in keys]
    return list(pairs) + extra


def contact_energy(topo, x, pairs, state: AugLagState, dhat: float, with_aug=True) -> float:
    """sigma sum b(d, dhat) + augmentation terms over the augmented keys."""
    total = 0.0
    aug = state.aug_set() if with_aug else set()
    for p in (_evaluated_pairs(topo, x, pairs, state) if with_aug else pairs):
        if p.d >= dhat and p.key not in aug:
            continue
        total += _pair_terms(p, dhat, state, with_aug)[0]
    return total


def _group_stencils(nodes_list, mats):
    by_k = {}
    for n, m in zip(nodes_list, mats):
        by_k.setdefault(len(n), ([], []))
        by_k[len(n)][0].append(n)
        by_k[len(n)][1].append(m)
    out = []
    for k in sorted(by_k):
        nodes, hs = by_k[k]
        H, w = project_psd(np.array(hs))
        out.append(StencilBatch(np.array(nodes), H, w))
    return out


def contact_derivatives(topo, x, pairs, state: AugLagState, dhat: float, n_nodes: int, with_aug=True,
                        hessian=True):
    """Energy, gradient (3N) and PSD-projected stencils of the contact terms."""
    g = np.zeros((n_nodes, 3))
    energy = 0.0
    nodes_list, mats = [], []
    aug = state.aug_set() if with_aug else set()
    for p in (_evaluated_pairs(topo, x, pairs, state) if with_aug else pairs):
        if p.d >= dhat and p.key not in aug:
            continue
        phi, p1, p2 = _pair_terms(p, dhat, state, with_aug)
        energy += phi
        _, gd, hd = distance_derivatives(p.info, p.points)
        np.add.at(g, p.nodes, (p1 * gd).reshape(-1, 3))
        if hessian:
            nodes_list.append(p.nodes)
            mats.append(p2 * np.outer(gd, gd) + p1 * hd)
    stencils = _group_stencils(nodes_list, mats) if hessian else []
    return energy, g.ravel(), stencils


def barrier_gradient_sum(topo, x, pairs, dhat, n_nodes) -> np.ndarray:
    """Gradient of sum_i b(d_i, dhat) over ``pairs`` (no stiffness)."""
    g = np.zeros((n_nodes, 3))
    for p in pairs:
        _, b1, _ = barrier(p.d, dhat)
        _, gd, _ = distance_derivatives(p.info, p.points)
        np.add.at(g, p.nodes, (b1 * gd).reshape(-1, 3))
    return g.ravel()


def normal_force(pair, dhat, state, with_aug=True) -> float:
    """|d phi / d d| for the pair: the magnitude of its normal contact force."""
    return abs(_pair_terms(pair, dhat, state, with_aug)[1])


# ---------------------------------------------------------------- friction


@dataclass
class FrictionAnchor:
    key: tuple
    nodes: np.ndarray
    weights: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray  # 2 x 3 orthonormal rows spanning the plane normal to ``normal``
    lam: float
    beta: np.ndarray | None = None  # closest-point weights over the 4 primitive points


def tangent_basis(n) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    e = np.zeros(3)
    e[int(np.argmin(np.abs(n)))] = 1.0
    t1 = e - (e @ n) * n
    t1 /= np.linalg.norm(t1)
    return np.stack([t1, np.cross(n, t1)])


def update_friction_anchors(pairs, dhat, state: AugLagState, with_aug=True) -> list:
    """Freeze normal force, normal, weights and tangent plane of each active pair."""
    anchors = []
    for p in pairs:
        nrm = np.linalg.norm(p.normal)
        if not nrm > 0:
            log.warning("dropping pair %s with degenerate normal", p.key)
            continue
        n = p.normal / nrm
        lam = normal_force(p, dhat, state, with_aug)
        if lam <= 0.0:
            continue
        anchors.append(FrictionAnchor(p.key, p.nodes.copy(), p.weights.copy(), n, tangent_basis(n), lam,
                                      np.array(p.beta, dtype=float)))
    return anchors


def anchor_change(old: list, new: list) -> float:
    """Largest relative change between two anchor sets (matched by pair key)."""
    a = {k.key: k for k in old}
    b = {k.key: k for k in new}
    scale = max([k.lam for k in old] + [k.lam for k in new] + [1e-300])
    worst = 0.0
    for key in set(a) | set(b):
        if key not in a or key not in b:
            worst = max(worst, (a.get(key) or b.get(key)).lam / scale)
            continue
        p, q = a[key], b[key]
        worst = max(worst, abs(p.lam - q.lam) / scale)
        worst = max(worst, float(np.linalg.norm(p.normal - q.normal)))
        if p.beta is not None and q.beta is not None:
            worst = max(worst, float(np.abs(p.beta - q.beta).max()))
        elif len(p.nodes) != len(q.nodes) or np.any(p.nodes != q.nodes):
            worst = max(worst, 1.0)
        else:
            worst = max(worst, float(np.abs(p.weights - q.weights).max()))
    return worst


def mollifier(y, eps_v, h):
    """f(y) and f1(y) = f'(y)/y, f1'(y) for the friction magnitude mollifier."""
    eh = eps_v * h
    if y < eh:
        f = -y**3 / (3.0 * eh * eh) + y * y / eh
        f1 = -y / (eh * eh) + 2.0 / eh
        df1 = -1.0 / (eh * eh)
    else:
        f = y - eh / 3.0
        f1 = 1.0 / y
        df1 = -1.0 / (y * y)
    return f, f1, df1


def _tangential(anchor, dx):
    r = anchor.weights @ dx[anchor.nodes]
    u = anchor.tangent @ r
    return u, float(np.linalg.norm(u))


def friction_potential(x, x_prev, anchors, chi, eps_v, h, n_nodes=None, hessian=True):
    """Energy, gradient and stencils of sum_j chi lam_j f(|T_j (beta_j . (x - x_prev))|)."""
    if not eps_v > 0:
        raise ValueError("eps_v must be positive")
    dx = (np.asarray(x) - np.asarray(x_prev)).reshape(-1, 3)
    n_nodes = len(dx) if n_nodes is None else n_nodes
    g = np.zeros((n_nodes, 3))
    energy = 0.0
    nodes_list, mats = [], []
    if chi == 0:
        return 0.0, g.ravel(), []
    for a in anchors:
        u, y = _tangential(a, dx)
        f, f1, df1 = mollifier(y, eps_v, h)
        c = chi * a.lam
        energy += c * f
        gr = c * f1 * (a.tangent.T @ u)
        np.add.at(g, a.nodes, np.outer(a.weights, gr))
        if hessian:
            inner = f1 * np.eye(2)
            if y > 0:
                inner = inner + (df1 / y) * np.outer(u, u)
            # inner is PSD for this mollifier; clamp anyway for safety
            w, v = np.linalg.eigh(inner)
            inner = (v * np.maximum(w, 0.0)) @ v.T
            h3 = c * a.tangent.T @ inner @ a.tangent
            nodes_list.append(a.nodes)
            mats.append(np.kron(np.outer(a.weights, a.weights), h3))
    stencils = _group_stencils(nodes_list, mats) if hessian else []
    return energy, g.ravel(), stencils


def friction_energy(x, x_prev, anchors, chi, eps_v, h) -> float:
    if chi == 0:
        return 0.0
    dx = (np.asarray(x) - np.asarray(x_prev)).reshape(-1, 3)
    total = 0.0
    for a in anchors:
        _, y = _tangential(a, dx)
        total += chi * a.lam * mollifier(y, eps_v, h)[0]
    return total
