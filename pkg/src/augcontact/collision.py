"""Broad phase (Morton-ordered linear BVH) and narrow-phase cubic CCD."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distance import InteriorViolation, distance

EPS = 1e-12
ROOT_TOL = 1e-12
TIME_SLOP = 1e-9  # allowance on the root time when testing the distance at a coplanarity root
BACKTRACK = 0.9
MIN_SEPARATION = 0.1  # a returned toi keeps at least this fraction of the starting gap


# ---------------------------------------------------------------- boxes & Morton codes


@dataclass
class Aabb:
    min: np.ndarray
    max: np.ndarray
    margin: float = 0.0

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=float) - self.margin
        self.max = np.asarray(self.max, dtype=float) + self.margin
        if np.any(self.min > self.max):
            raise ValueError("Aabb min exceeds max")

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def overlaps(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))


def _expand_bits(v: np.ndarray) -> np.ndarray:
    """Spread the low 10 bits of v so that two zero bits separate each."""
    v = v.astype(np.uint64) & np.uint64(0x3FF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x030000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x0300F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x030C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x09249249)
    return v


def morton_codes(points, lo, hi) -> np.ndarray:
    """30-bit codes (10 bits/axis, x most significant) of points inside [lo, hi]."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    lo = np.asarray(lo, dtype=float)
    ext = np.asarray(hi, dtype=float) - lo
    u = np.divide(p - lo, ext, out=np.zeros_like(p), where=ext > 0)
    q = np.clip(np.floor(u * 1024.0), 0, 1023).astype(np.uint64)
    return (_expand_bits(q[:, 0]) << np.uint64(2)) | (_expand_bits(q[:, 1]) << np.uint64(1)) | _expand_bits(q[:, 2])


def morton_encode(p, scene_box: Aabb) -> int:
    return int(morton_codes(np.clip(p, scene_box.min, scene_box.max), scene_box.min, scene_box.max)[0])


# ---------------------------------------------------------------- linear BVH


@dataclass
class Lbvh:
    keys: np.ndarray  # sorted uint64: morton << 32 | primitive
    order: np.ndarray  # primitive index of each sorted leaf
    left: np.ndarray  # child ids of internal nodes; ids >= n_internal are leaves
    right: np.ndarray
    parent: np.ndarray  # parent of every node (internal first, then leaves); -1 at root
    lo: np.ndarray  # node boxes, internal first then leaves
    hi: np.ndarray

    @property
    def n_leaves(self) -> int:
        return len(self.order)

    @property
    def n_internal(self) -> int:
        return self.n_leaves - 1

    @property
    def root(self) -> int:
        return 0


def _clz64(x: int) -> int:
    return 64 - x.bit_length()


def build_lbvh(lo, hi) -> Lbvh:
    """Binary radix tree over primitive boxes ``lo``/``hi`` (P x 3)."""
    lo = np.asarray(lo, dtype=float).reshape(-1, 3)
    hi = np.asarray(hi, dtype=float).reshape(-1, 3)
    P = len(lo)
    if P == 0:
        raise ValueError("need at least one primitive")
    centers = 0.5 * (lo + hi)
    codes = morton_codes(centers, centers.min(axis=0), centers.max(axis=0))
    keys = (codes << np.uint64(32)) | np.arange(P, dtype=np.uint64)
    perm = np.argsort(keys, kind="stable")
    keys = keys[perm]
    nI = P - 1
    left = np.zeros(nI, dtype=np.int64)
    right = np.zeros(nI, dtype=np.int64)
    parent = np.full(nI + P, -1, dtype=np.int64)
    k = [int(v) for v in keys]

    def delta(i, j):
        if j < 0 or j >= P:
            return -1
        return _clz64(k[i] ^ k[j])

    for i in range(nI):
        d = 1 if delta(i, i + 1) - delta(i, i - 1) > 0 else -1
        dmin = delta(i, i - d)
        lmax = 2
        while delta(i, i + lmax * d) > dmin:
            lmax *= 2
        l = 0
        t = lmax // 2
        while t >= 1:
            if delta(i, i + (l + t) * d) > dmin:
                l += t
            t //= 2
        j = i + l * d
        dnode = delta(i, j)
        s = 0
        t = l
        while True:
            t = (t + 1) // 2
            if delta(i, i + (s + t) * d) > dnode:
                s += t
            if t <= 1:
                break
        gamma = i + s * d + min(d, 0)
        left[i] = nI + gamma if min(i, j) == gamma else gamma
        right[i] = nI + gamma + 1 if max(i, j) == gamma + 1 else gamma + 1
        parent[left[i]] = i
        parent[right[i]] = i

    node_lo = np.empty((nI + P, 3))
    node_hi = np.empty((nI + P, 3))
    node_lo[nI:] = lo[perm]
    node_hi[nI:] = hi[perm]
    # bottom-up reduction: an internal node is finalized by the second child that reaches it
    visits = np.zeros(nI, dtype=np.int64)
    for leaf in range(nI, nI + P):
        node = parent[leaf]
        while node >= 0:
            visits[node] += 1
            if visits[node] == 1:
                break
            a, b = left[node], right[node]
            node_lo[node] = np.minimum(node_lo[a], node_lo[b])
            node_hi[node] = np.maximum(node_hi[a], node_hi[b])
            node = parent[node]
    return Lbvh(keys, perm.astype(np.int64), left, right, parent, node_lo, node_hi)


def query_boxes(bvh: Lbvh, qlo, qhi) -> np.ndarray:
    """All (query, primitive) pairs whose boxes overlap; rows sorted."""
    qlo = np.asarray(qlo, dtype=float).reshape(-1, 3)
    qhi = np.asarray(qhi, dtype=float).reshape(-1, 3)
    nI = bvh.n_internal
    q = np.arange(len(qlo))
    node = np.zeros(len(qlo), dtype=np.int64)
    found = []
    while len(q):
        hit = np.all(qlo[q] <= bvh.hi[node], axis=1) & np.all(bvh.lo[node] <= qhi[q], axis=1)
        q, node = q[hit], node[hit]
        leaf = node >= nI
        if np.any(leaf):
            found.append(np.stack([q[leaf], bvh.order[node[leaf] - nI]], axis=1))
        q, node = q[~leaf], node[~leaf]
        q = np.concatenate([q, q])
        node = np.concatenate([bvh.left[node], bvh.right[node]])
    if not found:
        return np.zeros((0, 2), dtype=np.int64)
    out = np.concatenate(found)
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def _prim_boxes(x0, x1, prims, margin):
    p0, p1 = x0[prims], x1[prims]
    lo = np.minimum(p0.min(axis=1), p1.min(axis=1)) - margin
    hi = np.maximum(p0.max(axis=1), p1.max(axis=1)) + margin
    return lo, hi


@dataclass
class Candidates:
    vf: np.ndarray  # (k, 2): vertex, triangle index
    ee: np.ndarray  # (k, 2): edge index i < j


def query_candidates(tris, edges, verts, x0, dx=None, dhat: float = 0.0, free=None) -> Candidates:
    """VF and EE candidate pairs whose swept, ``dhat``-inflated boxes overlap.

    ``free`` (bool per node) drops pairs whose nodes are all fixed.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1, 3)
    x1 = x0 if dx is None else x0 + np.asarray(dx, dtype=float).reshape(-1, 3)
    half = 0.5 * dhat
    tlo, thi = _prim_boxes(x0, x1, tris, half)
    elo, ehi = _prim_boxes(x0, x1, edges, half)
    vlo, vhi = _prim_boxes(x0, x1, verts[:, None], half)
    vf = query_boxes(build_lbvh(tlo, thi), vlo, vhi)
    vf = np.stack([verts[vf[:, 0]], vf[:, 1]], axis=1) if len(vf) else np.zeros((0, 2), dtype=np.int64)
    if len(vf):
        keep = np.all(tris[vf[:, 1]] != vf[:, [0]], axis=1)
        vf = vf[keep]
    ee = query_boxes(build_lbvh(elo, ehi), elo, ehi)
    if len(ee):
        ee = ee[ee[:, 0] < ee[:, 1]]
        a, b = edges[ee[:, 0]], edges[ee[:, 1]]
        share = (a[:, [0]] == b).any(axis=1) | (a[:, [1]] == b).any(axis=1)
        ee = ee[~share]
    if free is not None:
        if len(vf):
            vf = vf[free[vf[:, 0]] | free[tris[vf[:, 1]]].any(axis=1)]
        if len(ee):
            ee = ee[free[edges[ee[:, 0]]].any(axis=1) | free[edges[ee[:, 1]]].any(axis=1)]
    return Candidates(vf.astype(np.int64), ee.astype(np.int64))


# ---------------------------------------------------------------- polynomial roots


def _poly(coeffs, x):
    r = 0.0
    for c in coeffs:
        r = r * x + c
    return r


def solve_quadratic(a, b, c, lo=-EPS, hi=1.0 + EPS) -> list:
    scale = max(abs(a), abs(b), abs(c))
    if scale == 0.0:
        return []
    a, b, c = a / scale, b / scale, c / scale
    if abs(a) <= 1e-14:
        if abs(b) <= 1e-14:
            return []
        x = -c / b
        return [x] if lo <= x <= hi else []
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        if disc > -1e-14:
            disc = 0.0
        else:
            return []
    q = -0.5 * (b + np.copysign(np.sqrt(disc), b))
    roots = [q / a]
    if q != 0.0:
        roots.append(c / q)
    return sorted(x for x in set(roots) if lo <= x <= hi)


def _bracket_root(coeffs, u, v, pu):
    """Safeguarded Newton-bisection on a sign-changing bracket [u, v]."""
    dcoef = [3 * coeffs[0], 2 * coeffs[1], coeffs[2]]
    x = 0.5 * (u + v)
    for _ in range(200):
        px = _poly(coeffs, x)
        if px == 0.0:
            return x
        if (px < 0) == (pu < 0):
            u, pu = x, px
        else:
            v = x
        if v - u <= ROOT_TOL:
            break
        dp = _poly(dcoef, x)
        xn = x - px / dp if dp != 0.0 else 0.5 * (u + v)
        if not (u < xn < v):
            xn = 0.5 * (u + v)
        x = xn
    return 0.5 * (u + v)


def _polish(coeffs, x, lo, hi):
    dcoef = [3 * coeffs[0], 2 * coeffs[1], coeffs[2]]
    px = abs(_poly(coeffs, x))
    for _ in range(4):
        dp = _poly(dcoef, x)
        if dp == 0.0:
            break
        xn = x - _poly(coeffs, x) / dp
        pn = abs(_poly(coeffs, xn))
        if not (lo <= xn <= hi) or pn >= px:
            break
        x, px = xn, pn
    return x


def solve_cubic(a, b, c, d, lo=-EPS, hi=1.0 + EPS) -> list:
    """Real roots of a x^3 + b x^2 + c x + d inside [lo, hi], ascending."""
    scale = max(abs(a), abs(b), abs(c), abs(d))
    if scale == 0.0 or not np.isfinite(scale):
        return []
    a, b, c, d = a / scale, b / scale, c / scale, d / scale
    if abs(a) <= 1e-14:
        return solve_quadratic(b, c, d, lo, hi)
    coeffs = (a, b, c, d)
    knots = [lo] + [x for x in solve_quadratic(3 * a, 2 * b, c, lo, hi) if lo < x < hi] + [hi]
    first = None
    for u, v in zip(knots[:-1], knots[1:]):
        pu, pv = _poly(coeffs, u), _poly(coeffs, v)
        if pu == 0.0:
            first = u
            break
        if (pu < 0) != (pv < 0) and pv != 0.0:
            first = _bracket_root(coeffs, u, v, pu)
            break
    if first is None:
        # tangential roots at critical points or the upper end
        tol = 1e-13
        for x in knots[1:]:
            if abs(_poly(coeffs, x)) <= tol:
                first = x
                break
    if first is None:
        return []
    A = a
    B = b + A * first
    C = c + B * first
    rest = [_polish(coeffs, x, lo, hi) for x in solve_quadratic(A, B, C, -np.inf, np.inf)]
    roots = sorted([first] + [x for x in rest if lo <= x <= hi and x >= first - ROOT_TOL])
    out = []
    for x in roots:
        if not out or x - out[-1] > ROOT_TOL:
            out.append(x)
    return out


# ---------------------------------------------------------------- continuous collision


@dataclass
class CcdResult:
    toi: float | None
    kind: str
    d_at_toi: float | None = None


def _triple_terms(kind, X):
    if kind == "VF":
        return X[2] - X[1], X[3] - X[1], X[0] - X[1]
    return X[1] - X[0], X[3] - X[2], X[2] - X[0]


def _det3(u, v, w):
    return float(u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
                 + u[2] * (v[0] * w[1] - v[1] * w[0]))


def coplanarity_cubic(kind: str, X0, X1):
    """Coefficients (a, b, c, d) of the triple product along linear motion X0 -> X1."""
    u0, v0, w0 = _triple_terms(kind, X0)
    u1, v1, w1 = (p - q for p, q in zip(_triple_terms(kind, X1), (u0, v0, w0)))
    a = _det3(u1, v1, w1)
    b = _det3(u0, v1, w1) + _det3(u1, v0, w1) + _det3(u1, v1, w0)
    c = _det3(u1, v0, w0) + _det3(u0, v1, w0) + _det3(u0, v0, w1)
    d = _det3(u0, v0, w0)
    return a, b, c, d


def _dist_at(kind, X0, dX, t):
    try:
        return distance(kind, X0 + t * dX)
    except InteriorViolation:
        return None


def _advance(kind, X0, dX, d0, frac=MIN_SEPARATION):
    """Conservative advancement for persistently coplanar pairs."""
    na = 1 if kind == "VF" else 2
    speed = np.linalg.norm(dX[:na], axis=1).max() + np.linalg.norm(dX[na:], axis=1).max()
    if speed <= 0.0:
        return None
    target = frac * d0
    t, d = 0.0, d0
    for _ in range(500):
        dt = (d - target) / speed
        if t + dt >= 1.0:
            return None
        t += dt
        info = _dist_at(kind, X0, dX, t)
        d = info.d if info is not None else 0.0
        if d - target <= 1e-3 * target:
            return t, d
    return t, d


def ccd_conservative_toi(kind: str, x_start, x_end, dhat: float, eps: float = EPS) -> CcdResult:
    """Earliest safe fraction of the linear motion ``x_start -> x_end`` (4 x 3 each)."""
    X0 = np.asarray(x_start, dtype=float).reshape(4, 3)
    dX = np.asarray(x_end, dtype=float).reshape(4, 3) - X0
    d0 = distance(kind, X0).d
    if not np.any(dX):
        return CcdResult(None, kind)
    coeffs = coplanarity_cubic(kind, X0, X0 + dX)
    ext = max(np.ptp(X0, axis=0).max(), np.ptp(X0 + dX, axis=0).max())
    if max(abs(v) for v in coeffs) <= 1e-10 * ext**3:
        hit = _advance(kind, X0, dX, d0)
        return CcdResult(None, kind) if hit is None else CcdResult(hit[0], kind, hit[1])
    roots = [r for r in solve_cubic(*coeffs, -eps, 1.0 + eps) if r > eps]
    cands = [0.0] + roots + [1.0]
    na = 1 if kind == "VF" else 2
    speed = np.linalg.norm(dX[:na], axis=1).max() + np.linalg.norm(dX[na:], axis=1).max()
    thresh = eps + min(dhat, 0.5 * d0) + TIME_SLOP * speed
    for i in range(1, len(cands) - 1):
        tr = cands[i]
        info = _dist_at(kind, X0, dX, tr)
        if info is not None and info.d >= thresh:
            continue
        ref = 0.5 * (cands[i - 1] + tr)
        s_ref = np.sign(_poly(coeffs, ref))
        toi = min(tr, 1.0)
        for _ in range(2000):
            info = _dist_at(kind, X0, dX, toi)
            if info is not None and info.d > 0.0 and info.d >= MIN_SEPARATION * d0:
                if info.kind not in ("VF", "EE"):
                    break
                if s_ref != 0 and np.sign(_det3(*_triple_terms(kind, X0 + toi * dX))) == s_ref:
                    break
            toi *= BACKTRACK
        else:
            toi = 0.0
            info = distance(kind, X0)
        return CcdResult(toi, kind, info.d)
    return CcdResult(None, kind)
