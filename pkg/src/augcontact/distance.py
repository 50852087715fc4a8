"""Unsigned distances between surface primitives with exact derivatives.

A vertex-triangle (VF) or edge-edge (EE) query is classified by where the
closest points land: the interior of both simplices keeps the full kind,
boundary hits degrade to vertex-edge (VE) or vertex-vertex (VV).

Derivatives are taken of the squared distance f = |r|^2 with
r = sum_i c_i X_i, c the signed closest-point weights.  Because the weights
are optimal, f_x = 2 c_i r and the Hessian is the Schur complement
f_xx - f_xt f_tt^+ f_tx over the free barycentric parameters t.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BARY_TOL = 1e-10


class InteriorViolation(ValueError):
    """Two primitives touch or overlap (distance <= 0)."""


@dataclass
class DistanceInfo:
    kind: str  # VF, EE, VE, VV
    d: float
    beta: np.ndarray  # unsigned weights over the 4 input points, each primitive sums to 1
    normal: np.ndarray  # unit vector from the B-side closest point to the A-side one
    active: np.ndarray  # local indices (into the 4 points) with nonzero weight
    side_a: int  # how many of ``active`` belong to side A


def _seg_param(p, a, b):
    e = b - a
    ee = e @ e
    if ee <= 0.0:
        return 0.0
    return min(max(((p - a) @ e) / ee, 0.0), 1.0)


def _classify(weights, tol=BARY_TOL):
    return [i for i, w in enumerate(weights) if w > tol]


def _vf(p, t0, t1, t2):
    e1, e2 = t1 - t0, t2 - t0
    q = p - t0
    g = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    det = g[0, 0] * g[1, 1] - g[0, 1] ** 2
    best = None
    if det > 1e-14 * g[0, 0] * g[1, 1]:
        u, v = np.linalg.solve(g, [e1 @ q, e2 @ q])
        w = np.array([1.0 - u - v, u, v])
        if np.all(w > BARY_TOL):
            r = q - u * e1 - v * e2
            best = (float(np.sqrt(r @ r)), w, 3)
    tri = (t0, t1, t2)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        s = _seg_param(p, tri[i], tri[j])
        w = np.zeros(3)
        w[i], w[j] = 1.0 - s, s
        r = p - (tri[i] + s * (tri[j] - tri[i]))
        dist = float(np.sqrt(r @ r))
        dim = len(_classify(w))
        if best is None or dist < best[0] * (1.0 - 1e-14) or (dist <= best[0] and dim > best[2]):
            best = (dist, w, dim)
    d, w, _ = best
    act = _classify(w)
    w = np.where(w > BARY_TOL, w, 0.0)
    w /= w.sum()
    kind = {3: "VF", 2: "VE", 1: "VV"}[len(act)]
    beta = np.concatenate([[1.0], w])
    closest = w[0] * t0 + w[1] * t1 + w[2] * t2
    return kind, beta, [0] + [1 + i for i in act], 1, p - closest


def _ee(a0, a1, b0, b1):
    ea, eb = a1 - a0, b1 - b0
    w0 = a0 - b0
    aa, bb, ab = ea @ ea, eb @ eb, ea @ eb
    det = aa * bb - ab * ab
    best = None
    cand = None
    if det > 1e-14 * aa * bb:
        s, t = np.linalg.solve([[aa, -ab], [-ab, bb]], [-(ea @ w0), eb @ w0])
        cand = (s, t)
    elif aa > 0 and bb > 0:
        # parallel: midpoint of the overlap of b projected on a
        s0, s1 = sorted([((b0 - a0) @ ea) / aa, ((b1 - a0) @ ea) / aa])
        lo, hi = max(s0, 0.0), min(s1, 1.0)
        if hi > lo:
            s = 0.5 * (lo + hi)
            t = ((a0 + s * ea - b0) @ eb) / bb
            cand = (s, t)
    if cand is not None:
        s, t = cand
        if BARY_TOL < s < 1 - BARY_TOL and BARY_TOL < t < 1 - BARY_TOL:
            r = w0 + s * ea - t * eb
            best = (float(np.sqrt(r @ r)), np.array([1 - s, s, 1 - t, t]), 4)
    pts = (a0, a1, b0, b1)
    for i, (j, k) in ((0, (2, 3)), (1, (2, 3)), (2, (0, 1)), (3, (0, 1))):
        u = _seg_param(pts[i], pts[j], pts[k])
        w = np.zeros(4)
        w[i] = 1.0
        w[j], w[k] = 1.0 - u, u
        r = pts[i] - (pts[j] + u * (pts[k] - pts[j]))
        dist = float(np.sqrt(r @ r))
        dim = len(_classify(w))
        if best is None or dist < best[0] * (1.0 - 1e-14) or (dist <= best[0] and dim > best[2]):
            best = (dist, w, dim)
    d, w, dim = best
    wa = np.where(w[:2] > BARY_TOL, w[:2], 0.0)
    wb = np.where(w[2:] > BARY_TOL, w[2:], 0.0)
    wa /= wa.sum()
    wb /= wb.sum()
    act_a = [i for i in range(2) if wa[i] > 0]
    act_b = [2 + i for i in range(2) if wb[i] > 0]
    kind = {4: "EE", 3: "VE", 2: "VV"}[len(act_a) + len(act_b)]
    r = wa[0] * a0 + wa[1] * a1 - wb[0] * b0 - wb[1] * b1
    return kind, np.concatenate([wa, wb]), act_a + act_b, len(act_a), r


def distance(kind: str, points) -> DistanceInfo:
    """Closest distance of a VF (vertex, t0, t1, t2) or EE (a0, a1, b0, b1) query."""
    X = np.asarray(points, dtype=float).reshape(4, 3)
    if kind == "VF":
        k, beta, act, na, r = _vf(*X)
    elif kind == "EE":
        k, beta, act, na, r = _ee(*X)
    else:
        raise ValueError(f"primitive kind must be VF or EE, got {kind!r}")
    d = float(np.sqrt(r @ r))
    if not d > 0.0:
        raise InteriorViolation(f"{kind} primitives touch (d = {d})")
    return DistanceInfo(k, d, beta, r / d, np.asarray(act, dtype=np.int64), na)


def signed_weights(info: DistanceInfo) -> np.ndarray:
    """Weights c over ``info.active`` with r = sum c_i X_i."""
    c = info.beta[info.active].copy()
    c[info.side_a:] *= -1.0
    return c


def sqdist_derivatives(X, c, side_a):
    """Gradient and Hessian of f = |sum c_i X_i|^2 minimised over the weights.

    ``X`` holds the active points (A side first), ``c`` their signed weights.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    r = c @ X
    grad = 2.0 * np.outer(c, r).ravel()
    hess = 2.0 * np.kron(np.outer(c, c), np.eye(3))
    cols = []
    for lo, hi, sgn in ((0, side_a, 1.0), (side_a, n, -1.0)):
        for m in range(lo + 1, hi):
            col = np.zeros(n)
            col[m], col[lo] = sgn, -sgn
            cols.append(col)
    if cols:
        C = np.array(cols).T  # n x p
        G = C.T @ X  # p x 3, dr/dt
        f_tt = 2.0 * G @ G.T
        f_xt = 2.0 * (np.einsum("im,k->ikm", C, r) + np.einsum("i,mk->ikm", c, G)).reshape(3 * n, -1)
        hess = hess - f_xt @ np.linalg.pinv(f_tt, rcond=1e-12) @ f_xt.T
    return float(r @ r), grad, 0.5 * (hess + hess.T)


def distance_derivatives(info: DistanceInfo, points):
    """First and second derivatives of the true distance over the active points."""
    X = np.asarray(points, dtype=float).reshape(4, 3)[info.active]
    f, gf, hf = sqdist_derivatives(X, signed_weights(info), info.side_a)
    d = np.sqrt(f)
    g = gf / (2.0 * d)
    h = (hf - 2.0 * np.outer(g, g)) / (2.0 * d)
    return d, g, h


# ---------------------------------------------------------------- batched unsigned distances (no classification)


def point_triangle_distance_batch(p, t0, t1, t2):
    """Unsigned point-triangle distances for stacked inputs (..., 3)."""
    p, t0, t1, t2 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (p, t0, t1, t2)))
    e1, e2 = t1 - t0, t2 - t0
    q = p - t0
    a, b, c = (e1 * e1).sum(-1), (e1 * e2).sum(-1), (e2 * e2).sum(-1)
    d1, d2 = (e1 * q).sum(-1), (e2 * q).sum(-1)
    det = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (c * d1 - b * d2) / det
        v = (a * d2 - b * d1) / det
        inside = (det > 0) & (u >= 0) & (v >= 0) & (u + v <= 1)
        r = q - u[..., None] * e1 - v[..., None] * e2
        best = np.where(inside, np.sqrt((r * r).sum(-1)), np.inf)
    for s0, s1 in ((t0, t1), (t1, t2), (t2, t0)):
        best = np.minimum(best, point_segment_distance_batch(p, s0, s1))
    return best


def point_segment_distance_batch(p, a, b):
    e = b - a
    ee = (e * e).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.clip(np.where(ee > 0, ((p - a) * e).sum(-1) / ee, 0.0), 0.0, 1.0)
    r = p - a - s[..., None] * e
    return np.sqrt((r * r).sum(-1))


def segment_segment_distance_batch(a0, a1, b0, b1):
    a0, a1, b0, b1 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a0, a1, b0, b1)))
    ea, eb = a1 - a0, b1 - b0
    w0 = a0 - b0
    aa, bb, ab = (ea * ea).sum(-1), (eb * eb).sum(-1), (ea * eb).sum(-1)
    da, db = (ea * w0).sum(-1), (eb * w0).sum(-1)
    det = aa * bb - ab * ab
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (ab * db - bb * da) / det
        t = (aa * db - ab * da) / det
        ok = (det > 1e-14 * aa * bb) & (s >= 0) & (s <= 1) & (t >= 0) & (t <= 1)
        r = w0 + s[..., None] * ea - t[..., None] * eb
        best = np.where(ok, np.sqrt((r * r).sum(-1)), np.inf)
    best = np.minimum(best, point_segment_distance_batch(a0, b0, b1))
    best = np.minimum(best, point_segment_distance_batch(a1, b0, b1))
    best = np.minimum(best, point_segment_distance_batch(b0, a0, a1))
    best = np.minimum(best, point_segment_distance_batch(b1, a0, a1))
    return best
